import json
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodcast.errors import DataError
from floodcast.grids import Raster
from floodcast.hydrodata import PrecipSeries, read_gauge_config
from floodcast.synthdata import (
    channel_centerline,
    flat_fill_extent,
    make_event_catalog,
    make_region,
    make_valley_dem,
    route_linear_reservoir,
    storm_precip,
    write_scenario,
)

T0 = datetime(2020, 1, 1, tzinfo=timezone.utc)


def test_noise_free_cross_sections_are_piecewise_linear():
    rows, cols, depth, slope, hw, base = 20, 40, 2.0, 0.05, 3.0, 100.0
    dem = make_valley_dem(rows, cols, channel_depth=depth, bank_slope=slope, channel_half_width=hw, base=base)
    center = channel_centerline(rows, cols)
    far = 1e3
    for r in range(rows):
        c = center[r]
        knots = [c - far, c - hw, c, c + hw, c + far]
        heights = [base + slope * (far - hw), base, base - depth, base, base + slope * (far - hw)]
        np.testing.assert_allclose(dem.values[r], np.interp(np.arange(cols), knots, heights), atol=1e-9)


def test_same_seed_same_dem():
    a = make_valley_dem(32, 32, noise_amp=0.3, seed=4)
    b = make_valley_dem(32, 32, noise_amp=0.3, seed=4)
    c = make_valley_dem(32, 32, noise_amp=0.3, seed=5)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_row_minimum_on_channel():
    dem = make_valley_dem(64, 64)
    center = channel_centerline(64, 64)
    assert np.all(np.abs(dem.values.argmin(axis=1) - center) <= 0.5)


def test_flat_fill_limits(valley_dem):
    assert not flat_fill_extent(valley_dem, valley_dem.values.min()).wet().any()
    assert flat_fill_extent(valley_dem, valley_dem.values.max() + 1).wet().all()


@settings(max_examples=40, deadline=None)
@given(st.floats(97.0, 104.0), st.floats(0.0, 2.0))
def test_flat_fill_monotone(valley_dem, s, ds):
    lo = flat_fill_extent(valley_dem, s).wet()
    hi = flat_fill_extent(valley_dem, s + ds).wet()
    assert not (lo & ~hi).any()


def test_flat_fill_needs_connection():
    z = np.array([[0.0, 5.0, 0.0]])
    wet = flat_fill_extent(Raster(z), 1.0, seed_pixel=(0, 0)).wet()
    np.testing.assert_array_equal(wet, [[True, False, False]])


def precip(vals):
    return PrecipSeries("B", T0, 1.0, np.asarray(vals, dtype=float))


def test_reservoir_rest_and_step_response():
    s = route_linear_reservoir(precip(np.zeros(50)), 10.0, 0.5, 2.0)
    assert np.all(s.values == 2.0)
    k, g, p, base = 10.0, 0.05, 4.0, 2.0
    s = route_linear_reservoir(precip(np.full(200, p)), k, g, base)
    t = np.arange(200)
    exact = base + g * p * k * (1 - (1 - 1 / k) ** t)
    np.testing.assert_allclose(s.values, exact, rtol=0, atol=1e-12)


def test_reservoir_gain_linearity_and_floor():
    p = storm_precip(500, seed=3)
    a = route_linear_reservoir(p, 20.0, 0.05, 1.0).values - 1.0
    b = route_linear_reservoir(p, 20.0, 0.10, 1.0).values - 1.0
    np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)
    assert np.all(a >= 0) and np.all(np.isfinite(a))
    with pytest.raises(DataError):
        route_linear_reservoir(p, 0.0, 0.05, 1.0)


def test_catalog_flip_rates(valley_dem):
    stage = make_region(24 * 60, seed=1).targets["G1"]
    stage = stage.with_values(stage.values - stage.values.mean() + 101.0)
    clean = make_event_catalog(valley_dem, stage, 4, seed=2)
    for ev in clean.events:
        np.testing.assert_array_equal(ev.extent.wet(), flat_fill_extent(valley_dem, ev.stage_m).wet())
    noisy = make_event_catalog(valley_dem, stage, 4, seed=2, flip_rate=0.05)
    n = valley_dem.valid.sum()
    sd = np.sqrt(n * 0.05 * 0.95)
    for a, b in zip(clean.events, noisy.events):
        assert a.stage_m == b.stage_m
        flips = int((a.extent.wet() ^ b.extent.wet()).sum())
        assert abs(flips - 0.05 * n) < 5 * sd
    assert len(make_event_catalog(valley_dem, stage, 1).events) == 1


def test_region_is_deterministic():
    a = make_region(24 * 20, seed=9)
    b = make_region(24 * 20, seed=9)
    for gid in a.targets:
        np.testing.assert_array_equal(a.targets[gid].values, b.targets[gid].values)
    assert a.upstream_ids == {"G1": ["U1", "U2"], "G2": ["U3"]}


def test_flood_scenario_exceeds_warning(tmp_path):
    desc = write_scenario(tmp_path, "flood", seed=0, n_hours=24 * 60)
    gauges = {g.gauge_id: g for g in read_gauge_config(tmp_path / "gauges.json")}
    assert desc["truth_max_after_now_m"]["G1"] > gauges["G1"].danger_stage_m
    assert json.loads((tmp_path / "scenario.json").read_text())["now"] == desc["now"]
    assert (tmp_path / "catalogs" / "G1" / "catalog.json").exists()
    with pytest.raises(DataError):
        write_scenario(tmp_path / "x", "drought")
