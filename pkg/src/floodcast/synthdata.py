"""Synthetic watersheds with known ground truth.

Nothing here aims at hydraulic realism: the generators exist so every
model has an exact or analytic oracle to be checked against.
"""

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._io import atomic_write_json
from .errors import DataError
from .grids import Raster, binary_raster, write_ascii_grid
from .hydrodata import (GaugeConfig, PrecipGridFrame, PrecipSeries, StageSeries, WatershedMask,
                        format_timestamp, write_gauge_config, write_precip_csv, write_precip_frame,
                        write_stage_csv, write_watershed_mask)
from .inundation_threshold import EventCatalog, FloodEvent, write_event_catalog

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def channel_centerline(rows, cols, amplitude=None, period=None):
    """Column of the meandering channel centre for each row."""
    amplitude = cols / 8 if amplitude is None else amplitude
    period = rows if period is None else period
    r = np.arange(rows)
    return (cols - 1) / 2 + amplitude * np.sin(2 * np.pi * r / period)


def make_valley_dem(rows, cols, channel_depth=2.0, bank_slope=0.05, noise_amp=0.0, seed=0,
                    channel_half_width=3.0, base=100.0, cell_size=16.0,
                    amplitude=None, period=None) -> Raster:
    """V-shaped valley around a meandering channel.

    ``bank_slope`` is the rise in meters per pixel of horizontal distance
    from the channel edge. Inside the channel the bed falls linearly to
    ``base - channel_depth`` at the centreline. Smooth noise of peak
    amplitude ``noise_amp`` is added from a seeded Gaussian-filtered field.
    """
    center = channel_centerline(rows, cols, amplitude, period)
    cc = np.arange(cols)[None, :]
    dist = np.abs(cc - center[:, None])
    bank = bank_slope * np.maximum(dist - channel_half_width, 0.0)
    bed = channel_depth * np.maximum(1.0 - dist / channel_half_width, 0.0)
    z = base + bank - bed
    if noise_amp > 0:
        rng = np.random.default_rng(seed)
        field = ndimage.gaussian_filter(rng.standard_normal((rows, cols)), sigma=4.0)
        field /= np.abs(field).max()
        z = z + noise_amp * field
    return Raster(z, cell_size)


def channel_seed_pixel(dem: Raster) -> tuple:
    r = dem.rows // 2
    c = int(np.round(channel_centerline(dem.rows, dem.cols)[r]))
    return r, c


def flat_fill_extent(dem: Raster, stage: float, seed_pixel=None) -> Raster:
    """Pixels below ``stage`` 4-connected to the seed pixel (bathtub fill)."""
    if seed_pixel is None:
        seed_pixel = channel_seed_pixel(dem)
    below = (dem.values < stage) & dem.valid
    labels, _ = ndimage.label(below, structure=FOUR_CONNECTED)
    lab = labels[seed_pixel]
    wet = labels == lab if lab > 0 else np.zeros(dem.shape, dtype=bool)
    return binary_raster(wet, dem)


def route_linear_reservoir(precip: PrecipSeries, k_h: float, gain: float, base_stage: float,
                           s0=None, gauge_id=None) -> StageSeries:
    """Explicit linear reservoir: s' = gain * p - (s - base) / k.

    Missing precipitation counts as zero input.
    """
    if k_h <= 0:
        raise DataError("time constant must be positive")
    dt = precip.step_h
    p = np.nan_to_num(precip.values, nan=0.0)
    s = np.empty(len(p))
    cur = base_stage if s0 is None else s0
    for t in range(len(p)):
        s[t] = cur
        cur = cur + (gain * p[t] - (cur - base_stage) / k_h) * dt
    return StageSeries(gauge_id or precip.basin_id, precip.t0, dt, s)


def _peaks(values):
    v = np.asarray(values)
    inner = (v[1:-1] >= v[:-2]) & (v[1:-1] > v[2:])
    return np.flatnonzero(inner) + 1


def make_event_catalog(dem: Raster, stage: StageSeries, n_events: int, seed=0, flip_rate=0.0,
                       seed_pixel=None, gauge_id=None) -> EventCatalog:
    """Bathtub events at stages sampled from the series, biased to peaks.

    Peak times are drawn without replacement with probability growing with
    the squared stage excess; if there are too few peaks the remaining
    events come from arbitrary times. ``flip_rate`` flips each valid pixel
    label independently.
    """
    if n_events < 1:
        raise DataError("n_events must be >= 1")
    rng = np.random.default_rng(seed)
    vals = stage.values
    ok = ~np.isnan(vals)
    peaks = [i for i in _peaks(np.where(ok, vals, -np.inf)) if ok[i]]
    chosen = []
    if peaks:
        excess = vals[peaks] - np.nanmin(vals)
        w = excess**2 + 1e-12
        take = min(n_events, len(peaks))
        chosen = list(rng.choice(peaks, size=take, replace=False, p=w / w.sum()))
    if len(chosen) < n_events:
        rest = np.setdiff1d(np.flatnonzero(ok), chosen)
        chosen += list(rng.choice(rest, size=n_events - len(chosen), replace=False))
    chosen = sorted(int(i) for i in chosen)
    events = []
    for i in chosen:
        ext = flat_fill_extent(dem, float(vals[i]), seed_pixel)
        if flip_rate > 0:
            flips = (rng.random(dem.shape) < flip_rate) & dem.valid
            ext = binary_raster(ext.wet() ^ flips, dem)
        events.append(FloodEvent(float(vals[i]), ext, stage.t0 + i * stage.step))
    return EventCatalog(gauge_id or stage.gauge_id, events)


def storm_precip(n_hours, seed=0, storm_rate=1 / 60, mean_depth=4.0, mean_duration=8,
                 t0=None, basin_id="basin") -> PrecipSeries:
    """Hourly rain from Poisson storms with exponential depth and duration."""
    rng = np.random.default_rng(seed)
    p = np.zeros(n_hours)
    starts = np.flatnonzero(rng.random(n_hours) < storm_rate)
    for s in starts:
        dur = max(1, int(rng.exponential(mean_duration)))
        p[s : s + dur] += rng.exponential(mean_depth)
    t0 = t0 or datetime(2020, 1, 1, tzinfo=timezone.utc)
    return PrecipSeries(basin_id, t0, 1.0, p)


@dataclass
class Region:
    """Target gauges with routed upstream gauges and basin rainfall."""

    targets: dict  # gauge id -> StageSeries
    upstream: dict  # gauge id -> StageSeries
    precip: dict  # basin (= target gauge) id -> PrecipSeries
    upstream_ids: dict  # target id -> list of upstream ids


def _shift(x, lag):
    return np.concatenate([np.full(lag, x[0]), x[:-lag]]) if lag > 0 else x.copy()


def make_region(n_hours=24 * 365, seed=0, t0=None, layout=None, local_weight=0.1,
                forced=None) -> Region:
    """Linear-reservoir region.

    ``layout`` maps each target gauge to a list of (upstream gauge id,
    reservoir k_h, travel lag h, contribution). Every upstream gauge routes
    its own storm series; the target reservoir is fed by the lagged upstream
    excess stages plus ``local_weight`` times the local rain. ``forced``
    maps upstream ids to extra storms given as (start h, duration h,
    intensity mm/h), added on top of the random rain.
    """
    forced = forced or {}
    t0 = t0 or datetime(2020, 1, 1, tzinfo=timezone.utc)
    if layout is None:
        layout = {
            "G1": [("U1", 30.0, 30, 0.25), ("U2", 20.0, 24, 0.2)],
            "G2": [("U3", 25.0, 28, 0.3)],
        }
    rng = np.random.default_rng(seed)
    targets, upstream, precip, ups_ids = {}, {}, {}, {}
    for gid in sorted(layout):
        inflow = np.zeros(n_hours)
        ids = []
        for uid, k, lag, contrib in layout[gid]:
            pu = storm_precip(n_hours, int(rng.integers(1 << 31)), t0=t0, basin_id=uid)
            if uid in forced:
                p = pu.values.copy()
                for start, dur, rate in forced[uid]:
                    p[int(start) : int(start) + int(dur)] += rate
                pu = PrecipSeries(uid, t0, 1.0, p)
            su = route_linear_reservoir(pu, k, 0.05, 1.0 + 0.5 * len(upstream), gauge_id=uid)
            upstream[uid] = su
            inflow += contrib * _shift(su.values - su.values.min(), lag)
            ids.append(uid)
        local = storm_precip(n_hours, int(rng.integers(1 << 31)), t0=t0, basin_id=gid)
        drive = PrecipSeries(gid, t0, 1.0, local_weight * local.values + inflow)
        targets[gid] = route_linear_reservoir(drive, 36.0, 0.05, 2.0, gauge_id=gid)
        precip[gid] = local
        ups_ids[gid] = ids
    return Region(targets, upstream, precip, ups_ids)


# -- on-disk scenarios -------------------------------------------------------------------

SCENARIOS = ("flood", "calm")
SCENARIO_T0 = datetime(2020, 10, 1, tzinfo=timezone.utc)
FRAME_CELL_DEG = 0.1
FRAME_ORIGIN = (23.0, 90.0)  # (lat, lon) of the lower-left corner


def _basin_mask(n=6):
    w = np.ones((n, n))
    w[0, :2] = 0.0
    w[-1, -3:] = 0.5
    return w


def _frame_field(value, mask_w, k):
    """Spatially varying intensities whose mask-weighted mean is ``value``."""
    n = mask_w.shape[0]
    yy, xx = np.mgrid[0:n, 0:n]
    pattern = 1.0 + 0.5 * np.cos(0.7 * xx + 0.3 * yy + 0.9 * k)
    pattern /= (mask_w * pattern).sum() / mask_w.sum()
    return value * pattern


def _inject_stage_errors(values, rng, n_clean_tail):
    """Decimal slips, spikes and gaps, away from the most recent samples."""
    v = values.copy()
    span = len(v) - n_clean_tail
    idx = rng.choice(np.arange(48, span - 48), size=7, replace=False)
    v[idx[0]] /= 10.0
    v[idx[1]] *= 10.0
    v[idx[2]] += 4.0
    v[idx[3]] -= 4.0
    v[idx[4]] = np.nan
    v[idx[5] : idx[5] + 3] = np.nan
    return v


def write_scenario(out_dir, scenario="flood", seed=0, n_hours=24 * 150, n_events=12):
    """Write a complete raw data directory for the pipeline.

    The ``flood`` scenario forces a long upstream storm near the end of the
    record so the target gauges rise well above their historical range;
    ``calm`` omits it. Thresholds come from the pre-storm record and the
    recommended forecast time puts the flood peak 24 h ahead of it.
    Returns the scenario description that is also written to
    ``scenario.json``.
    """
    if scenario not in SCENARIOS:
        raise DataError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if n_hours < 24 * 30:
        raise DataError("a scenario needs at least 30 days of data")
    out = Path(out_dir)
    storm_start = n_hours - 150
    forced = None
    if scenario == "flood":
        forced = {u: [(storm_start, 18, 20.0)] for u in ("U1", "U2", "U3")}
    region = make_region(n_hours, seed=seed, t0=SCENARIO_T0, forced=forced)
    rng = np.random.default_rng(seed + 7919)

    g1 = region.targets["G1"].values
    if scenario == "flood":
        now = storm_start + int(np.argmax(g1[storm_start:])) - 24
    else:
        now = n_hours - 60
    now_ts = SCENARIO_T0 + timedelta(hours=now)

    gauges = []
    for gid in sorted(region.targets):
        pre = region.targets[gid].values[:storm_start]
        warning = round(float(np.quantile(pre, 0.99)), 2)
        danger = round(float(pre.max()) + 0.5, 2)
        gauges.append(GaugeConfig(gid, warning, danger, 48, tuple(region.upstream_ids[gid]), gid))
    write_gauge_config(out / "gauges.json", gauges)

    for gid, s in sorted({**region.targets, **region.upstream}.items()):
        write_stage_csv(out / "truth" / "stages" / f"{gid}.csv", s)
        raw = s.with_values(_inject_stage_errors(s.values, rng, n_hours - now + 24))
        write_stage_csv(out / "stages" / f"{gid}.csv", raw)

    mask_w = _basin_mask()
    frame_hours = range(now - 24, now)
    for gid, p in sorted(region.precip.items()):
        write_precip_csv(out / "truth" / "precip" / f"{gid}.csv", p)
        vals = p.values.copy()
        vals[list(frame_hours)] = np.nan  # these hours are delivered as radar frames
        write_precip_csv(out / "precip" / f"{gid}.csv", PrecipSeries(gid, p.t0, 1.0, vals))
        write_watershed_mask(out / "masks" / f"{gid}.asc", WatershedMask(FRAME_CELL_DEG, FRAME_ORIGIN, mask_w))
        for h in frame_hours:
            for half in range(2):
                ts = SCENARIO_T0 + timedelta(hours=h, minutes=30 * half)
                field = _frame_field(p.values[h], mask_w, 2 * h + half)
                write_precip_frame(out / "frames", gid, PrecipGridFrame(ts, FRAME_CELL_DEG, FRAME_ORIGIN, field))

    # inundation data for G1: valley DEM whose bank top sits at the median stage
    hist = region.targets["G1"].values[:now]
    dem = make_valley_dem(128, 128, channel_depth=2.0, bank_slope=0.05,
                          base=round(float(np.median(hist)), 2), seed=seed)
    write_ascii_grid(out / "dem" / "G1.asc", dem)
    hist_series = region.targets["G1"].with_values(hist)
    cat = make_event_catalog(dem, hist_series, n_events, seed=seed, gauge_id="G1")
    write_event_catalog(out / "catalogs" / "G1" / "catalog.json", cat)

    desc = {
        "schema_version": 1,
        "scenario": scenario,
        "seed": int(seed),
        "n_hours": int(n_hours),
        "t0": format_timestamp(SCENARIO_T0),
        "now": format_timestamp(now_ts),
        "storm_start": format_timestamp(SCENARIO_T0 + timedelta(hours=storm_start)) if forced else None,
        "truth_max_after_now_m": {gid: float(s.values[now + 1 : now + 49].max())
                                  for gid, s in sorted(region.targets.items())},
        "thresholds": {g.gauge_id: {"warning_stage_m": g.warning_stage_m,
                                    "danger_stage_m": g.danger_stage_m} for g in gauges},
    }
    atomic_write_json(out / "scenario.json", desc)
    return desc
