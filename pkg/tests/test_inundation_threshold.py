import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodcast.errors import DataError, GeometryMismatchError
from floodcast.grids import Raster
from floodcast.inundation_threshold import (
    EventCatalog,
    FloodEvent,
    dilate_extent,
    dilation_radius,
    learn_pixel_threshold,
    learn_thresholds,
    load_threshold_model,
    predict_extent,
    read_event_catalog,
    save_threshold_model,
    train_thresholding,
    write_event_catalog,
)

from conftest import BATHTUB_TRAIN_STAGES


def exhaustive_threshold(events, minimal_ratio):
    """The greedy rule written out with explicit loops over every candidate."""
    if all(w for _, w in events):
        return -np.inf
    remaining, accepted = list(events), np.inf
    while remaining:
        best_t, best_r, best_tp = None, -1.0, -1
        for t in sorted({s for s, _ in remaining}):
            tp = sum(1 for s, w in remaining if s >= t and w)
            fp = sum(1 for s, w in remaining if s >= t and not w)
            r = np.inf if fp == 0 else tp / fp
            if r > best_r or (r == best_r and tp > best_tp):
                best_t, best_r, best_tp = t, r, tp
        if best_r < minimal_ratio:
            break
        accepted = best_t
        remaining = [(s, w) for s, w in remaining if s < accepted]
    return accepted


def test_example_dry_then_wet():
    assert learn_pixel_threshold([(1, False), (2, True), (3, True)], 1.0) == 2


def test_example_second_iteration_rejected():
    assert learn_pixel_threshold([(1, True), (2, False), (3, True)], 3.0) == 3


def test_always_dry_and_always_wet():
    assert learn_pixel_threshold([(1, False), (2, False)]) == np.inf
    assert learn_pixel_threshold([(1, True), (5, True)]) == -np.inf


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=1, max_size=8),
    st.sampled_from([0.5, 1.0, 2.0, 3.0, 5.0]),
)
def test_scalar_learner_matches_exhaustive_rule(events, ratio):
    assert learn_pixel_threshold(events, ratio) == exhaustive_threshold(events, ratio)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 1.0, 2.0, 5.0]))
def test_vectorized_learner_matches_scalar(seed, ratio):
    rng = np.random.default_rng(seed)
    n_ev, n_px = int(rng.integers(1, 10)), int(rng.integers(1, 12))
    stages = rng.integers(0, 5, n_ev).astype(float)
    wet = rng.random((n_ev, n_px)) < rng.random()
    got = learn_thresholds(stages, wet, ratio)
    want = [learn_pixel_threshold(list(zip(stages, wet[:, p])), ratio) for p in range(n_px)]
    np.testing.assert_array_equal(got, want)


def test_bathtub_thresholds_match_dem(valley_dem, bathtub_catalog):
    m = train_thresholding(bathtub_catalog)
    gap = float(np.diff(BATHTUB_TRAIN_STAGES).max())
    thr = m.thresholds.values
    wet_ever = np.isfinite(thr)
    assert wet_ever.any()
    # a pixel first wet at stage s has its DEM height in [previous stage, s)
    err = thr[wet_ever] - valley_dem.values[wet_ever]
    assert (err > 0).all() and (err <= gap + 1e-9).all()


def test_single_dry_event_gives_infinite_thresholds():
    r = Raster(np.zeros((3, 3), dtype=np.uint8))
    m = train_thresholding(EventCatalog("G", [FloodEvent(2.0, r)]))
    assert np.isinf(m.thresholds.values).all() and (m.thresholds.values > 0).all()


def test_empty_catalog_rejected():
    with pytest.raises(DataError):
        EventCatalog("G", [])


def test_mismatched_extents_rejected():
    a = Raster(np.zeros((3, 3), dtype=np.uint8))
    b = Raster(np.zeros((3, 4), dtype=np.uint8))
    with pytest.raises(GeometryMismatchError):
        EventCatalog("G", [FloodEvent(1.0, a), FloodEvent(2.0, b)])


def test_predict_at_and_below_training_range(bathtub_catalog):
    m = train_thresholding(bathtub_catalog)
    top = m.max_train_stage_m
    ext = predict_extent(m, top)
    np.testing.assert_array_equal(ext.wet(), (m.thresholds.values <= top) & m.thresholds.valid)
    # below every finite threshold only the always-wet (-inf) pixels remain
    low = predict_extent(m, 90.0).wet()
    np.testing.assert_array_equal(low, np.isneginf(m.thresholds.values))
    dry = Raster(np.zeros((2, 2), dtype=np.uint8))
    m2 = train_thresholding(EventCatalog("G", [FloodEvent(2.0, dry), FloodEvent(3.0, dry.like(np.ones((2, 2))))]))
    assert not predict_extent(m2, 1.0).wet().any()
    assert predict_extent(m2, 3.0).wet().all()


def test_extrapolation_dilates_severe_extent(bathtub_catalog):
    m = train_thresholding(bathtub_catalog)
    delta = 1.3
    stage = m.max_train_stage_m + 2 * delta
    radius = dilation_radius(m, stage)
    assert radius == round(2 * delta * m.dilation_slope)
    ext = predict_extent(m, stage).wet()
    base = m.max_train_extent.wet()
    assert (ext | base).sum() == ext.sum()
    np.testing.assert_array_equal(ext, dilate_extent(m.max_train_extent, radius).wet())


def test_dilation_radius_zero_and_one():
    wet = np.zeros((5, 5), dtype=np.uint8)
    wet[2, 2] = 1
    r = Raster(wet)
    np.testing.assert_array_equal(dilate_extent(r, 0).values, wet)
    out = dilate_extent(r, 1).wet()
    expect = np.zeros((5, 5), dtype=bool)
    expect[1:4, 1:4] = True
    np.testing.assert_array_equal(out, expect)


def test_dilation_never_wets_nodata():
    valid = np.ones((3, 3), dtype=bool)
    valid[0, 0] = False
    wet = np.zeros((3, 3), dtype=np.uint8)
    wet[1, 1] = 1
    out = dilate_extent(Raster(wet, valid=valid), 1)
    assert not out.wet()[0, 0]


def test_model_and_catalog_round_trip(tmp_path, bathtub_catalog):
    m = train_thresholding(bathtub_catalog)
    save_threshold_model(tmp_path / "m", m)
    back = load_threshold_model(tmp_path / "m")
    np.testing.assert_array_equal(back.thresholds.values, m.thresholds.values)
    assert back.max_train_stage_m == m.max_train_stage_m
    for s in (100.5, 101.7, 104.0):
        np.testing.assert_array_equal(predict_extent(back, s).wet(), predict_extent(m, s).wet())
    write_event_catalog(tmp_path / "cat" / "catalog.json", bathtub_catalog)
    cat = read_event_catalog(tmp_path / "cat" / "catalog.json")
    np.testing.assert_array_equal(cat.stages, bathtub_catalog.stages)
    np.testing.assert_array_equal(cat.wet_stack(), bathtub_catalog.wet_stack())
