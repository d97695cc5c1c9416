"""Per-pixel stage-threshold inundation model.

Each pixel is wet when the gauge stage reaches its learned threshold.
Thresholds come from a greedy search that repeatedly takes the candidate
with the best true-wet / false-wet ratio among the events not yet covered,
stopping once the best ratio drops below ``minimal_ratio``. Stages above
the training range are handled by dilating the most severe extent.
"""

import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from ._io import atomic_write_json
from .errors import DataError, GeometryMismatchError
from .grids import Raster, binary_raster, decode_infinities, read_ascii_grid, write_ascii_grid
from .hydrodata import format_timestamp, parse_timestamp

DEFAULT_MINIMAL_RATIO = 1.0
DEFAULT_DILATION_SLOPE = 2.0  # pixels per meter of stage above the training maximum


class FloodEvent(NamedTuple):
    stage_m: float
    extent: Raster
    timestamp: Optional[datetime] = None


@dataclass
class EventCatalog:
    gauge_id: str
    events: list

    def __post_init__(self):
        if not self.events:
            raise DataError("event catalog is empty")
        ref = self.events[0].extent
        for e in self.events:
            if not np.isfinite(e.stage_m):
                raise DataError("event stages must be finite")
            if not e.extent.same_geometry(ref):
                raise GeometryMismatchError("event extents do not share geometry")

    @property
    def stages(self) -> np.ndarray:
        return np.array([e.stage_m for e in self.events], dtype=float)

    def wet_stack(self) -> np.ndarray:
        return np.stack([e.extent.wet() for e in self.events])

    @property
    def valid(self) -> np.ndarray:
        v = self.events[0].extent.valid.copy()
        for e in self.events[1:]:
            v &= e.extent.valid
        return v

    def subset(self, indices) -> "EventCatalog":
        return EventCatalog(self.gauge_id, [self.events[i] for i in indices])


@dataclass
class PixelThresholdMap:
    thresholds: Raster  # stage, +inf never wet, -inf always wet
    max_train_stage_m: float
    max_train_extent: Raster
    minimal_ratio: float
    dilation_slope: float = DEFAULT_DILATION_SLOPE

    def __post_init__(self):
        if self.minimal_ratio <= 0:
            raise DataError("minimal_ratio must be positive")


def _best_candidate(tp, fp):
    """Index of the best ratio; ties go to the lower stage, then larger TP.

    ``tp``/``fp`` are per-candidate counts ordered by ascending stage, so
    TP never grows along the list and a strict comparison suffices.
    Returns (index, ratio).
    """
    best, best_ratio = None, -1.0
    for j in range(len(tp)):
        ratio = np.inf if fp[j] == 0 else tp[j] / fp[j]
        if ratio > best_ratio:
            best, best_ratio = j, ratio
    return best, best_ratio


def learn_pixel_threshold(events, minimal_ratio=DEFAULT_MINIMAL_RATIO) -> float:
    """Threshold for one pixel from ``(stage, wet)`` pairs."""
    events = [(float(s), bool(w)) for s, w in events]
    if not events:
        raise DataError("at least one event is required")
    if all(w for _, w in events):
        return -np.inf
    accepted = np.inf
    remaining = events
    while remaining:
        cands = sorted({s for s, _ in remaining})
        tp = [sum(1 for s, w in remaining if s >= t and w) for t in cands]
        fp = [sum(1 for s, w in remaining if s >= t and not w) for t in cands]
        j, ratio = _best_candidate(tp, fp)
        if ratio < minimal_ratio:
            break
        accepted = cands[j]
        remaining = [(s, w) for s, w in remaining if s < accepted]
    return accepted


def learn_thresholds(stages, wet, minimal_ratio=DEFAULT_MINIMAL_RATIO) -> np.ndarray:
    """Vectorized :func:`learn_pixel_threshold` over pixels.

    ``wet`` has shape (n_events, n_pixels). Candidate stages are shared by
    all pixels, so per-stage wet/dry counts are accumulated once and every
    iteration is evaluated for all still-active pixels together.
    """
    stages = np.asarray(stages, dtype=float)
    wet = np.asarray(wet, dtype=bool)
    cands, inverse = np.unique(stages, return_inverse=True)
    m, P = len(cands), wet.shape[1]
    wet_at = np.zeros((m, P))
    dry_at = np.zeros((m, P))
    np.add.at(wet_at, inverse, wet)
    np.add.at(dry_at, inverse, ~wet)
    # suffix sums: counts over candidates j..m-1; row m is zero
    W = np.vstack([np.cumsum(wet_at[::-1], axis=0)[::-1], np.zeros((1, P))])
    D = np.vstack([np.cumsum(dry_at[::-1], axis=0)[::-1], np.zeros((1, P))])

    upper = np.full(P, m)  # events with candidate index >= upper are discarded
    result = np.full(P, np.inf)
    active = np.ones(P, dtype=bool)
    idx = np.arange(m)[:, None]
    while active.any():
        cols = np.flatnonzero(active)
        u = upper[cols]
        tp = W[:m, cols] - W[u, cols]
        fp = D[:m, cols] - D[u, cols]
        in_range = idx < u[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(fp == 0, np.inf, tp / np.where(fp == 0, 1, fp))
        ratio = np.where(in_range, ratio, -1.0)
        best_ratio = ratio.max(axis=0)
        # lowest index with the best ratio; among equal ratios TP grows as the
        # stage falls, so the lowest stage also has the largest TP
        best = np.argmax(ratio == best_ratio[None, :], axis=0)
        accept = (best_ratio >= minimal_ratio) & (u > 0)
        done = cols[~accept]
        active[done] = False
        acc_cols = cols[accept]
        result[acc_cols] = cands[best[accept]]
        upper[acc_cols] = best[accept]
        active[acc_cols[upper[acc_cols] == 0]] = False
    all_wet = wet.all(axis=0)
    result[all_wet] = -np.inf
    return result


def train_thresholding(cat: EventCatalog, minimal_ratio=DEFAULT_MINIMAL_RATIO,
                       dilation_slope=DEFAULT_DILATION_SLOPE) -> PixelThresholdMap:
    ref = cat.events[0].extent
    valid = cat.valid
    wet = cat.wet_stack()[:, valid]
    thr = np.full(ref.shape, np.inf)
    thr[valid] = learn_thresholds(cat.stages, wet, minimal_ratio)
    i_max = int(np.argmax(cat.stages))
    s_max = float(cat.stages[i_max])
    # keep the severe extent consistent with the model's own prediction at s_max,
    # so extents stay nested across the extrapolation boundary
    severe = cat.events[i_max].extent.wet() | ((thr <= s_max) & valid)
    return PixelThresholdMap(
        ref.like(thr, valid),
        s_max,
        binary_raster(severe, ref),
        float(minimal_ratio),
        float(dilation_slope),
    )


def dilate_extent(extent: Raster, radius_px: int) -> Raster:
    """Square-structuring-element dilation; NODATA cells never become wet."""
    if radius_px < 0:
        raise DataError("dilation radius must be non-negative")
    wet = extent.wet()
    if radius_px > 0:
        wet = ndimage.binary_dilation(wet, structure=np.ones((2 * radius_px + 1,) * 2, dtype=bool))
    return binary_raster(wet, extent)


def dilation_radius(m: PixelThresholdMap, stage: float) -> int:
    return int(np.round(m.dilation_slope * (stage - m.max_train_stage_m)))


def predict_extent(m: PixelThresholdMap, stage: float) -> Raster:
    if stage <= m.max_train_stage_m:
        wet = (m.thresholds.values <= stage) & m.thresholds.valid
        return binary_raster(wet, m.thresholds)
    return dilate_extent(m.max_train_extent, dilation_radius(m, stage))


# -- artifacts ----------------------------------------------------------------------


def save_threshold_model(directory, m: PixelThresholdMap):
    d = Path(directory)
    write_ascii_grid(d / "thresholds.asc", m.thresholds)
    write_ascii_grid(d / "max_extent.asc", m.max_train_extent)
    atomic_write_json(d / "threshold_model.json", {
        "schema_version": 1,
        "max_train_stage_m": m.max_train_stage_m,
        "minimal_ratio": m.minimal_ratio,
        "dilation_slope": m.dilation_slope,
        "thresholds_file": "thresholds.asc",
        "extent_file": "max_extent.asc",
    })
    return d


def load_threshold_model(directory) -> PixelThresholdMap:
    d = Path(directory)
    with open(d / "threshold_model.json") as fh:
        meta = json.load(fh)
    thr = read_ascii_grid(d / meta["thresholds_file"])
    thr = thr.like(decode_infinities(np.where(thr.valid, thr.values, np.inf)), thr.valid)
    ext = read_ascii_grid(d / meta["extent_file"])
    ext = ext.like(np.nan_to_num(ext.values).astype(np.uint8), ext.valid)
    return PixelThresholdMap(thr, float(meta["max_train_stage_m"]), ext,
                             float(meta["minimal_ratio"]), float(meta["dilation_slope"]))


def read_event_catalog(path, gauge_id=None) -> EventCatalog:
    """Load a catalog manifest: a JSON list of events, or an object with
    ``gauge_id`` and ``events``. Extent paths are relative to the manifest."""
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        gauge_id = gauge_id or doc.get("gauge_id")
        entries = doc.get("events", [])
    else:
        entries = doc
    if not isinstance(entries, list):
        raise DataError(f"{path}: events must be a list")
    events = []
    for e in entries:
        r = read_ascii_grid(path.parent / e["extent_path"])
        r = r.like(np.nan_to_num(r.values).astype(np.uint8), r.valid)
        ts = parse_timestamp(e["timestamp"]) if e.get("timestamp") else None
        events.append(FloodEvent(float(e["stage_m"]), r, ts))
    return EventCatalog(gauge_id or path.stem, events)


def write_event_catalog(path, cat: EventCatalog, extent_dir="extents"):
    path = Path(path)
    entries = []
    for i, e in enumerate(cat.events):
        rel = f"{extent_dir}/event_{i:03d}.asc"
        write_ascii_grid(path.parent / rel, e.extent)
        entries.append({
            "stage_m": float(e.stage_m),
            "extent_path": rel,
            "timestamp": format_timestamp(e.timestamp) if e.timestamp else None,
        })
    atomic_write_json(path, {"schema_version": 1, "gauge_id": cat.gauge_id, "events": entries})
    return path
