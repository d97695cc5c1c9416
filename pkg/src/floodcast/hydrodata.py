"""Ingestion, validation and correction of stage and precipitation data.

Missing samples are NaN in memory and an empty field (stage CSV) or
-9999 (ASCII grids) on disk; they are never silently zero.
"""

import csv
import io
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._io import atomic_write_text, dump_json
from .errors import ConfigError, DataError, GeometryMismatchError
from .grids import Raster, read_ascii_grid, write_ascii_grid

log = logging.getLogger(__name__)

DEFAULT_PRECIP_CAP_MM_H = 200.0
DEFAULT_MAX_GAP_H = 6.0
DEFAULT_DECIMAL_K = 6.0


def _utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    m = re.fullmatch(r"(\d{4})(\d{2})(\d{2})T(\d{2})(\d{2})(\d{2})?\+00:00", text)
    if m:
        y, mo, d, h, mi, s = m.groups()
        return datetime(int(y), int(mo), int(d), int(h), int(mi), int(s or 0), tzinfo=timezone.utc)
    return _utc(datetime.fromisoformat(text))


def format_timestamp(ts: datetime) -> str:
    return _utc(ts).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_timestamp_basic(ts: datetime) -> str:
    """ISO-8601 basic format, safe for filenames."""
    return _utc(ts).strftime("%Y%m%dT%H%M%SZ")


@dataclass(frozen=True)
class StageSeries:
    gauge_id: str
    t0: datetime
    step_h: float
    values: np.ndarray

    def __post_init__(self):
        if self.step_h <= 0:
            raise DataError("step must be positive")
        vals = np.array(self.values, dtype=float)
        if np.isinf(vals).any():
            raise DataError(f"{self.gauge_id}: stage values must be finite when present")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "t0", _utc(self.t0))

    def __len__(self):
        return len(self.values)

    @property
    def step(self) -> timedelta:
        return timedelta(hours=self.step_h)

    def times(self) -> list:
        return [self.t0 + i * self.step for i in range(len(self))]

    def index_of(self, ts: datetime) -> int:
        """Sample index of ``ts``; raises if it is off the time grid."""
        k = (_utc(ts) - self.t0) / self.step
        i = int(round(k))
        if abs(k - i) > 1e-9:
            raise DataError(f"{ts} is not on the time grid of {self.gauge_id}")
        return i

    def with_values(self, values) -> "StageSeries":
        return replace(self, values=np.asarray(values, dtype=float))

    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass(frozen=True)
class PrecipSeries:
    basin_id: str
    t0: datetime
    step_h: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if (vals[~np.isnan(vals)] < 0).any():
            raise DataError("precipitation depths must be non-negative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "t0", _utc(self.t0))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class PrecipGridFrame:
    timestamp: datetime
    cell_size_deg: float
    origin: tuple
    intensities: np.ndarray  # mm/h, NaN = missing

    def __post_init__(self):
        if self.cell_size_deg <= 0:
            raise DataError("cell size must be positive")
        arr = np.array(self.intensities, dtype=float)
        if arr.ndim != 2:
            raise DataError("precipitation frame must be 2-D")
        object.__setattr__(self, "intensities", arr)
        object.__setattr__(self, "timestamp", _utc(self.timestamp))


@dataclass(frozen=True)
class WatershedMask:
    cell_size_deg: float
    origin: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or (w < 0).any() or (w > 1).any():
            raise DataError("mask weights must be a 2-D array in [0, 1]")
        if not (w > 0).any():
            raise DataError("mask needs at least one positive weight")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class GaugeConfig:
    gauge_id: str
    warning_stage_m: float
    danger_stage_m: Optional[float] = None
    max_lead_time_h: int = 48
    upstream_ids: tuple = ()
    basin_id: Optional[str] = None
    max_lead_limit_h: int = 48

    def __post_init__(self):
        object.__setattr__(self, "upstream_ids", tuple(self.upstream_ids))
        if self.danger_stage_m is not None and not self.warning_stage_m < self.danger_stage_m:
            raise ConfigError(f"{self.gauge_id}: warning stage must be below danger stage")
        if not 1 <= int(self.max_lead_time_h) <= self.max_lead_limit_h:
            raise ConfigError(
                f"{self.gauge_id}: max_lead_time_h must lie in [1, {self.max_lead_limit_h}]"
            )

    @property
    def basin(self) -> str:
        return self.basin_id or self.gauge_id


class QcTag(NamedTuple):
    action: str  # kept | corrected | removed | interpolated | missing
    old: float = float("nan")
    new: float = float("nan")
    note: str = ""


@dataclass
class QcReport:
    gauge_id: str
    tags: list
    notes: list = field(default_factory=list)

    def counts(self) -> Counter:
        return Counter(t.action for t in self.tags)

    def merge(self, later: "QcReport") -> "QcReport":
        """Combine with a report from a later QC stage on the same samples.

        A later non-trivial action overrides an earlier one.
        """
        if len(later.tags) != len(self.tags):
            raise DataError("QC reports cover different sample counts")
        tags = [b if b.action not in ("kept", "missing") else a for a, b in zip(self.tags, later.tags)]
        return QcReport(self.gauge_id, tags, self.notes + later.notes)


def _initial_tags(values):
    return [QcTag("missing") if np.isnan(v) else QcTag("kept") for v in values]


# -- stage QC --------------------------------------------------------------


def _robust_band(window: np.ndarray, k: float):
    med = np.median(window)
    mad = np.median(np.abs(window - med))
    return med - k * mad, med + k * mad


def correct_decimal_errors(s: StageSeries, window_h: float = 24.0, k: float = DEFAULT_DECIMAL_K):
    """Fix readings off by a factor of ten (misplaced decimal point).

    Each positive sample is compared with a median/MAD band of its sliding
    window in log10 space, where a decimal slip is a shift of exactly one.
    An outlier is replaced by x*10 or x/10 when that candidate falls inside
    the band; otherwise it is left alone for the outlier stage to handle.
    """
    if window_h < 3 * s.step_h:
        raise ConfigError("window must span at least three samples")
    n_win = int(round(window_h / s.step_h))
    vals = s.values.copy()
    tags = _initial_tags(vals)
    if len(vals) < n_win:
        return s, QcReport(s.gauge_id, tags, ["too short"])

    present = ~np.isnan(vals) & (vals > 0)
    logs = np.full(len(vals), np.nan)
    logs[present] = np.log10(vals[present])
    out = vals.copy()
    n = len(vals)
    for i in np.flatnonzero(present):
        start = min(max(i - n_win // 2, 0), n - n_win)
        window = logs[start : start + n_win]
        window = window[~np.isnan(window)]
        if len(window) < 3:
            continue
        lo, hi = _robust_band(window, k)
        x = logs[i]
        if lo <= x <= hi:
            continue
        for cand_log, factor in ((x + 1.0, 10.0), (x - 1.0, 0.1)):
            if lo <= cand_log <= hi:
                new = vals[i] * 10.0 if factor > 1 else vals[i] / 10.0
                out[i] = new
                tags[i] = QcTag("corrected", vals[i], new)
                break
    return s.with_values(out), QcReport(s.gauge_id, tags)


@dataclass(frozen=True)
class StageStats:
    """Training-record statistics used to screen implausible readings."""

    min_stage: float
    max_stage: float
    max_jump: float  # largest |delta stage| per step

    @classmethod
    def from_series(cls, s: StageSeries) -> Optional["StageStats"]:
        v = s.values
        ok = ~np.isnan(v)
        if ok.sum() < 2:
            return None
        d = np.abs(np.diff(v))
        d = d[~np.isnan(d)]
        return cls(float(v[ok].min()), float(v[ok].max()), float(d.max()) if d.size else 0.0)

    @classmethod
    def trimmed(cls, s: StageSeries, range_q: float = 0.001, jump_q: float = 0.995) -> Optional["StageStats"]:
        """Statistics that tolerate a few bad readings in the record itself.

        The stage range spans the ``range_q`` and ``1 - range_q`` quantiles
        and the jump limit is the ``jump_q`` quantile of step changes, so
        isolated spikes do not widen the envelope they are screened against.
        """
        v = s.values
        ok = ~np.isnan(v)
        if ok.sum() < 2:
            return None
        d = np.abs(np.diff(v))
        d = d[~np.isnan(d)]
        lo, hi = np.quantile(v[ok], [range_q, 1.0 - range_q])
        return cls(float(lo), float(hi), float(np.quantile(d, jump_q)) if d.size else 0.0)


def detect_stage_outliers(
    s: StageSeries,
    hist: Optional[StageStats],
    margin_m: float = 1.0,
    jump_factor: float = 3.0,
):
    """Remove readings outside the historical envelope or jumping too fast.

    Jumps are measured against the last reading that survived screening,
    scaled by the number of steps elapsed since it.
    """
    vals = s.values.copy()
    tags = _initial_tags(vals)
    if hist is None:
        return s, QcReport(s.gauge_id, tags, ["warning: no historical statistics, screening skipped"])
    lo, hi = hist.min_stage - margin_m, hist.max_stage + margin_m
    max_step = jump_factor * hist.max_jump
    last_i = None
    for i, v in enumerate(vals):
        if np.isnan(v):
            continue
        bad = v < lo or v > hi
        if not bad and last_i is not None:
            bad = abs(v - vals[last_i]) > max_step * (i - last_i)
        if bad:
            tags[i] = QcTag("removed", v)
            vals[i] = np.nan
        else:
            last_i = i
    return s.with_values(vals), QcReport(s.gauge_id, tags)


def fill_gaps_linear(s: StageSeries, max_gap_h: float = DEFAULT_MAX_GAP_H):
    """Linearly interpolate interior runs of missing samples.

    Only runs of at most ``max_gap_h / step`` samples bounded by present
    values on both sides are filled.
    """
    if max_gap_h < s.step_h:
        raise ConfigError("max_gap_h must be at least one step")
    max_run = int(np.floor(max_gap_h / s.step_h + 1e-9))
    vals = s.values.copy()
    tags = _initial_tags(vals)
    miss = np.isnan(vals)
    i, n = 0, len(vals)
    while i < n:
        if not miss[i]:
            i += 1
            continue
        j = i
        while j < n and miss[j]:
            j += 1
        if i > 0 and j < n and j - i <= max_run:
            a, b = vals[i - 1], vals[j]
            for m in range(i, j):
                frac = (m - i + 1) / (j - i + 1)
                vals[m] = a + frac * (b - a)
                tags[m] = QcTag("interpolated", new=vals[m])
        i = j
    return s.with_values(vals), QcReport(s.gauge_id, tags)


def qc_stage(s: StageSeries, hist=None, window_h=24.0, k=DEFAULT_DECIMAL_K,
             margin_m=1.0, jump_factor=3.0, max_gap_h=DEFAULT_MAX_GAP_H):
    """Full stage pipeline: decimal fixes, outlier removal, gap filling."""
    s1, r1 = correct_decimal_errors(s, window_h, k)
    if hist is None:
        hist = StageStats.from_series(s1)
    s2, r2 = detect_stage_outliers(s1, hist, margin_m, jump_factor)
    s3, r3 = fill_gaps_linear(s2, max_gap_h)
    return s3, r1.merge(r2).merge(r3)


# -- precipitation -----------------------------------------------------------


def clamp_precip(f: PrecipGridFrame, cap_mm_h: float = DEFAULT_PRECIP_CAP_MM_H) -> PrecipGridFrame:
    if cap_mm_h <= 0:
        raise ConfigError("precipitation cap must be positive")
    x = f.intensities.copy()
    x[x < 0] = np.nan
    x = np.where(x > cap_mm_h, cap_mm_h, x)
    return replace(f, intensities=x)


def _frame_mean(frame: PrecipGridFrame, mask: WatershedMask) -> float:
    x = frame.intensities
    w = np.where(np.isnan(x), 0.0, mask.weights)
    total = w.sum()
    if total <= 0:
        return np.nan
    return float((w * np.nan_to_num(x)).sum() / total)


def basin_mean_precip(frames: Sequence[PrecipGridFrame], mask: WatershedMask,
                      basin_id: str = "basin") -> PrecipSeries:
    """Area-weighted basin precipitation, aggregated to hourly depth.

    Frames come in 30-minute pairs; an hour's depth is the mean of the
    available frame intensities times one hour.
    """
    frames = sorted(frames, key=lambda f: f.timestamp)
    if not frames:
        raise DataError("no precipitation frames")
    for f in frames:
        if f.intensities.shape != mask.weights.shape or not np.isclose(f.cell_size_deg, mask.cell_size_deg) \
                or not np.allclose(f.origin, mask.origin):
            raise GeometryMismatchError(f"frame {f.timestamp} does not match the watershed mask")
    half = timedelta(minutes=30)
    for a, b in zip(frames, frames[1:]):
        if b.timestamp - a.timestamp != half:
            raise DataError(f"frames are not on a 30-min grid near {a.timestamp}")
    if len(frames) % 2:
        log.warning("odd number of half-hour frames; trailing frame dropped")
        frames = frames[:-1]
    means = np.array([_frame_mean(f, mask) for f in frames])
    pairs = means.reshape(-1, 2)
    hourly = np.full(len(pairs), np.nan)
    has = ~np.isnan(pairs)
    anyv = has.any(axis=1)
    hourly[anyv] = np.nansum(pairs[anyv], axis=1) / has[anyv].sum(axis=1) * 1.0
    return PrecipSeries(basin_id, frames[0].timestamp, 1.0, hourly)


def ndwi(green, nir):
    """Normalized difference water index and wet classification.

    Returns ``(index, wet)``; where green + nir == 0 the index is NaN and
    the pixel is classified dry.
    """
    g = np.asarray(green, dtype=float)
    n = np.asarray(nir, dtype=float)
    den = g + n
    with np.errstate(invalid="ignore", divide="ignore"):
        idx = np.where(den != 0, (g - n) / np.where(den != 0, den, 1.0), np.nan)
    wet = np.nan_to_num(idx, nan=-1.0) > 0
    if idx.ndim == 0:
        return float(idx), bool(wet)
    return idx, wet


# -- file interfaces -----------------------------------------------------------


def write_stage_csv(path, s: StageSeries):
    buf = io.StringIO()
    buf.write("timestamp,stage_m\n")
    for ts, v in zip(s.times(), s.values):
        buf.write(f"{format_timestamp(ts)},{'' if np.isnan(v) else repr(float(v))}\n")
    return atomic_write_text(path, buf.getvalue())


def _read_series_csv(path, column):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["timestamp", column]:
        raise DataError(f"{path}: expected header 'timestamp,{column}'")
    rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no samples")
    times = [parse_timestamp(r[0]) for r in rows]
    vals = [float(r[1]) if len(r) > 1 and r[1].strip() else np.nan for r in rows]
    if len(times) > 1:
        step = times[1] - times[0]
        if step.total_seconds() <= 0 or any(b - a != step for a, b in zip(times, times[1:])):
            raise DataError(f"{path}: timestamps are not on a uniform grid")
        step_h = step.total_seconds() / 3600.0
    else:
        step_h = 1.0
    return times[0], step_h, np.array(vals)


def read_stage_csv(path, gauge_id=None) -> StageSeries:
    t0, step_h, vals = _read_series_csv(path, "stage_m")
    return StageSeries(gauge_id or Path(path).stem, t0, step_h, vals)


def write_precip_csv(path, p: PrecipSeries):
    buf = io.StringIO()
    buf.write("timestamp,precip_mm\n")
    for i, v in enumerate(p.values):
        ts = p.t0 + timedelta(hours=i * p.step_h)
        buf.write(f"{format_timestamp(ts)},{'' if np.isnan(v) else repr(float(v))}\n")
    return atomic_write_text(path, buf.getvalue())


def read_precip_csv(path, basin_id=None) -> PrecipSeries:
    t0, step_h, vals = _read_series_csv(path, "precip_mm")
    return PrecipSeries(basin_id or Path(path).stem, t0, step_h, vals)


def write_qc_report_csv(path, reports: Sequence[QcReport], times_by_gauge: dict):
    buf = io.StringIO()
    buf.write("gauge_id,timestamp,action,old,new\n")
    for rep in reports:
        for ts, tag in zip(times_by_gauge[rep.gauge_id], rep.tags):
            old = "" if np.isnan(tag.old) else repr(float(tag.old))
            new = "" if np.isnan(tag.new) else repr(float(tag.new))
            buf.write(f"{rep.gauge_id},{format_timestamp(ts)},{tag.action},{old},{new}\n")
    return atomic_write_text(path, buf.getvalue())


def frame_filename(basin_id: str, ts: datetime) -> str:
    return f"{basin_id}_{format_timestamp_basic(ts)}.asc"


def frame_to_raster(f: PrecipGridFrame) -> Raster:
    valid = ~np.isnan(f.intensities)
    return Raster(np.where(valid, f.intensities, 0.0), f.cell_size_deg, f.origin[1], f.origin[0], valid)


def read_precip_frame(path) -> PrecipGridFrame:
    r = read_ascii_grid(path)
    stamp = Path(path).stem.rsplit("_", 1)[1]
    vals = np.where(r.valid, r.values, np.nan)
    return PrecipGridFrame(parse_timestamp(stamp), r.cell_size, (r.yll, r.xll), vals)


def write_precip_frame(directory, basin_id, f: PrecipGridFrame):
    return write_ascii_grid(Path(directory) / frame_filename(basin_id, f.timestamp), frame_to_raster(f))


def read_precip_frames(directory, basin_id) -> list:
    paths = sorted(Path(directory).glob(f"{basin_id}_*.asc"))
    return [read_precip_frame(p) for p in paths]


def read_watershed_mask(path) -> WatershedMask:
    r = read_ascii_grid(path)
    return WatershedMask(r.cell_size, (r.yll, r.xll), np.where(r.valid, r.values, 0.0))


def write_watershed_mask(path, m: WatershedMask):
    return write_ascii_grid(path, Raster(m.weights, m.cell_size_deg, m.origin[1], m.origin[0]))


_GAUGE_FIELDS = {
    "gauge_id": str,
    "warning_stage_m": (int, float),
    "danger_stage_m": (int, float, type(None)),
    "max_lead_time_h": int,
    "upstream_ids": list,
    "basin_id": (str, type(None)),
}


def gauges_from_json(doc, max_lead_limit_h=48) -> list:
    if not isinstance(doc, dict) or not isinstance(doc.get("gauges"), list):
        raise ConfigError("gauge config must be an object with a 'gauges' list")
    out = []
    for g in doc["gauges"]:
        if not isinstance(g, dict):
            raise ConfigError("gauge entries must be objects")
        unknown = set(g) - set(_GAUGE_FIELDS)
        if unknown:
            raise ConfigError(f"unknown gauge fields: {sorted(unknown)}")
        for key in ("gauge_id", "warning_stage_m", "max_lead_time_h"):
            if key not in g:
                raise ConfigError(f"gauge entry missing '{key}'")
        for key, typ in _GAUGE_FIELDS.items():
            if key in g and not isinstance(g[key], typ) or isinstance(g.get(key), bool):
                raise ConfigError(f"gauge field '{key}' has the wrong type")
        out.append(GaugeConfig(max_lead_limit_h=max_lead_limit_h, **g))
    return out


def read_gauge_config(path, max_lead_limit_h=48) -> list:
    with open(path) as fh:
        return gauges_from_json(json.load(fh), max_lead_limit_h)


def gauges_to_json(gauges) -> dict:
    return {
        "schema_version": 1,
        "gauges": [
            {
                "gauge_id": g.gauge_id,
                "warning_stage_m": g.warning_stage_m,
                "danger_stage_m": g.danger_stage_m,
                "max_lead_time_h": int(g.max_lead_time_h),
                "upstream_ids": list(g.upstream_ids),
                "basin_id": g.basin_id,
            }
            for g in gauges
        ],
    }


def write_gauge_config(path, gauges):
    return atomic_write_text(path, dump_json(gauges_to_json(gauges)))
