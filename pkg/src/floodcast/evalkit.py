"""Skill metrics, cross-validation splits and paired significance tests."""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from ._io import atomic_write_json, atomic_write_text
from .errors import DataError, GeometryMismatchError, InsufficientDataError
from .grids import Raster

log = logging.getLogger(__name__)

LEAVE_EXTREME_MARGIN_M = 0.30
EXACT_WILCOXON_MAX_N = 20


@dataclass(frozen=True)
class PairedSeries:
    observed: np.ndarray
    computed: np.ndarray
    persistence: Optional[np.ndarray] = None

    def __post_init__(self):
        arrays = [np.asarray(self.observed, float), np.asarray(self.computed, float)]
        if self.persistence is not None:
            arrays.append(np.asarray(self.persistence, float))
        n = len(arrays[0])
        if n < 2 or any(len(a) != n for a in arrays):
            raise DataError("paired series need equal lengths >= 2")
        if any(np.isnan(a).any() for a in arrays):
            raise DataError("paired series must not contain missing values")
        object.__setattr__(self, "observed", arrays[0])
        object.__setattr__(self, "computed", arrays[1])
        if self.persistence is not None:
            object.__setattr__(self, "persistence", arrays[2])


def nse(p: PairedSeries) -> float:
    obs = p.observed
    denom = float(np.sum((obs - obs.mean()) ** 2))
    if denom == 0:
        raise DataError("NSE undefined: observed series has zero variance")
    return 1.0 - float(np.sum((obs - p.computed) ** 2)) / denom


def persistent_nse(p: PairedSeries) -> float:
    if p.persistence is None:
        raise DataError("persistent NSE needs the persistence series")
    denom = float(np.sum((p.observed - p.persistence) ** 2))
    if denom == 0:
        raise DataError("persistent NSE undefined: persistence forecast is perfect")
    return 1.0 - float(np.sum((p.observed - p.computed) ** 2)) / denom


def rmse(p: PairedSeries) -> float:
    return math.sqrt(float(np.mean((p.observed - p.computed) ** 2)))


class ExtentScores(NamedTuple):
    precision: float
    recall: float
    f1: float
    undefined: bool  # some ratio had a zero denominator and was set to 0
    tp: int
    fp: int
    fn: int


def extent_scores(pred: Raster, truth: Raster) -> ExtentScores:
    """Precision, recall and F1 with wet pixels as positives.

    Pixels that are NODATA in either raster are excluded. A ratio with a
    zero denominator is reported as 0 and flagged.
    """
    if pred.shape != truth.shape:
        raise GeometryMismatchError("prediction and truth rasters differ in shape")
    valid = pred.valid & truth.valid
    pw, tw = pred.wet()[valid], truth.wet()[valid]
    tp = int(np.sum(pw & tw))
    fp = int(np.sum(pw & ~tw))
    fn = int(np.sum(~pw & tw))
    undefined = False
    if tp + fp == 0:
        precision, undefined = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, undefined = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1, undefined = 0.0, True
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ExtentScores(precision, recall, f1, undefined, tp, fp, fn)


# -- folds ---------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    scheme: str  # "leave-one-year" | "leave-extreme-out"
    margin_m: float = LEAVE_EXTREME_MARGIN_M
    year_start_month: int = 1  # >1 switches to hydrological years

    def __post_init__(self):
        if self.scheme not in ("leave-one-year", "leave-extreme-out"):
            raise DataError(f"unknown fold scheme {self.scheme!r}")
        if self.margin_m < 0:
            raise DataError("margin must be non-negative")
        if not 1 <= self.year_start_month <= 12:
            raise DataError("year_start_month must be a month number")


class Fold(NamedTuple):
    name: str
    train: np.ndarray  # indices
    validation: np.ndarray


def fold_year(ts, start_month=1) -> int:
    """Calendar year, or the hydrological year beginning in ``start_month``."""
    return ts.year if ts.month >= start_month or start_month == 1 else ts.year - 1


def split_folds(timestamps=None, stages=None, spec: FoldSpec = FoldSpec("leave-one-year")) -> list:
    """Train/validation index splits.

    Leave-one-year needs ``timestamps`` and yields one fold per year.
    Leave-extreme-out needs ``stages``: the validation set is the single
    highest-stage item; training keeps items at least ``margin_m`` below it.
    Folds with an empty side are dropped with a warning.
    """
    folds = []
    if spec.scheme == "leave-one-year":
        if timestamps is None:
            raise DataError("leave-one-year folds need timestamps")
        years = np.array([fold_year(t, spec.year_start_month) for t in timestamps])
        for y in sorted(set(years.tolist())):
            folds.append(Fold(str(y), np.flatnonzero(years != y), np.flatnonzero(years == y)))
    else:
        if stages is None:
            raise DataError("leave-extreme-out folds need stages")
        s = np.asarray(stages, dtype=float)
        if s.size == 0:
            return []
        top = int(np.argmax(s))
        # tolerance keeps exact decimal margins (6.0 - 5.7) on the training side
        train = np.flatnonzero(s[top] - s >= spec.margin_m - 1e-9)
        folds.append(Fold("extreme", train, np.array([top])))
    kept = []
    for f in folds:
        if len(f.train) == 0 or len(f.validation) == 0:
            log.warning("fold %s dropped: empty %s set", f.name,
                        "training" if len(f.train) == 0 else "validation")
            continue
        kept.append(f)
    return kept


# -- Wilcoxon signed-rank -------------------------------------------------------------


class WilcoxonResult(NamedTuple):
    statistic: float  # min(W+, W-)
    pvalue: float  # two-sided
    n: int
    method: str  # "exact" | "normal"


def _exact_null_counts(doubled_ranks):
    """Number of sign patterns giving each doubled positive-rank sum."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return counts


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test for paired samples.

    Zero differences are discarded and tied |differences| get averaged
    ranks. For n <= 20 the p-value comes from the exact permutation
    distribution of the (possibly tied) ranks; above that a normal
    approximation with tie-corrected variance is used.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n < 6:
        raise InsufficientDataError("insufficient pairs")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _exact_null_counts(doubled)
        probs = counts / float(2**n)
        t = int(round(2 * w_plus))
        lower = probs[: t + 1].sum()
        upper = probs[t:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
        return WilcoxonResult(stat, float(p), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(stat, min(1.0, p), n, "normal")


# -- reports ---------------------------------------------------------------------------


class MetricRow(NamedTuple):
    gauge_id: str
    model: str
    scheme: str
    fold: str
    metric: str
    value: float


def write_report_csv(path, rows: Sequence[MetricRow]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricRow._fields)
    for r in rows:
        w.writerow([r.gauge_id, r.model, r.scheme, r.fold, r.metric, repr(float(r.value))])
    return atomic_write_text(path, buf.getvalue())


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [MetricRow(r["gauge_id"], r["model"], r["scheme"], r["fold"], r["metric"],
                          float(r["value"])) for r in rd]


def summarize(rows: Sequence[MetricRow]) -> dict:
    """Mean per gauge across folds, then median and range across gauges."""
    per_gauge = {}
    for r in rows:
        per_gauge.setdefault((r.model, r.scheme, r.metric), {}).setdefault(r.gauge_id, []).append(r.value)
    out = {}
    for (model, scheme, metric), gauges in sorted(per_gauge.items()):
        means = {g: float(np.mean(v)) for g, v in sorted(gauges.items())}
        vals = np.array(list(means.values()))
        out.setdefault(model, {}).setdefault(scheme, {})[metric] = {
            "median": float(np.median(vals)),
            "min": float(vals.min()),
            "max": float(vals.max()),
            "n_gauges": len(vals),
            "per_gauge_mean": means,
        }
    return out


def write_summary_json(path, rows: Sequence[MetricRow], extra=None):
    doc = {"schema_version": 1, "summary": summarize(rows)}
    if extra:
        doc.update(extra)
    return atomic_write_json(path, doc)
