"""Per-gauge, per-lead-time ridge regression on past stages."""

import json
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._io import atomic_write_json
from .errors import ConfigError, DataError, InsufficientDataError, SingularSystemError
from .hydrodata import PrecipSeries, StageSeries

SCHEMA_VERSION = 1
DEFAULT_LOOKBACK_H = 72
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


class DesignRow(NamedTuple):
    features: np.ndarray
    target: float
    t_index: int  # index of the issue time in the target series


@dataclass(frozen=True)
class LinearStageModel:
    gauge_id: str
    lead_h: int
    lookback_h: int
    feature_ids: tuple
    weights: np.ndarray
    intercept: float
    l2_lambda: float
    step_h: float = 1.0

    @property
    def lookback_steps(self) -> int:
        return int(round(self.lookback_h / self.step_h))

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "gauge_id": self.gauge_id,
            "lead_h": self.lead_h,
            "lookback_h": self.lookback_h,
            "step_h": self.step_h,
            "feature_ids": list(self.feature_ids),
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "l2_lambda": float(self.l2_lambda),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LinearStageModel":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError("unsupported linear model schema version")
        return cls(
            doc["gauge_id"],
            int(doc["lead_h"]),
            int(doc["lookback_h"]),
            tuple(doc["feature_ids"]),
            np.array(doc["weights"], dtype=float),
            float(doc["intercept"]),
            float(doc["l2_lambda"]),
            float(doc.get("step_h", 1.0)),
        )


def save_linear_model(path, model: LinearStageModel):
    return atomic_write_json(path, model.to_json())


def load_linear_model(path) -> LinearStageModel:
    with open(path) as fh:
        return LinearStageModel.from_json(json.load(fh))


def _aligned_values(series: StageSeries, ref: StageSeries) -> np.ndarray:
    """Values of ``series`` resampled onto the index grid of ``ref``."""
    if not np.isclose(series.step_h, ref.step_h):
        raise DataError("all series must share the same step")
    offset = ref.index_of(series.t0)
    out = np.full(len(ref), np.nan)
    lo, hi = max(offset, 0), min(offset + len(series), len(ref))
    if lo < hi:
        out[lo:hi] = series.values[lo - offset : hi - offset]
    return out


def feature_matrix(stacked: np.ndarray, t_indices, lookback: int) -> np.ndarray:
    """Lagged features, gauge-major and oldest-first, for each issue time."""
    t_indices = np.asarray(t_indices)
    lags = np.arange(-lookback + 1, 1)
    idx = t_indices[:, None] + lags[None, :]
    return stacked[:, idx].transpose(1, 0, 2).reshape(len(t_indices), -1)


def build_design_matrix(
    target: StageSeries,
    upstreams: Sequence[StageSeries] = (),
    lookback_h: float = DEFAULT_LOOKBACK_H,
    lead_h: float = 1,
    precip: Optional[PrecipSeries] = None,
) -> list:
    """Rows of (past stages, stage at t + lead) with every entry present."""
    lookback = int(round(lookback_h / target.step_h))
    lead = int(round(lead_h / target.step_h))
    if lookback < 1 or lead < 1:
        raise ConfigError("lookback and lead must be at least one step")
    stacked = [target.values] + [_aligned_values(u, target) for u in upstreams]
    if precip is not None:
        stacked.append(_aligned_values(
            StageSeries(precip.basin_id, precip.t0, precip.step_h, precip.values), target))
    stacked = np.vstack(stacked)
    n = len(target)
    ts = np.arange(lookback - 1, n - lead)
    if len(ts) == 0:
        raise InsufficientDataError("insufficient data")
    X = feature_matrix(stacked, ts, lookback)
    y = target.values[ts + lead]
    ok = ~np.isnan(X).any(axis=1) & ~np.isnan(y)
    if not ok.any():
        raise InsufficientDataError("insufficient data")
    return [DesignRow(X[i], float(y[i]), int(ts[i])) for i in np.flatnonzero(ok)]


def _ridge_solve(X, y, l2_lambda):
    n, p = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    penalty = np.full(p + 1, float(l2_lambda))
    penalty[-1] = 0.0  # intercept is not penalized
    G = A.T @ A + np.diag(penalty)
    rhs = A.T @ y
    if l2_lambda == 0:
        if np.linalg.matrix_rank(G) < p + 1:
            raise SingularSystemError("singular; increase lambda")
    try:
        beta = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("singular; increase lambda") from exc
    if not np.isfinite(beta).all():
        raise SingularSystemError("singular; increase lambda")
    return beta[:-1], float(beta[-1])


def train_linear(rows, l2_lambda: float, gauge_id="gauge", lead_h=1, lookback_h=None,
                 feature_ids=(), step_h=1.0) -> LinearStageModel:
    """Closed-form ridge fit minimizing sum (y - yhat)^2 + lambda * sum w^2."""
    if l2_lambda < 0:
        raise ConfigError("l2_lambda must be non-negative")
    if len(rows) < 1:
        raise InsufficientDataError("at least one training row is required")
    X = np.vstack([r.features for r in rows])
    y = np.array([r.target for r in rows])
    w, b = _ridge_solve(X, y, l2_lambda)
    if lookback_h is None:
        lookback_h = X.shape[1] // max(len(feature_ids), 1)
    return LinearStageModel(gauge_id, int(lead_h), int(lookback_h), tuple(feature_ids), w, b,
                            float(l2_lambda), float(step_h))


def predict_linear(model: LinearStageModel, features) -> float:
    x = np.asarray(features, dtype=float)
    if x.shape != model.weights.shape:
        raise DataError(f"expected {model.weights.size} features, got {x.size}")
    if np.isnan(x).any():
        raise DataError("missing feature value; run QC first")
    return float(x @ model.weights + model.intercept)


def predict_rows(model: LinearStageModel, rows) -> np.ndarray:
    X = np.vstack([r.features for r in rows])
    return X @ model.weights + model.intercept


def select_lambda(train_rows, val_rows, grid=LAMBDA_GRID) -> float:
    """Grid value with the lowest validation MSE (first one wins ties)."""
    y = np.array([r.target for r in val_rows])
    best, best_mse = None, np.inf
    for lam in grid:
        m = train_linear(train_rows, lam)
        mse = float(np.mean((predict_rows(m, val_rows) - y) ** 2))
        if mse < best_mse:
            best, best_mse = lam, mse
    return best


def latest_features(target: StageSeries, upstreams, lookback_h, now_index: int, precip=None):
    """Feature vector for issuing a forecast at sample ``now_index``."""
    lookback = int(round(lookback_h / target.step_h))
    if now_index - lookback + 1 < 0 or now_index >= len(target):
        raise InsufficientDataError("not enough history before the issue time")
    stacked = [target.values] + [_aligned_values(u, target) for u in upstreams]
    if precip is not None:
        stacked.append(_aligned_values(
            StageSeries(precip.basin_id, precip.t0, precip.step_h, precip.values), target))
    return feature_matrix(np.vstack(stacked), [now_index], lookback)[0]
