"""Regional hindcast/forecast LSTM with CMAL output, in plain numpy.

The hindcast LSTM reads ``target_lookback`` steps of
(precipitation, target stage, 5 combined upstream features); its final
(c, h) pass through an affine "state handoff" into the forecast LSTM,
which advances one step per lead time with input (lead / L, 1). A shared
head maps every forecast hidden state to CMAL parameters.

The upstream combiner is the only gauge-specific part. At hindcast step
t it sees each upstream gauge at time t and at t - lag, where
lag = upstream_lookback - target_lookback, so the full upstream window
is covered. Gradients are exact backpropagation through time.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import cmal
from ._io import atomic_write_bytes
from .errors import ConfigError, DataError, DivergenceError, InsufficientDataError
from .hydrodata import PrecipSeries, StageSeries

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
N_COMBINED = 5
HIND_INPUTS = 2 + N_COMBINED
FORE_INPUTS = 2


@dataclass(frozen=True)
class LstmConfig:
    hidden_size: int = 128
    target_lookback_h: int = 168
    upstream_lookback_h: int = 240
    max_lead_h: int = 48
    n_components: int = 3
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 64
    clip_norm: float = 1.0
    n_steps: int = 2000
    eval_every: int = 100
    final_lr_fraction: float = 0.1
    initial_forget_bias: float = 3.0
    step_h: float = 1.0

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ConfigError("hidden_size must be >= 1")
        if self.upstream_lookback_h < self.target_lookback_h:
            raise ConfigError("upstream lookback must be at least the target lookback")
        if self.n_components < 1:
            raise ConfigError("n_components must be >= 1")
        if self.max_lead_h < 1:
            raise ConfigError("max_lead_h must be >= 1")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError("final_lr_fraction must lie in (0, 1]")

    @property
    def lookback(self) -> int:
        return int(round(self.target_lookback_h / self.step_h))

    @property
    def lag(self) -> int:
        return int(round((self.upstream_lookback_h - self.target_lookback_h) / self.step_h))

    @property
    def max_lead(self) -> int:
        return int(round(self.max_lead_h / self.step_h))


# -- parameters ----------------------------------------------------------------


def combiner_width(n_upstream: int, cfg: LstmConfig) -> int:
    return n_upstream * (2 if cfg.lag > 0 else 1)


def init_params(cfg: LstmConfig, upstream_counts: dict, rng=None) -> dict:
    """Fresh weights. ``upstream_counts`` maps gauge id -> number of upstreams."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    H, K = cfg.hidden_size, cfg.n_components

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    p = {}
    for gid in sorted(upstream_counts):
        m = combiner_width(upstream_counts[gid], cfg)
        if m:
            p[f"comb/{gid}/W"] = uniform((N_COMBINED, m), m)
            p[f"comb/{gid}/b"] = np.zeros(N_COMBINED)
    p["hind/W"] = uniform((4 * H, HIND_INPUTS + H), HIND_INPUTS + H)
    p["hind/b"] = np.zeros(4 * H)
    p["hind/b"][H : 2 * H] = cfg.initial_forget_bias
    p["hand/W"] = np.eye(2 * H)
    p["hand/b"] = np.zeros(2 * H)
    p["fore/W"] = uniform((4 * H, FORE_INPUTS + H), FORE_INPUTS + H)
    p["fore/b"] = np.zeros(4 * H)
    p["fore/b"][H : 2 * H] = cfg.initial_forget_bias
    p["head/W"] = uniform((4 * K, H), H)
    p["head/b"] = np.zeros(4 * K)
    return p


def combiner_params(params: dict, gauge_id: str):
    W = params.get(f"comb/{gauge_id}/W")
    b = params.get(f"comb/{gauge_id}/b")
    return W, b


# -- building blocks ---------------------------------------------------------------


def combine_upstream(W, b, upstream):
    """Affine map of one gauge's upstream stages to 5 features.

    ``upstream`` may carry leading batch/time axes. A gauge without
    upstream inputs (``W is None``) yields zeros.
    """
    upstream = np.asarray(upstream, dtype=float)
    if W is None:
        return np.zeros(upstream.shape[:-1] + (N_COMBINED,))
    if upstream.shape[-1] != W.shape[1]:
        raise DataError(f"expected {W.shape[1]} upstream inputs, got {upstream.shape[-1]}")
    return upstream @ W.T + b


def lstm_forward(W, b, xs, c, h):
    """Run an LSTM over ``xs`` of shape (B, T, D) from state (c, h).

    Returns hidden states (B, T, H), final (c, h) and a cache for
    :func:`lstm_backward`. Gate order is input, forget, candidate, output.
    """
    B, T, D = xs.shape
    H = h.shape[1]
    Wx, Wh = W[:, :D], W[:, D:]
    zx = xs @ Wx.T + b
    hs = np.empty((B, T, H))
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T + 1, B, H))
    hprev = np.empty((T, B, H))
    cs[0] = c
    for t in range(T):
        hprev[t] = h
        z = zx[:, t] + h @ Wh.T
        g = np.empty_like(z)
        g[:, : 2 * H] = expit(z[:, : 2 * H])
        g[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        g[:, 3 * H :] = expit(z[:, 3 * H :])
        c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 2 * H : 3 * H]
        h = g[:, 3 * H :] * np.tanh(c)
        gates[t], cs[t + 1], hs[:, t] = g, c, h
    return hs, c, h, (xs, gates, cs, hprev)


def lstm_backward(W, cache, dhs, dc_last, dh_last):
    """Gradients of an LSTM run; ``dhs`` (B, T, H) may be None."""
    xs, gates, cs, hprev = cache
    B, T, D = xs.shape
    H = cs.shape[2]
    Wx, Wh = W[:, :D], W[:, D:]
    dz_all = np.empty((T, B, 4 * H))
    dh, dc = dh_last.copy(), dc_last.copy()
    for t in reversed(range(T)):
        if dhs is not None:
            dh = dh + dhs[:, t]
        g = gates[t]
        i, f, gg, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        tc = np.tanh(cs[t + 1])
        dc = dc + dh * o * (1 - tc**2)
        dz = np.empty((B, 4 * H))
        dz[:, :H] = dc * gg * i * (1 - i)
        dz[:, H : 2 * H] = dc * cs[t] * f * (1 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1 - gg**2)
        dz[:, 3 * H :] = dh * tc * o * (1 - o)
        dz_all[t] = dz
        dc = dc * f
        dh = dz @ Wh
    dzb = dz_all.transpose(1, 0, 2)  # (B, T, 4H)
    dWx = np.einsum("btg,btd->gd", dzb, xs)
    dWh = np.einsum("tbg,tbh->gh", dz_all, hprev)
    db = dz_all.sum(axis=(0, 1))
    dxs = dzb @ Wx
    return np.hstack([dWx, dWh]), db, dxs, dc, dh


def run_hindcast(params: dict, inputs):
    """Final (c, h) of the hindcast LSTM over (T, 7) or (B, T, 7) inputs."""
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if not np.isfinite(x).all():
        raise DataError("hindcast inputs must be finite")
    H = params["hind/b"].shape[0] // 4
    zeros = np.zeros((x.shape[0], H))
    _, c, h, _ = lstm_forward(params["hind/W"], params["hind/b"], x, zeros, zeros)
    return (c[0], h[0]) if single else (c, h)


def handoff(params: dict, c, h):
    s = np.concatenate([c, h], axis=-1) @ params["hand/W"].T + params["hand/b"]
    H = s.shape[-1] // 2
    return s[..., :H], s[..., H:]


def forecast_inputs(L: int, batch: int) -> np.ndarray:
    lead = (np.arange(1, L + 1) / L)[None, :, None]
    x = np.concatenate([lead, np.ones((1, L, 1))], axis=2)
    return np.broadcast_to(x, (batch, L, FORE_INPUTS)).copy()


def run_forecast_raw(params, c0, h0, L):
    single = np.ndim(c0) == 1
    c0, h0 = np.atleast_2d(c0), np.atleast_2d(h0)
    xs = forecast_inputs(L, c0.shape[0])
    hs, _, _, _ = lstm_forward(params["fore/W"], params["fore/b"], xs, c0, h0)
    raw = hs @ params["head/W"].T + params["head/b"]
    return raw[0] if single else raw


def run_forecast(params: dict, c0, h0, L: int) -> cmal.CmalParams:
    """CMAL distribution per lead step (standardized units)."""
    k = params["head/b"].shape[0] // 4
    return cmal.params_from_raw(run_forecast_raw(params, c0, h0, L), k)


# -- loss and gradients --------------------------------------------------------------


@dataclass
class Batch:
    """Model-ready arrays for a set of windows.

    ``upstream`` holds one (B_g, T, m_g) array per gauge group, with the
    matching positions in the batch in ``groups``.
    """

    hind: np.ndarray  # (B, T, 2) precip, stage
    groups: list  # [(gauge_id, positions, upstream array)]
    target: np.ndarray  # (B, L)


def _combined(params, batch: Batch):
    B, T, _ = batch.hind.shape
    comb = np.zeros((B, T, N_COMBINED))
    for gid, pos, ups in batch.groups:
        W, b = combiner_params(params, gid)
        comb[pos] = combine_upstream(W, b, ups)
    return comb


def loss_and_grads(params: dict, batch: Batch, need_grad=True):
    """Mean per-step CMAL NLL over the forecast steps and its gradient."""
    B, L = batch.target.shape
    H = params["hind/b"].shape[0] // 4
    k = params["head/b"].shape[0] // 4
    xs = np.concatenate([batch.hind, _combined(params, batch)], axis=2)
    zeros = np.zeros((B, H))
    _, c, h, hind_cache = lstm_forward(params["hind/W"], params["hind/b"], xs, zeros, zeros)
    s = np.concatenate([c, h], axis=1)
    s0 = s @ params["hand/W"].T + params["hand/b"]
    c0, h0 = s0[:, :H], s0[:, H:]
    fx = forecast_inputs(L, B)
    hs, _, _, fore_cache = lstm_forward(params["fore/W"], params["fore/b"], fx, c0, h0)
    raw = hs @ params["head/W"].T + params["head/b"]
    nll, draw = cmal.nll_and_grad_raw(raw, batch.target, k)
    loss = float(nll.mean())
    if not need_grad:
        return loss, None

    draw = draw / (B * L)
    g = {}
    g["head/W"] = np.einsum("blk,blh->kh", draw, hs)
    g["head/b"] = draw.sum(axis=(0, 1))
    dhs = draw @ params["head/W"]
    g["fore/W"], g["fore/b"], _, dc0, dh0 = lstm_backward(
        params["fore/W"], fore_cache, dhs, np.zeros((B, H)), np.zeros((B, H)))
    ds0 = np.concatenate([dc0, dh0], axis=1)
    g["hand/W"] = ds0.T @ s
    g["hand/b"] = ds0.sum(axis=0)
    ds = ds0 @ params["hand/W"]
    g["hind/W"], g["hind/b"], dxs, _, _ = lstm_backward(
        params["hind/W"], hind_cache, None, ds[:, :H], ds[:, H:])
    dcomb = dxs[:, :, 2:]
    for name in params:
        if name.startswith("comb/"):
            g[name] = np.zeros_like(params[name])
    for gid, pos, ups in batch.groups:
        if f"comb/{gid}/W" not in params:
            continue
        d = dcomb[pos]
        g[f"comb/{gid}/W"] += np.einsum("btf,btm->fm", d, ups)
        g[f"comb/{gid}/b"] += d.sum(axis=(0, 1))
    return loss, g


# -- data preparation ----------------------------------------------------------------


def _forward_fill(x):
    """Carry the last present value forward; leading gaps stay NaN."""
    x = np.array(x, dtype=float)
    if x.size == 0:
        return x
    idx = np.where(~np.isnan(x), np.arange(len(x)), 0)
    np.maximum.accumulate(idx, out=idx)
    return x[idx]


def _align(values, t0, step_h, ref: StageSeries):
    offset = (t0 - ref.t0).total_seconds() / 3600.0 / step_h
    off = int(round(offset))
    if abs(offset - off) > 1e-9 or not np.isclose(step_h, ref.step_h):
        raise DataError("series are not on a common time grid")
    out = np.full(len(ref), np.nan)
    lo, hi = max(off, 0), min(off + len(values), len(ref))
    if lo < hi:
        out[lo:hi] = values[lo - off : hi - off]
    return out


@dataclass
class GaugeInputs:
    """Raw aligned inputs for one target gauge on the target's time grid."""

    gauge_id: str
    stage: StageSeries
    upstream: list = field(default_factory=list)  # list of StageSeries
    precip: Optional[PrecipSeries] = None

    def arrays(self):
        up = [_align(u.values, u.t0, u.step_h, self.stage) for u in self.upstream]
        if self.precip is not None:
            p = _align(self.precip.values, self.precip.t0, self.precip.step_h, self.stage)
        else:
            p = np.zeros(len(self.stage))
        return self.stage.values, up, p


@dataclass
class Normalizer:
    stage_mean: float
    stage_std: float
    precip_mean: float
    precip_std: float
    upstream: list  # [(mean, std)] per upstream gauge

    @classmethod
    def fit(cls, g: GaugeInputs, mask=None):
        s, ups, p = g.arrays()
        sel = slice(None) if mask is None else mask

        def stats(x):
            x = x[sel]
            x = x[~np.isnan(x)]
            if x.size == 0:
                raise InsufficientDataError(f"{g.gauge_id}: no data to normalize")
            sd = float(x.std())
            return float(x.mean()), sd if sd > 1e-8 else 1.0

        sm, ss = stats(s)
        pm, ps = stats(np.log1p(np.nan_to_num(p, nan=0.0)))
        return cls(sm, ss, pm, ps, [stats(u) for u in ups])

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(d["stage_mean"], d["stage_std"], d["precip_mean"], d["precip_std"],
                   [tuple(x) for x in d["upstream"]])


@dataclass
class PreparedGauge:
    gauge_id: str
    stage: np.ndarray  # standardized, NaN where missing
    precip: np.ndarray  # standardized log1p, forward-filled
    upstream: np.ndarray  # (m, N) standardized, forward-filled; current then lagged
    norm: Normalizer
    raw_stage: np.ndarray


def prepare_gauge(g: GaugeInputs, norm: Normalizer, cfg: LstmConfig) -> PreparedGauge:
    s, ups, p = g.arrays()
    stage = (s - norm.stage_mean) / norm.stage_std
    p = _forward_fill(p)
    p = np.where(np.isnan(p), 0.0, p)
    precip = (np.log1p(p) - norm.precip_mean) / norm.precip_std
    rows = []
    for u, (m, sd) in zip(ups, norm.upstream):
        rows.append((_forward_fill(u) - m) / sd)
    if cfg.lag > 0:
        lagged = [np.concatenate([np.full(cfg.lag, np.nan), r[: -cfg.lag]]) for r in rows]
        rows = rows + lagged
    upstream = np.vstack(rows) if rows else np.zeros((0, len(s)))
    return PreparedGauge(g.gauge_id, stage, precip, upstream, norm, s)


def valid_issue_indices(pg: PreparedGauge, cfg: LstmConfig, with_target=True) -> np.ndarray:
    """Issue times whose windows are complete (no missing target stage)."""
    T, L = cfg.lookback, cfg.max_lead
    N = len(pg.stage)
    t_hi = N - L if with_target else N
    ts = np.arange(T - 1, t_hi)
    if len(ts) == 0:
        return ts
    missing = np.isnan(pg.stage).astype(int)
    csum = np.concatenate([[0], np.cumsum(missing)])
    hind_bad = csum[ts + 1] - csum[ts + 1 - T]
    ok = hind_bad == 0
    if with_target:
        ok &= (csum[ts + 1 + L] - csum[ts + 1]) == 0
    if pg.upstream.shape[0]:
        up_missing = np.isnan(pg.upstream).any(axis=0).astype(int)
        ucs = np.concatenate([[0], np.cumsum(up_missing)])
        ok &= (ucs[ts + 1] - ucs[ts + 1 - T]) == 0
    return ts[ok]


@dataclass
class LstmDataset:
    gauges: list  # PreparedGauge
    windows: np.ndarray  # (n, 2) gauge index, issue index

    def __len__(self):
        return len(self.windows)

    def batch(self, rows, cfg: LstmConfig) -> Batch:
        w = self.windows[rows]
        T, L = cfg.lookback, cfg.max_lead
        hind = np.empty((len(w), T, 2))
        target = np.empty((len(w), L))
        groups = []
        hoff = np.arange(-T + 1, 1)
        loff = np.arange(1, L + 1)
        for gi in np.unique(w[:, 0]):
            pos = np.flatnonzero(w[:, 0] == gi)
            pg = self.gauges[gi]
            ts = w[pos, 1]
            hidx = ts[:, None] + hoff
            hind[pos, :, 0] = pg.precip[hidx]
            hind[pos, :, 1] = pg.stage[hidx]
            target[pos] = pg.stage[ts[:, None] + loff]
            groups.append((pg.gauge_id, pos, pg.upstream[:, hidx].transpose(1, 2, 0)))
        return Batch(hind, groups, target)


def make_dataset(prepared: Sequence[PreparedGauge], cfg: LstmConfig, masks=None) -> LstmDataset:
    """Windows over all gauges; ``masks`` optionally restricts issue times per gauge."""
    rows = []
    for gi, pg in enumerate(prepared):
        ts = valid_issue_indices(pg, cfg)
        if masks is not None and masks[gi] is not None:
            ts = ts[masks[gi][ts]]
        rows.append(np.column_stack([np.full(len(ts), gi), ts]))
    windows = np.vstack(rows).astype(int) if rows else np.zeros((0, 2), dtype=int)
    return LstmDataset(list(prepared), windows)


# -- training ----------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_gradients(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def dataset_loss(params, ds: LstmDataset, cfg: LstmConfig, chunk=256) -> float:
    total, n = 0.0, len(ds)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        loss, _ = loss_and_grads(params, ds.batch(rows, cfg), need_grad=False)
        total += loss * len(rows)
    return total / n


def dataset_medians(params, ds: LstmDataset, cfg: LstmConfig, lead: int, chunk=256) -> np.ndarray:
    """Median forecast in meters at step ``lead`` for every window of ``ds``."""
    if not 1 <= lead <= cfg.max_lead:
        raise ConfigError(f"lead must lie in [1, {cfg.max_lead}]")
    out = np.empty(len(ds))
    for start in range(0, len(ds), chunk):
        rows = np.arange(start, min(start + chunk, len(ds)))
        batch = ds.batch(rows, cfg)
        xs = np.concatenate([batch.hind, _combined(params, batch)], axis=2)
        c, h = run_hindcast(params, xs)
        c0, h0 = handoff(params, c, h)
        dist = run_forecast(params, c0, h0, lead)
        for j, r in enumerate(rows):
            norm = ds.gauges[ds.windows[r, 0]].norm
            p = cmal.CmalParams(dist.weights[j, lead - 1], dist.loc[j, lead - 1],
                                dist.scale[j, lead - 1], dist.asym[j, lead - 1])
            out[r] = cmal.cmal_median(p) * norm.stage_std + norm.stage_mean
    return out


@dataclass
class TrainResult:
    params: dict
    history: list  # (step, train batch loss)
    val_history: list  # (step, validation loss)
    initial_loss: float
    best_step: int
    learning_rate: float


def cosine_rate(lr, step, n_steps, final_fraction):
    """Learning rate at ``step`` (1-based), decaying from ``lr`` to ``final_fraction * lr``."""
    frac = (step - 1) / max(n_steps - 1, 1)
    return lr * (final_fraction + (1 - final_fraction) * 0.5 * (1 + np.cos(np.pi * frac)))


def _train_once(train: LstmDataset, cfg, val, lr, upstream_counts):
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, upstream_counts, rng)
    opt = Adam(params, lr)
    eval_set = val if val is not None and len(val) else train
    initial = dataset_loss(params, eval_set, cfg)
    best, best_loss, best_step = {k: v.copy() for k, v in params.items()}, initial, 0
    history, val_history = [], [(0, initial)]
    n = len(train)
    for step in range(1, cfg.n_steps + 1):
        rows = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss, grads = loss_and_grads(params, train.batch(np.sort(rows), cfg))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        clip_gradients(grads, cfg.clip_norm)
        opt.lr = cosine_rate(lr, step, cfg.n_steps, cfg.final_lr_fraction)
        opt.step(params, grads)
        history.append((step, loss))
        if step % cfg.eval_every == 0 or step == cfg.n_steps:
            vl = dataset_loss(params, eval_set, cfg)
            if not np.isfinite(vl):
                raise DivergenceError(f"non-finite validation loss at step {step}")
            val_history.append((step, vl))
            if vl < best_loss:
                best, best_loss, best_step = {k: v.copy() for k, v in params.items()}, vl, step
    return TrainResult(best, history, val_history, initial, best_step, lr)


def train_lstm(train: LstmDataset, cfg: LstmConfig, val: Optional[LstmDataset] = None,
               max_restarts: int = 3) -> TrainResult:
    """Adam on the mean CMAL NLL; returns the best weights by validation loss.

    The learning rate follows a cosine decay down to ``final_lr_fraction``
    of its initial value. With no validation set the training windows are used for model
    selection. A non-finite loss halves the learning rate and restarts,
    at most ``max_restarts`` times.
    """
    if len(train) == 0:
        raise InsufficientDataError("no complete training windows")
    counts = {pg.gauge_id: pg.upstream.shape[0] // (2 if cfg.lag > 0 else 1) for pg in train.gauges}
    lr = cfg.learning_rate
    for attempt in range(max_restarts + 1):
        try:
            return _train_once(train, cfg, val, lr, counts)
        except DivergenceError as exc:
            log.warning("training diverged (%s); halving learning rate", exc)
            lr /= 2
    raise DivergenceError(f"training diverged after {max_restarts} restarts")


# -- model object and artifact ------------------------------------------------------


@dataclass
class LstmModel:
    cfg: LstmConfig
    params: dict
    norms: dict  # gauge id -> Normalizer
    upstream_ids: dict  # gauge id -> list of upstream ids

    def forecast(self, inputs: GaugeInputs, issue_index: int, L: Optional[int] = None) -> cmal.CmalParams:
        """CMAL forecast in meters for leads 1..L issued at ``issue_index``."""
        L = self.cfg.max_lead if L is None else L
        if not 1 <= L <= self.cfg.max_lead:
            raise ConfigError(f"lead steps must lie in [1, {self.cfg.max_lead}]")
        norm = self.norms[inputs.gauge_id]
        pg = prepare_gauge(inputs, norm, self.cfg)
        T = self.cfg.lookback
        if issue_index - T + 1 < 0:
            raise InsufficientDataError("not enough history before the issue time")
        idx = np.arange(issue_index - T + 1, issue_index + 1)
        stage = pg.stage[idx]
        if np.isnan(stage).any():
            stage = _forward_fill(stage)
            if np.isnan(stage).any():
                raise InsufficientDataError("missing target stage in the hindcast window")
        ups = pg.upstream[:, idx].T
        if np.isnan(ups).any():
            raise InsufficientDataError("missing upstream stage in the hindcast window")
        W, b = combiner_params(self.params, inputs.gauge_id)
        comb = combine_upstream(W, b, ups)
        x = np.column_stack([pg.precip[idx], stage, comb])
        c, h = run_hindcast(self.params, x)
        c0, h0 = handoff(self.params, c, h)
        dist = run_forecast(self.params, c0, h0, L)
        return dist.rescale(norm.stage_mean, norm.stage_std)


def fit_normalizers(inputs: Sequence[GaugeInputs], masks=None) -> dict:
    return {g.gauge_id: Normalizer.fit(g, None if masks is None else masks[i]) for i, g in enumerate(inputs)}


def save_lstm(path, model: LstmModel):
    names = sorted(model.params)
    tensors, offset, blobs = [], 0, []
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "schema_version": SCHEMA_VERSION,
        "cfg": asdict(model.cfg),
        "norms": {k: v.to_json() for k, v in sorted(model.norms.items())},
        "upstream_ids": {k: list(v) for k, v in sorted(model.upstream_ids.items())},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return atomic_write_bytes(path, struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs))


def load_lstm(path) -> LstmModel:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DataError("unsupported LSTM artifact schema version")
    body = data[8 + n :]
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(float)
    cfg = LstmConfig(**header["cfg"])
    norms = {k: Normalizer.from_json(v) for k, v in header["norms"].items()}
    return LstmModel(cfg, params, norms, header["upstream_ids"])
