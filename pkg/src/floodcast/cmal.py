"""Countable mixture of asymmetric Laplacians (CMAL).

A component has weight w, location mu, scale b > 0 and asymmetry
tau in (0, 1), with density

    tau * (1 - tau) / b * exp(-rho_tau((y - mu) / b)),
    rho_tau(u) = u * (tau - 1[u < 0]).

All functions broadcast over leading axes; the component axis is last.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

SCALE_EPS = 1e-6


@dataclass(frozen=True)
class CmalParams:
    weights: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    asym: np.ndarray

    def __post_init__(self):
        for name in ("weights", "loc", "scale", "asym"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def n_components(self):
        return self.weights.shape[-1]

    def step(self, i) -> "CmalParams":
        """Distribution at lead step ``i`` (indexes the leading axis)."""
        return CmalParams(self.weights[i], self.loc[i], self.scale[i], self.asym[i])

    def rescale(self, mean: float, std: float) -> "CmalParams":
        """Map from standardized units back to meters."""
        return CmalParams(self.weights, self.loc * std + mean, self.scale * std, self.asym)

    def check(self, atol=1e-9) -> bool:
        return bool(
            np.allclose(self.weights.sum(-1), 1.0, atol=atol)
            and (self.weights >= 0).all()
            and (self.scale > 0).all()
            and ((self.asym > 0) & (self.asym < 1)).all()
        )


def split_raw(raw: np.ndarray, k: int):
    """Split head outputs of width 4k into (logits, loc, scale_raw, asym_raw)."""
    return raw[..., :k], raw[..., k : 2 * k], raw[..., 2 * k : 3 * k], raw[..., 3 * k : 4 * k]


def params_from_raw(raw: np.ndarray, k: int) -> CmalParams:
    logits, loc, s_raw, t_raw = split_raw(raw, k)
    return CmalParams(
        softmax(logits, axis=-1),
        loc,
        np.logaddexp(0.0, s_raw) + SCALE_EPS,
        expit(t_raw),
    )


def _check_loss(u, tau):
    return u * (tau - (u < 0))


def component_logpdf(y, p: CmalParams):
    y = np.asarray(y, dtype=float)[..., None]
    u = (y - p.loc) / p.scale
    return np.log(p.asym) + np.log1p(-p.asym) - np.log(p.scale) - _check_loss(u, p.asym)


def cmal_nll(p: CmalParams, y):
    """Negative log-likelihood of ``y``, via log-sum-exp."""
    with np.errstate(divide="ignore"):
        logw = np.log(p.weights)
    return -logsumexp(logw + component_logpdf(y, p), axis=-1)


def nll_and_grad_raw(raw: np.ndarray, y, k: int):
    """NLL and its gradient with respect to the raw head outputs.

    Works directly in terms of the unconstrained parameters so the log
    terms stay finite for extreme head outputs.
    """
    logits, loc, s_raw, t_raw = split_raw(raw, k)
    y = np.asarray(y, dtype=float)[..., None]
    scale = np.logaddexp(0.0, s_raw) + SCALE_EPS
    tau = expit(t_raw)
    logw = logits - logsumexp(logits, axis=-1, keepdims=True)
    u = (y - loc) / scale
    neg = u < 0
    rho = u * (tau - neg)
    comp = logw + log_expit(t_raw) + log_expit(-t_raw) - np.log(scale) - rho
    lse = logsumexp(comp, axis=-1, keepdims=True)
    nll = -lse[..., 0]
    resp = np.exp(comp - lse)
    w = np.exp(logw)

    d_logits = w - resp
    drho_du = tau - neg
    d_loc = -resp * drho_du / scale
    d_scale = -resp * (rho - 1.0) / scale
    d_sraw = d_scale * expit(s_raw)
    d_traw = -resp * (1.0 - 2.0 * tau - u * tau * (1.0 - tau))
    grad = np.concatenate([d_logits, d_loc, d_sraw, d_traw], axis=-1)
    return nll, grad


def cmal_cdf(p: CmalParams, x):
    x = np.asarray(x, dtype=float)[..., None]
    u = (x - p.loc) / p.scale
    tau = p.asym
    below = tau * np.exp(np.minimum((1 - tau) * u, 0.0))
    above = 1.0 - (1 - tau) * np.exp(-tau * np.maximum(u, 0.0))
    comp = np.where(u < 0, below, above)
    return (p.weights * comp).sum(-1)


def cmal_quantile(p: CmalParams, q, xtol=1e-6, max_iter=200):
    """Quantile by bisection of the mixture CDF.

    The bracket is [min mu - 50 max b, max mu + 50 max b], widened if it
    does not contain the target level. Bisection continues past ``xtol``
    until the CDF itself matches ``q`` to ~1e-12 or the bracket collapses.
    """
    if not 0 < q < 1:
        raise ValueError("quantile level must lie in (0, 1)")
    span = 50.0 * float(p.scale.max())
    lo = float(p.loc.min()) - span
    hi = float(p.loc.max()) + span
    while cmal_cdf(p, lo) > q:
        lo -= span
    while cmal_cdf(p, hi) < q:
        hi += span
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        f = cmal_cdf(p, mid)
        if hi - lo < xtol and abs(f - q) < 1e-12:
            return mid
        if f < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cmal_median(p: CmalParams):
    return cmal_quantile(p, 0.5)


def cmal_mean(p: CmalParams):
    tau = p.asym
    comp_mean = p.loc + p.scale * (1 - 2 * tau) / (tau * (1 - tau))
    return (p.weights * comp_mean).sum(-1)


def cmal_mode(p: CmalParams, n_grid=2001):
    """Mode of the mixture: densest of the component locations, refined on a grid."""
    locs = np.asarray(p.loc, dtype=float)
    dens = np.exp(-cmal_nll(p, locs))
    best = float(locs[np.argmax(dens)])
    width = float(p.scale.max()) * 2
    grid = np.linspace(best - width, best + width, n_grid)
    g_dens = np.exp(-cmal_nll(p, grid))
    cand = float(grid[np.argmax(g_dens)])
    return cand if g_dens.max() > dens.max() else best
