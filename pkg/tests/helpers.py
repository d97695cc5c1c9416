"""Shared builders for the LSTM tests and the acceptance suite."""

import numpy as np

from floodcast import evalkit
from floodcast import stagecast_lstm as L
from floodcast.synthdata import make_region

# parameter groups of the network, keyed by the component they belong to
COMPONENTS = {
    "combiner": ("comb/",),
    "hindcast": ("hind/",),
    "handoff": ("hand/",),
    "forecast": ("fore/",),
    "head": ("head/",),
}


def toy_problem(seed=0):
    """3-step hindcast / 3-step forecast toy with one gauge with and one without upstreams."""
    cfg = L.LstmConfig(hidden_size=3, target_lookback_h=3, upstream_lookback_h=4, max_lead_h=3,
                       n_components=2, seed=seed)
    rng = np.random.default_rng(seed)
    params = L.init_params(cfg, {"a": 2, "b": 0}, rng)
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    B = 4
    batch = L.Batch(
        rng.normal(size=(B, 3, 2)),
        [("a", np.array([0, 2]), rng.normal(size=(2, 3, 4))), ("b", np.array([1, 3]), np.zeros((2, 3, 0)))],
        rng.normal(size=(B, 3)),
    )
    return params, batch


def max_gradient_error(params, batch, prefixes, eps=1e-6):
    """Largest relative error of the analytic gradient against central differences.

    The error is measured per parameter tensor as
    max |numeric - analytic| / max(max |numeric|, 1e-8).
    """
    _, grads = L.loss_and_grads(params, batch)
    worst = 0.0
    for name in sorted(params):
        if not name.startswith(prefixes):
            continue
        p = params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            lp, _ = L.loss_and_grads(params, batch, need_grad=False)
            p[idx] = old - eps
            lm, _ = L.loss_and_grads(params, batch, need_grad=False)
            p[idx] = old
            num[idx] = (lp - lm) / (2 * eps)
        err = np.abs(num - grads[name]).max() / max(np.abs(num).max(), 1e-8)
        worst = max(worst, float(err))
    return worst


TWO_GAUGE_LAYOUT = {"G1": [("U1", 25.0, 28, 0.3)]}


def overfit_eight_windows(hidden=16, n_steps=1500, lr=1e-2):
    """Train on 8 windows of a routed series; NSE of median forecasts over all their leads."""
    r = make_region(24 * 60, seed=0, layout=TWO_GAUGE_LAYOUT)
    cfg = L.LstmConfig(hidden_size=hidden, target_lookback_h=24, upstream_lookback_h=48, max_lead_h=12,
                       n_components=1, seed=0, n_steps=n_steps, eval_every=50, learning_rate=lr,
                       batch_size=8)
    g = L.GaugeInputs("G1", r.targets["G1"], [r.upstream["U1"]], r.precip["G1"])
    norms = L.fit_normalizers([g])
    pg = L.prepare_gauge(g, norms["G1"], cfg)
    full = L.make_dataset([pg], cfg)
    pick = np.linspace(0, len(full) - 1, 8).astype(int)
    ds = L.LstmDataset(full.gauges, full.windows[pick])
    res = L.train_lstm(ds, cfg)
    obs, pred = [], []
    for lead in range(1, cfg.max_lead + 1):
        pred.append(L.dataset_medians(res.params, ds, cfg, lead))
        obs.append(pg.raw_stage[ds.windows[:, 1] + lead])
    return evalkit.nse(evalkit.PairedSeries(np.concatenate(obs), np.concatenate(pred))), res


def region_skill(lead=24, n_steps=4000, hidden=32, lr=3e-3, seed=0):
    """Train on the first 80 % of a one-year two-gauge region, score the last 20 % at ``lead``.

    The scored tail is never seen during training or model selection.
    Returns (nse, persistent_nse, train result).
    """
    n = 24 * 365
    r = make_region(n, seed=seed, layout=TWO_GAUGE_LAYOUT)
    cfg = L.LstmConfig(hidden_size=hidden, target_lookback_h=72, upstream_lookback_h=96, max_lead_h=lead,
                       n_components=3, seed=0, n_steps=n_steps, eval_every=500, learning_rate=lr)
    inputs = [L.GaugeInputs(g, r.targets[g], [r.upstream[u] for u in r.upstream_ids[g]], r.precip[g])
              for g in sorted(r.targets)]
    cut = int(n * 0.8)
    idx = np.arange(n)
    tr_m = [idx < cut - cfg.max_lead for _ in inputs]
    test_m = [idx >= cut for _ in inputs]
    norms = L.fit_normalizers(inputs, tr_m)
    prep = [L.prepare_gauge(g, norms[g.gauge_id], cfg) for g in inputs]
    tr, test = L.make_dataset(prep, cfg, tr_m), L.make_dataset(prep, cfg, test_m)
    res = L.train_lstm(tr, cfg)
    med = L.dataset_medians(res.params, test, cfg, lead)
    ts = test.windows[:, 1]
    raw = prep[0].raw_stage
    ps = evalkit.PairedSeries(raw[ts + lead], med, raw[ts])
    return evalkit.nse(ps), evalkit.persistent_nse(ps), res
