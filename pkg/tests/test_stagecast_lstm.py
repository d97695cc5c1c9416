from datetime import datetime, timezone

import numpy as np
import pytest

from floodcast import stagecast_lstm as L
from floodcast.errors import ConfigError, DataError, DivergenceError
from floodcast.hydrodata import PrecipSeries, StageSeries
from floodcast.synthdata import make_region

from helpers import COMPONENTS, max_gradient_error, toy_problem

T0 = datetime(2020, 1, 1, tzinfo=timezone.utc)


def small_cfg(**kw):
    base = dict(hidden_size=4, target_lookback_h=6, upstream_lookback_h=8, max_lead_h=4, n_components=2,
                n_steps=20, eval_every=10, batch_size=8)
    base.update(kw)
    return L.LstmConfig(**base)


@pytest.mark.parametrize("component", sorted(COMPONENTS))
def test_gradients_match_central_differences(component):
    params, batch = toy_problem()
    assert max_gradient_error(params, batch, COMPONENTS[component]) < 1e-4


def test_combiner_zero_weights_and_passthrough():
    ups = np.array([[2.5, 1.0]])
    np.testing.assert_array_equal(L.combine_upstream(np.zeros((5, 2)), np.zeros(5), ups), np.zeros((1, 5)))
    W = np.zeros((5, 1))
    W[0, 0] = 1.0
    np.testing.assert_array_equal(L.combine_upstream(W, np.zeros(5), [[3.0]]), [[3.0, 0, 0, 0, 0]])
    np.testing.assert_array_equal(L.combine_upstream(None, None, np.zeros((2, 0))), np.zeros((2, 5)))


def test_hindcast_zero_weights_and_inputs_give_zero_state():
    cfg = small_cfg()
    p = L.init_params(cfg, {"G": 1})
    p["hind/W"][:] = 0.0
    p["hind/b"][:] = 0.0
    c, h = L.run_hindcast(p, np.zeros((6, L.HIND_INPUTS)))
    assert not c.any() and not h.any()


def test_hindcast_rejects_non_finite():
    p = L.init_params(small_cfg(), {"G": 1})
    x = np.zeros((6, L.HIND_INPUTS))
    x[2, 1] = np.nan
    with pytest.raises(DataError):
        L.run_hindcast(p, x)


def test_handoff_identity_and_zero():
    p = L.init_params(small_cfg(), {"G": 1})
    c, h = np.arange(4.0), -np.arange(4.0)
    c0, h0 = L.handoff(p, c, h)
    np.testing.assert_array_equal(c0, c)
    np.testing.assert_array_equal(h0, h)
    p["hand/W"][:] = 0.0
    c0, h0 = L.handoff(p, c, h)
    assert not c0.any() and not h0.any()


def test_head_bias_only_gives_identical_steps():
    cfg = small_cfg()
    p = L.init_params(cfg, {"G": 1})
    p["head/W"][:] = 0.0
    p["head/b"][:] = np.linspace(-1, 1, p["head/b"].size)
    dist = L.run_forecast(p, np.ones(4), np.ones(4), 4)
    for arr in (dist.weights, dist.loc, dist.scale, dist.asym):
        assert np.all(arr == arr[0])


def gauge_inputs(n=400, seed=0):
    r = make_region(n, seed=seed, layout={"G1": [("U1", 10.0, 3, 0.3)]})
    return L.GaugeInputs("G1", r.targets["G1"], [r.upstream["U1"]], r.precip["G1"])


def test_valid_windows_skip_missing_stages():
    cfg = small_cfg()
    g = gauge_inputs(100)
    vals = g.stage.values.copy()
    vals[50] = np.nan
    g = L.GaugeInputs("G1", g.stage.with_values(vals), g.upstream, g.precip)
    pg = L.prepare_gauge(g, L.Normalizer.fit(g), cfg)
    ts = L.valid_issue_indices(pg, cfg)
    for t in ts:
        window = np.arange(t - cfg.lookback + 1, t + cfg.max_lead + 1)
        assert 50 not in window
    assert ts.min() >= cfg.lookback - 1 + cfg.lag


def test_lagged_upstream_rows():
    cfg = small_cfg()
    g = gauge_inputs(50)
    pg = L.prepare_gauge(g, L.Normalizer.fit(g), cfg)
    assert pg.upstream.shape == (2, 50)
    np.testing.assert_array_equal(pg.upstream[1, cfg.lag :], pg.upstream[0, : -cfg.lag])


def test_training_lowers_loss():
    cfg = small_cfg(hidden_size=8, n_steps=300, eval_every=50, learning_rate=1e-2)
    g = gauge_inputs(400)
    pg = L.prepare_gauge(g, L.Normalizer.fit(g), cfg)
    ds = L.make_dataset([pg], cfg)
    ds = L.LstmDataset(ds.gauges, ds.windows[:200])
    res = L.train_lstm(ds, cfg)
    assert min(v for _, v in res.val_history) < res.initial_loss


def test_divergence_halves_rate_then_fails(monkeypatch):
    cfg = small_cfg()
    g = gauge_inputs(100)
    pg = L.prepare_gauge(g, L.Normalizer.fit(g), cfg)
    ds = L.make_dataset([pg], cfg)
    rates = []

    def always_diverge(train, cfg_, val, lr, counts):
        rates.append(lr)
        raise DivergenceError("nan")

    monkeypatch.setattr(L, "_train_once", always_diverge)
    with pytest.raises(DivergenceError):
        L.train_lstm(ds, cfg)
    assert rates == [cfg.learning_rate / 2**i for i in range(4)]


def test_model_round_trip_and_forecast(tmp_path):
    cfg = small_cfg()
    g = gauge_inputs(200)
    norms = L.fit_normalizers([g])
    pg = L.prepare_gauge(g, norms["G1"], cfg)
    res = L.train_lstm(L.make_dataset([pg], cfg), cfg)
    model = L.LstmModel(cfg, res.params, norms, {"G1": ["U1"]})
    L.save_lstm(tmp_path / "m.lstm", model)
    back = L.load_lstm(tmp_path / "m.lstm")
    assert back.cfg == cfg
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    a = model.forecast(g, 150)
    b = back.forecast(g, 150)
    np.testing.assert_array_equal(a.loc, b.loc)
    assert a.loc.shape == (cfg.max_lead, cfg.n_components)
    with pytest.raises(ConfigError):
        model.forecast(g, 150, L=cfg.max_lead + 1)


def test_config_rejects_short_upstream_window():
    with pytest.raises(ConfigError):
        L.LstmConfig(target_lookback_h=10, upstream_lookback_h=5)


def test_inputs_align_on_time_grid():
    s = StageSeries("G", T0, 1.0, np.arange(5.0))
    p = PrecipSeries("G", datetime(2020, 1, 1, 2, tzinfo=timezone.utc), 1.0, [1.0, 2.0])
    _, _, pr = L.GaugeInputs("G", s, [], p).arrays()
    np.testing.assert_array_equal(pr, [np.nan, np.nan, 1.0, 2.0, np.nan])
