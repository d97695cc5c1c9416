import json
import threading
from datetime import datetime, timedelta, timezone
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodcast.alerting import (
    STATE_FILE,
    Alert,
    ExternalForecast,
    alert_filename,
    attach_inundation,
    deliver_webhook,
    emit_alert,
    evaluate_external,
    evaluate_trigger,
    read_external_forecast,
    severity_for,
)
from floodcast.errors import ConfigError, DataError
from floodcast.grids import read_ascii_grid
from floodcast.hydrodata import GaugeConfig
from floodcast.inundation_manifold import build_height_stack
from floodcast.inundation_threshold import train_thresholding

T0 = datetime(2021, 7, 1, 6, tzinfo=timezone.utc)
CFG = GaugeConfig("G1", warning_stage_m=5.0, danger_stage_m=6.0, max_lead_time_h=24)


def make_alert(issued=T0, lead=3, stage=5.5, severity="warning", source="internal"):
    return Alert("G1", issued, issued + timedelta(hours=lead), stage, 4.0, severity, source)


def test_below_warning_gives_no_alert():
    assert evaluate_trigger([4.0, 4.5, 4.9], CFG, 4.0, T0) is None


def test_warning_threshold_is_closed():
    a = evaluate_trigger([4.0, 5.0, 4.8], CFG, 4.0, T0)
    assert a.severity == "warning" and a.max_forecast_stage_m == 5.0
    assert a.valid_at == T0 + timedelta(hours=2)
    assert a.stage_change_m == 1.0
    assert evaluate_trigger([4.0, 5.0], CFG, 4.0, T0, closed=False) is None


def test_danger_beats_warning_and_first_maximum_wins():
    a = evaluate_trigger([5.5, 6.2, 6.2, 5.0], CFG, 5.0, T0)
    assert a.severity == "danger" and a.valid_at == T0 + timedelta(hours=2)


def test_leads_beyond_max_lead_are_ignored():
    fc = np.full(30, 4.0)
    fc[26] = 7.0
    assert evaluate_trigger(fc, CFG, 4.0, T0) is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=48))
def test_never_alerts_past_max_lead(fc):
    a = evaluate_trigger(fc, CFG, 4.0, T0)
    if a is not None:
        assert a.valid_at - a.issued_at <= timedelta(hours=CFG.max_lead_time_h)
        assert a.max_forecast_stage_m >= CFG.warning_stage_m


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10))
def test_severity_monotone_in_stage(s1, s2):
    order = {None: 0, "warning": 1, "danger": 2}
    lo, hi = sorted((s1, s2))
    assert order[severity_for(lo, CFG)] <= order[severity_for(hi, CFG)]


def test_external_forecast_above_danger(tmp_path):
    p = tmp_path / "ext.json"
    p.write_text(json.dumps({"gauge_id": "G1", "issued_at": "2021-07-01T06:00:00Z",
                             "points": [{"lead_h": 6, "stage_m": 5.2}, {"lead_h": 12, "stage_m": 6.4}]}))
    a = evaluate_external(read_external_forecast(p), CFG, 4.5)
    assert a.source == "external" and a.severity == "danger"
    assert a.valid_at == T0 + timedelta(hours=12)


def test_external_forecast_validation(tmp_path):
    with pytest.raises(DataError):
        ExternalForecast("G1", T0, (6, 3), (1.0, 2.0))
    with pytest.raises(DataError):
        ExternalForecast("G1", T0, (), ())
    with pytest.raises(DataError):
        evaluate_external(ExternalForecast("G2", T0, (1,), (9.0,)), CFG, 4.0)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"gauge_id": "G1", "issued_at": "2021-07-01T06:00:00Z"}))
    with pytest.raises(DataError):
        read_external_forecast(p)


def test_alert_invariants_and_json_round_trip():
    with pytest.raises(DataError):
        make_alert(severity="watch")
    with pytest.raises(DataError):
        Alert("G1", T0, T0 - timedelta(hours=1), 5.5, 4.0, "warning")
    a = make_alert()
    assert Alert.from_json(a.to_json()) == a


def test_attach_none_threshold_and_manifold(tmp_path, valley_dem, bathtub_catalog):
    a = make_alert(stage=101.3)
    assert attach_inundation(a, None, tmp_path) == a
    thr = train_thresholding(bathtub_catalog)
    b = attach_inundation(a, thr, tmp_path)
    assert b.depth_path is None and (tmp_path / b.extent_path).exists()
    stack = build_height_stack(bathtub_catalog, valley_dem, thr, factor=32)
    c = attach_inundation(a, stack, tmp_path, dem=valley_dem)
    assert (tmp_path / c.extent_path).exists()
    depth = read_ascii_grid(tmp_path / c.depth_path)
    assert depth.values.max() > 0
    with pytest.raises(ConfigError):
        attach_inundation(a, stack, tmp_path)


def test_emit_file_sink_and_dedup(tmp_path):
    a = make_alert()
    r = emit_alert(a, tmp_path)
    assert r.status == "emitted" and r.webhook is None
    doc = json.loads((tmp_path / alert_filename(a)).read_text())
    assert doc["severity"] == "warning" and doc["stage_change_m"] == 1.5
    again = emit_alert(a, tmp_path)
    assert again.status == "duplicate"
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted([alert_filename(a), STATE_FILE])


def test_suppression_window_and_rise(tmp_path):
    assert emit_alert(make_alert(), tmp_path).status == "emitted"
    later = T0 + timedelta(hours=2)
    assert emit_alert(make_alert(issued=later, stage=5.6), tmp_path).status == "suppressed"
    assert emit_alert(make_alert(issued=later, stage=5.61), tmp_path).status == "emitted"
    assert emit_alert(make_alert(issued=later + timedelta(hours=7), stage=5.0), tmp_path).status == "emitted"
    # another source or severity is a separate group
    assert emit_alert(make_alert(issued=later, lead=4, source="external"), tmp_path).status == "emitted"


def test_state_survives_between_calls(tmp_path):
    a = make_alert()
    emit_alert(a, tmp_path)
    state = json.loads((tmp_path / STATE_FILE).read_text())
    assert a.dedup_key in state["emitted"]


class Always500(BaseHTTPRequestHandler):
    hits = 0

    def do_POST(self):
        type(self).hits += 1
        self.rfile.read(int(self.headers["Content-Length"]))
        self.send_response(500)
        self.end_headers()

    def log_message(self, *args):
        pass


def test_webhook_failing_three_times_keeps_file(tmp_path):
    server = HTTPServer(("127.0.0.1", 0), Always500)
    th = threading.Thread(target=server.serve_forever, daemon=True)
    th.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/hook"
        a = make_alert()
        r = emit_alert(a, tmp_path, webhook_url=url, backoff_s=0.01)
    finally:
        server.shutdown()
        server.server_close()
    assert Always500.hits == 3
    assert r.status == "emitted" and r.webhook == "failed" and r.attempts == 3
    assert r.error == "HTTP 500"
    assert (tmp_path / alert_filename(a)).exists()


def test_webhook_backoff_and_recovery():
    calls, sleeps = [], []

    def flaky(url, doc):
        calls.append(url)
        if len(calls) < 3:
            raise OSError("connection refused")
        return 204

    ok, n, err = deliver_webhook("http://x", {}, backoff_s=0.5, post=flaky, sleep=sleeps.append)
    assert ok and n == 3 and err is None
    assert sleeps == [0.5, 1.0]
