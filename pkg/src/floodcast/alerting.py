"""Alert triggering on forecast stages and alert delivery."""

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._io import atomic_write_json, dump_json
from .errors import ConfigError, DataError
from .grids import Raster, write_ascii_grid
from .hydrodata import GaugeConfig, format_timestamp, format_timestamp_basic, parse_timestamp
from .inundation_manifold import HeightStack, stage_to_depth
from .inundation_threshold import PixelThresholdMap, predict_extent

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUPPRESSION_WINDOW_H = 6.0
SUPPRESSION_RISE_M = 0.1
WEBHOOK_ATTEMPTS = 3
WEBHOOK_BACKOFF_S = 0.5
STATE_FILE = "dedup_state.json"

SEVERITIES = ("warning", "danger")


@dataclass(frozen=True)
class Alert:
    gauge_id: str
    issued_at: datetime
    valid_at: datetime
    max_forecast_stage_m: float
    current_stage_m: float
    severity: str
    source: str = "internal"
    extent_path: Optional[str] = None
    depth_path: Optional[str] = None

    def __post_init__(self):
        if self.severity not in SEVERITIES:
            raise DataError(f"unknown severity {self.severity!r}")
        if self.source not in ("internal", "external"):
            raise DataError(f"unknown alert source {self.source!r}")
        if self.valid_at < self.issued_at:
            raise DataError("alert valid time precedes its issue time")

    @property
    def stage_change_m(self) -> float:
        return self.max_forecast_stage_m - self.current_stage_m

    @property
    def dedup_key(self) -> str:
        return "|".join([self.gauge_id, format_timestamp(self.valid_at), self.severity, self.source])

    def to_json(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "gauge_id": self.gauge_id,
            "issued_at": format_timestamp(self.issued_at),
            "valid_at": format_timestamp(self.valid_at),
            "max_forecast_stage_m": float(self.max_forecast_stage_m),
            "current_stage_m": float(self.current_stage_m),
            "stage_change_m": float(self.stage_change_m),
            "severity": self.severity,
            "source": self.source,
        }
        if self.extent_path is not None:
            doc["extent_path"] = self.extent_path
        if self.depth_path is not None:
            doc["depth_path"] = self.depth_path
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Alert":
        return cls(doc["gauge_id"], parse_timestamp(doc["issued_at"]), parse_timestamp(doc["valid_at"]),
                   float(doc["max_forecast_stage_m"]), float(doc["current_stage_m"]), doc["severity"],
                   doc.get("source", "internal"), doc.get("extent_path"), doc.get("depth_path"))


@dataclass(frozen=True)
class ExternalForecast:
    """Forecast points from another provider: (lead hours, stage)."""

    gauge_id: str
    issued_at: datetime
    leads_h: tuple
    stages_m: tuple

    def __post_init__(self):
        leads = tuple(float(x) for x in self.leads_h)
        stages = tuple(float(x) for x in self.stages_m)
        if len(leads) != len(stages) or not leads:
            raise DataError("external forecast needs matching, non-empty lead and stage lists")
        if leads[0] <= 0 or any(b <= a for a, b in zip(leads, leads[1:])):
            raise DataError("external forecast leads must be positive and strictly increasing")
        if not all(np.isfinite(stages)):
            raise DataError("external forecast stages must be finite")
        object.__setattr__(self, "leads_h", leads)
        object.__setattr__(self, "stages_m", stages)


def read_external_forecast(path) -> ExternalForecast:
    """JSON ``{"gauge_id", "issued_at", "points": [{"lead_h", "stage_m"}, ...]}``."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        pts = doc["points"]
        return ExternalForecast(doc["gauge_id"], parse_timestamp(doc["issued_at"]),
                                tuple(p["lead_h"] for p in pts), tuple(p["stage_m"] for p in pts))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed external forecast ({exc})") from None


def severity_for(stage: float, cfg: GaugeConfig, closed: bool = True) -> Optional[str]:
    """Highest threshold crossed by ``stage``, or None below the warning level."""
    crosses = (lambda thr: stage >= thr) if closed else (lambda thr: stage > thr)
    if cfg.danger_stage_m is not None and crosses(cfg.danger_stage_m):
        return "danger"
    if crosses(cfg.warning_stage_m):
        return "warning"
    return None


def _trigger(leads_h, stages, cfg, current_stage, issued_at, source, closed):
    leads_h = np.asarray(leads_h, dtype=float)
    stages = np.asarray(stages, dtype=float)
    keep = (leads_h <= cfg.max_lead_time_h) & np.isfinite(stages)
    if not keep.any():
        return None
    leads_h, stages = leads_h[keep], stages[keep]
    j = int(np.argmax(stages))  # first occurrence of the maximum
    sev = severity_for(float(stages[j]), cfg, closed)
    if sev is None:
        return None
    return Alert(cfg.gauge_id, issued_at, issued_at + timedelta(hours=float(leads_h[j])),
                 float(stages[j]), float(current_stage), sev, source)


def evaluate_trigger(forecast: Sequence[float], cfg: GaugeConfig, current_stage: float,
                     issued_at: datetime, step_h: float = 1.0, closed: bool = True) -> Optional[Alert]:
    """Alert for an internal forecast with one stage per lead step 1..L.

    Leads past the gauge's maximal lead time are ignored. The maximal
    remaining stage is compared with the danger then warning threshold.
    """
    stages = np.asarray(forecast, dtype=float)
    leads = step_h * np.arange(1, len(stages) + 1)
    return _trigger(leads, stages, cfg, current_stage, issued_at, "internal", closed)


def evaluate_external(ext: ExternalForecast, cfg: GaugeConfig, current_stage: float,
                      closed: bool = True) -> Optional[Alert]:
    if ext.gauge_id != cfg.gauge_id:
        raise DataError(f"external forecast for {ext.gauge_id} checked against {cfg.gauge_id}")
    return _trigger(ext.leads_h, ext.stages_m, cfg, current_stage, ext.issued_at, "external", closed)


def _map_stem(a: Alert) -> str:
    return f"{a.gauge_id}_{format_timestamp_basic(a.valid_at)}_{a.severity}_{a.source}"


def attach_inundation(a: Alert, model, out_dir, dem: Optional[Raster] = None) -> Alert:
    """Write maps for the alert's maximal stage and record their paths.

    ``model`` is None (map-less gauge), a :class:`PixelThresholdMap`
    (extent only) or a :class:`HeightStack` (extent and depth, needs
    ``dem``). Paths are stored relative to ``out_dir``.
    """
    if model is None:
        return a
    out_dir = Path(out_dir)
    stem = _map_stem(a)
    if isinstance(model, PixelThresholdMap):
        ext_name = f"{stem}_extent.asc"
        write_ascii_grid(out_dir / ext_name, predict_extent(model, a.max_forecast_stage_m))
        return replace(a, extent_path=ext_name)
    if isinstance(model, HeightStack):
        if dem is None:
            raise ConfigError("the height-map model needs the DEM to produce depths")
        extent, depth = stage_to_depth(model, dem, a.max_forecast_stage_m)
        ext_name, dep_name = f"{stem}_extent.asc", f"{stem}_depth.asc"
        write_ascii_grid(out_dir / ext_name, extent)
        write_ascii_grid(out_dir / dep_name, depth)
        return replace(a, extent_path=ext_name, depth_path=dep_name)
    raise ConfigError(f"unsupported inundation model {type(model).__name__}")


# -- emission ---------------------------------------------------------------------------


class DeliveryRecord(NamedTuple):
    key: str
    status: str  # emitted | duplicate | suppressed
    file_path: Optional[str] = None
    webhook: Optional[str] = None  # None (not configured) | ok | failed
    attempts: int = 0
    error: Optional[str] = None


def post_json(url: str, doc: dict, timeout: float = 10.0) -> int:
    """POST ``doc`` as JSON; returns the HTTP status or raises on transport errors."""
    req = urllib.request.Request(url, data=dump_json(doc).encode("utf-8"), method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return int(resp.status)
    except urllib.error.HTTPError as exc:
        return int(exc.code)


def deliver_webhook(url, doc, attempts=WEBHOOK_ATTEMPTS, backoff_s=WEBHOOK_BACKOFF_S,
                    post=post_json, sleep=time.sleep):
    """At-least-once POST with exponential backoff. Returns (ok, attempts, error)."""
    err = None
    for i in range(attempts):
        try:
            status = post(url, doc)
            if 200 <= status < 300:
                return True, i + 1, None
            err = f"HTTP {status}"
        except (OSError, urllib.error.URLError) as exc:
            err = str(exc)
        if i + 1 < attempts:
            sleep(backoff_s * 2**i)
    return False, attempts, err


_locks_guard = threading.Lock()
_locks = {}


def _lock_for(name: str) -> threading.Lock:
    with _locks_guard:
        return _locks.setdefault(name, threading.Lock())


def _load_state(path: Path) -> dict:
    if not path.exists():
        return {"emitted": {}, "last": {}}
    with open(path) as fh:
        st = json.load(fh)
    st.setdefault("emitted", {})
    st.setdefault("last", {})
    return st


def alert_filename(a: Alert) -> str:
    return f"alert_{_map_stem(a)}.json"


def emit_alert(a: Alert, out_dir, webhook_url: Optional[str] = None,
               window_h: float = SUPPRESSION_WINDOW_H, rise_m: float = SUPPRESSION_RISE_M,
               attempts: int = WEBHOOK_ATTEMPTS, backoff_s: float = WEBHOOK_BACKOFF_S,
               post=post_json, sleep=time.sleep) -> DeliveryRecord:
    """Write the alert document and optionally POST it to a webhook.

    An alert whose dedup key was already emitted is skipped. Within
    ``window_h`` of the last alert for the same gauge, severity and source,
    a new one is suppressed unless its maximal stage is more than
    ``rise_m`` higher. Dedup state lives in ``out_dir``; emissions for one
    output directory are serialized. A failed webhook does not affect the
    file sink.
    """
    out_dir = Path(out_dir)
    state_path = out_dir / STATE_FILE
    key = a.dedup_key
    with _lock_for(str(state_path.resolve())):
        state = _load_state(state_path)
        if key in state["emitted"]:
            return DeliveryRecord(key, "duplicate", state["emitted"][key])
        group = "|".join([a.gauge_id, a.severity, a.source])
        last = state["last"].get(group)
        if last is not None:
            age_h = (a.issued_at - parse_timestamp(last["issued_at"])).total_seconds() / 3600.0
            if 0 <= age_h < window_h and a.max_forecast_stage_m - last["max_stage_m"] <= rise_m:
                return DeliveryRecord(key, "suppressed")
        doc = a.to_json()
        name = alert_filename(a)
        atomic_write_json(out_dir / name, doc)
        hook, n, err = None, 0, None
        if webhook_url:
            ok, n, err = deliver_webhook(webhook_url, doc, attempts, backoff_s, post, sleep)
            hook = "ok" if ok else "failed"
            if not ok:
                log.warning("webhook delivery of %s failed after %d attempts: %s", key, n, err)
        state["emitted"][key] = name
        state["last"][group] = {"issued_at": format_timestamp(a.issued_at),
                                "max_stage_m": float(a.max_forecast_stage_m)}
        atomic_write_json(state_path, state)
        return DeliveryRecord(key, "emitted", name, hook, n, err)
