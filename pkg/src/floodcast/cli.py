"""Command-line entry point: ``floodcast <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

import argparse
import json
import logging
import shutil
import sys
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import alerting, evalkit, plotting, synthdata
from . import config as cfgmod
from ._io import atomic_write_json, atomic_write_text
from .cmal import cmal_median
from .errors import ConfigError, DataError, InsufficientDataError, NumericError
from .grids import read_ascii_grid, render_pgm, write_ascii_grid
from .hydrodata import (PrecipSeries, StageStats, basin_mean_precip, clamp_precip, format_timestamp, parse_timestamp,
                        qc_stage, read_gauge_config, read_precip_csv, read_precip_frames,
                        read_stage_csv, read_watershed_mask, write_gauge_config, write_precip_csv,
                        write_qc_report_csv, write_stage_csv)
from .inundation_manifold import build_height_stack, load_height_stack, save_height_stack, stage_to_depth
from .inundation_threshold import (EventCatalog, load_threshold_model, predict_extent,
                                   read_event_catalog, save_threshold_model, train_thresholding)
from .stagecast_linear import (LinearStageModel, build_design_matrix, latest_features, predict_rows,
                               select_lambda, train_linear)
from .stagecast_lstm import (GaugeInputs, LstmConfig, LstmModel, dataset_medians, fit_normalizers,
                             load_lstm, make_dataset, prepare_gauge, save_lstm, train_lstm)

log = logging.getLogger("floodcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

LINEAR_ARTIFACT = "stage_model.json"
LSTM_ARTIFACT = "stage_model.lstm"
INUNDATION_META = "inundation_model.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- data directory helpers ------------------------------------------------------------


def _load_gauges(data_dir: Path, cfg):
    path = data_dir / "gauges.json"
    if not path.exists():
        raise DataError(f"{path} not found")
    return read_gauge_config(path, cfg["gauges"]["max_lead_limit_h"])


def _load_stages(data_dir: Path) -> dict:
    paths = sorted((data_dir / "stages").glob("*.csv"))
    if not paths:
        raise DataError(f"no stage CSVs under {data_dir / 'stages'}")
    return {p.stem: read_stage_csv(p) for p in paths}


def _load_precip(data_dir: Path) -> dict:
    return {p.stem: read_precip_csv(p) for p in sorted((data_dir / "precip").glob("*.csv"))}


def _upstreams(g, stages):
    missing = [u for u in g.upstream_ids if u not in stages]
    if missing:
        raise DataError(f"{g.gauge_id}: missing upstream stage series {missing}")
    return [stages[u] for u in g.upstream_ids]


def _target(g, stages):
    if g.gauge_id not in stages:
        raise DataError(f"no stage series for gauge {g.gauge_id}")
    return stages[g.gauge_id]


def _lstm_config(section: dict) -> LstmConfig:
    keys = {k: v for k, v in section.items() if k != "validation_fraction"}
    return LstmConfig(**keys)


# -- qc --------------------------------------------------------------------------------------


def cmd_qc(args, cfg):
    src, dst = Path(args.in_dir), Path(args.out)
    q = cfg["qc"]
    gauges = _load_gauges(src, cfg)
    write_gauge_config(dst / "gauges.json", gauges)
    stages = _load_stages(src)
    reports, times = [], {}
    for gid, s in stages.items():
        hist = None
        if args.history:
            hp = Path(args.history) / f"{gid}.csv"
            if hp.exists():
                hist = StageStats.from_series(read_stage_csv(hp))
        if hist is None:
            hist = StageStats.trimmed(s)
        clean, rep = qc_stage(s, hist, q["decimal_window_h"], q["decimal_k"], q["outlier_margin_m"],
                              q["jump_factor"], q["max_gap_h"])
        write_stage_csv(dst / "stages" / f"{gid}.csv", clean)
        reports.append(rep)
        times[gid] = s.times()
        c = rep.counts()
        print(f"qc {gid}: " + ", ".join(f"{k}={c[k]}" for k in sorted(c)))
    write_qc_report_csv(dst / "qc_report.csv", reports, times)

    precip = _load_precip(src)
    basins = set(precip)
    if (src / "masks").is_dir():
        basins |= {p.stem for p in (src / "masks").glob("*.asc")}
    for basin in sorted(basins):
        series = precip.get(basin)
        frames = read_precip_frames(src / "frames", basin) if (src / "frames").is_dir() else []
        if frames:
            mask = read_watershed_mask(src / "masks" / f"{basin}.asc")
            from_frames = basin_mean_precip([clamp_precip(f, q["precip_cap_mm_h"]) for f in frames],
                                            mask, basin)
            series = _merge_precip(series, from_frames)
        if series is not None:
            write_precip_csv(dst / "precip" / f"{basin}.csv", series)
    for sub in ("dem", "catalogs", "truth"):
        if (src / sub).is_dir():
            shutil.copytree(src / sub, dst / sub, dirs_exist_ok=True)
    if (src / "scenario.json").exists():
        shutil.copy2(src / "scenario.json", dst / "scenario.json")
    return EXIT_OK


def _merge_precip(series, frames_series):
    """Overlay frame-derived hours on the series, extending it if needed."""
    if series is None:
        return frames_series
    step = timedelta(hours=series.step_h)
    off = int(round((frames_series.t0 - series.t0) / step))
    n = max(len(series), off + len(frames_series))
    start = min(0, off)
    vals = np.full(n - start, np.nan)
    vals[-start : -start + len(series)] = series.values
    fv = frames_series.values
    seg = vals[off - start : off - start + len(fv)]
    vals[off - start : off - start + len(fv)] = np.where(np.isnan(fv), seg, fv)
    return PrecipSeries(series.basin_id, series.t0 + start * step, series.step_h, vals)


# -- synth -------------------------------------------------------------------------------


def cmd_synth(args, cfg):
    desc = synthdata.write_scenario(args.out, args.scenario, args.seed, args.hours, args.events)
    print(f"scenario {desc['scenario']} written to {args.out}; recommended --now {desc['now']}")
    return EXIT_OK


# -- train-stage ---------------------------------------------------------------------------


def _split_rows(rows, fraction):
    n_val = int(round(len(rows) * fraction))
    if n_val < 1 or n_val >= len(rows):
        return rows, []
    return rows[:-n_val], rows[-n_val:]


def train_linear_gauge(g, stages, precip, lcfg, max_lead=None):
    """One ridge model per lead 1..max lead for gauge ``g``."""
    target, ups = _target(g, stages), _upstreams(g, stages)
    p = precip.get(g.basin) if lcfg["use_precip"] else None
    if lcfg["use_precip"] and p is None:
        raise DataError(f"{g.gauge_id}: rainfall features requested but no series for basin {g.basin}")
    ids = [g.gauge_id, *g.upstream_ids] + ([f"precip:{g.basin}"] if p is not None else [])
    models = []
    for lead in range(1, (max_lead or g.max_lead_time_h) + 1):
        rows = build_design_matrix(target, ups, lcfg["lookback_h"], lead, p)
        lam = lcfg["l2_lambda"]
        if lam < 0:
            tr, va = _split_rows(rows, lcfg["validation_fraction"])
            lam = select_lambda(tr, va) if va else 1e-2
        m = train_linear(rows, lam, g.gauge_id, lead, lcfg["lookback_h"], ids, target.step_h)
        models.append(m)
    return models


def cmd_train_stage(args, cfg):
    data = Path(args.data)
    gauges = _load_gauges(data, cfg)
    stages, precip = _load_stages(data), _load_precip(data)
    out = Path(args.out)
    if args.model == "linear":
        docs = []
        for g in gauges:
            models = train_linear_gauge(g, stages, precip, cfg["linear"])
            docs += [m.to_json() for m in models]
            print(f"linear {g.gauge_id}: {len(models)} lead models, lambda(lead 1) = {models[0].l2_lambda:g}")
        atomic_write_json(out, {"schema_version": 1, "kind": "linear", "models": docs})
        return EXIT_OK

    lcfg = _lstm_config(cfg["lstm"])
    inputs = [GaugeInputs(g.gauge_id, _target(g, stages), _upstreams(g, stages), precip.get(g.basin))
              for g in gauges]
    frac = cfg["lstm"]["validation_fraction"]
    train_masks, val_masks = [], []
    for gi in inputs:
        n = len(gi.stage)
        cut = int(round(n * (1 - frac)))
        idx = np.arange(n)
        train_masks.append(idx < cut - lcfg.max_lead)
        val_masks.append(idx >= cut)
    norms = fit_normalizers(inputs, train_masks)
    prepared = [prepare_gauge(gi, norms[gi.gauge_id], lcfg) for gi in inputs]
    train = make_dataset(prepared, lcfg, train_masks)
    val = make_dataset(prepared, lcfg, val_masks) if frac > 0 else None
    res = train_lstm(train, lcfg, val if val is not None and len(val) else None)
    model = LstmModel(lcfg, res.params, norms, {g.gauge_id: list(g.upstream_ids) for g in gauges})
    save_lstm(out, model)
    print(f"lstm: {len(train)} training windows, best step {res.best_step}, "
          f"validation NLL {min(v for _, v in res.val_history):.4f}")
    return EXIT_OK


# -- train-inundation -------------------------------------------------------------------------


def cmd_train_inundation(args, cfg):
    cat = read_event_catalog(args.catalog)
    dem = read_ascii_grid(args.dem)
    if not cat.events[0].extent.same_geometry(dem):
        raise DataError("catalog extents and DEM differ in geometry")
    out = Path(args.out)
    t = cfg["threshold"]
    thr = train_thresholding(cat, t["minimal_ratio"], t["dilation_slope"])
    save_threshold_model(out, thr)
    meta = {"schema_version": 1, "kind": args.model, "gauge_id": cat.gauge_id}
    if args.model == "manifold":
        m = cfg["manifold"]
        stack = build_height_stack(cat, dem, thr, m["factor"], omega=m["omega"], tol=m["tol"],
                                   max_sweeps=m["max_sweeps"])
        write_ascii_grid(out / "dem.asc", dem)
        save_height_stack(out, stack, dem, dem_path="dem.asc")
        print(f"manifold {cat.gauge_id}: {len(stack.entries)} height maps")
    atomic_write_json(out / INUNDATION_META, meta)
    print(f"{args.model} {cat.gauge_id}: trained on {len(cat.events)} events")
    return EXIT_OK


def load_inundation_model(directory: Path):
    """(model, dem) for a trained inundation directory, or (None, None)."""
    meta_path = directory / INUNDATION_META
    if not meta_path.exists():
        return None, None
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("kind") == "manifold":
        return load_height_stack(directory), read_ascii_grid(directory / "dem.asc")
    if meta.get("kind") == "threshold":
        return load_threshold_model(directory), None
    raise DataError(f"{meta_path}: unknown inundation model kind {meta.get('kind')!r}")


# -- forecast ------------------------------------------------------------------------------------


def _load_stage_model(art: Path):
    if (art / LINEAR_ARTIFACT).exists():
        with open(art / LINEAR_ARTIFACT) as fh:
            doc = json.load(fh)
        models = {}
        for m in doc.get("models", []):
            lm = LinearStageModel.from_json(m)
            models[(lm.gauge_id, lm.lead_h)] = lm
        return "linear", models
    if (art / LSTM_ARTIFACT).exists():
        return "lstm", load_lstm(art / LSTM_ARTIFACT)
    raise DataError(f"no stage model ({LINEAR_ARTIFACT} or {LSTM_ARTIFACT}) in {art}")


def forecast_gauge(kind, model, g, stages, precip, now_index):
    target, ups = _target(g, stages), _upstreams(g, stages)
    p = precip.get(g.basin)
    if kind == "linear":
        out = []
        for lead in range(1, g.max_lead_time_h + 1):
            m = model.get((g.gauge_id, lead))
            if m is None:
                break
            uses_p = any(f.startswith("precip:") for f in m.feature_ids)
            x = latest_features(target, ups, m.lookback_h, now_index, p if uses_p else None)
            out.append(float(x @ m.weights + m.intercept))
        if not out:
            raise DataError(f"stage model has no entry for gauge {g.gauge_id}")
        return np.array(out)
    L = min(g.max_lead_time_h, model.cfg.max_lead_h)
    cut = now_index + 1
    inputs = GaugeInputs(g.gauge_id, target.with_values(target.values[:cut]), ups, p)
    dist = model.forecast(inputs, now_index, L)
    return np.array([cmal_median(dist.step(i)) for i in range(L)])


def cmd_forecast(args, cfg):
    art, out = Path(args.artifacts), Path(args.out)
    data = Path(args.data) if args.data else art / "data"
    now = parse_timestamp(args.now)
    gauges = _load_gauges(data, cfg)
    stages, precip = _load_stages(data), _load_precip(data)
    kind, model = _load_stage_model(art)
    acfg = cfg["alerting"]
    externals = [alerting.read_external_forecast(p) for p in args.external or []]
    n_alerts = 0
    for g in gauges:
        target = _target(g, stages)
        i = target.index_of(now)
        if not 0 <= i < len(target) or np.isnan(target.values[i]):
            raise DataError(f"{g.gauge_id}: no observed stage at {args.now}")
        current = float(target.values[i])
        fc = forecast_gauge(kind, model, g, stages, precip, i)
        lines = ["lead_h,valid_at,stage_m"]
        for k, v in enumerate(fc, start=1):
            lines.append(f"{k * target.step_h:g},{format_timestamp(now + k * target.step)},{v!r}")
        atomic_write_text(out / f"forecast_{g.gauge_id}.csv", "\n".join(lines) + "\n")
        alerts = []
        a = alerting.evaluate_trigger(fc, g, current, now, target.step_h, acfg["closed_threshold"])
        if a is not None:
            alerts.append(a)
        for ext in externals:
            if ext.gauge_id == g.gauge_id:
                b = alerting.evaluate_external(ext, g, current, acfg["closed_threshold"])
                if b is not None:
                    alerts.append(b)
        inund, dem = load_inundation_model(art / "inundation" / g.gauge_id)
        for a in alerts:
            a = alerting.attach_inundation(a, inund, out, dem)
            rec = alerting.emit_alert(a, out, acfg["webhook_url"] or None, acfg["suppression_window_h"],
                                      acfg["suppression_rise_m"], acfg["webhook_attempts"],
                                      acfg["webhook_backoff_s"])
            n_alerts += rec.status == "emitted"
            print(f"{g.gauge_id}: {a.severity} alert ({a.source}) max {a.max_forecast_stage_m:.3f} m "
                  f"at {format_timestamp(a.valid_at)}: {rec.status}"
                  + (f", webhook {rec.webhook}" if rec.webhook else ""))
        if not alerts:
            print(f"{g.gauge_id}: forecast max {fc.max():.3f} m, no alert")
    print(f"{n_alerts} alert(s) emitted")
    return EXIT_OK


# -- evaluate ------------------------------------------------------------------------------------


def _load_extents(path: Path):
    if path.suffix == ".json":
        cat = read_event_catalog(path)
        return cat.gauge_id, [e.extent for e in cat.events]
    return path.stem, [read_ascii_grid(path)]


def _extent_rows(gid, model_name, scheme, fold, pred, truth):
    sc = evalkit.extent_scores(pred, truth)
    return [evalkit.MetricRow(gid, model_name, scheme, fold, m, getattr(sc, m))
            for m in ("precision", "recall", "f1")]


def evaluate_linear_loyo(g, stages, precip, lcfg, lead, spec):
    """Leave-one-year-out skill of the ridge model at one lead time."""
    target, ups = _target(g, stages), _upstreams(g, stages)
    p = precip.get(g.basin) if lcfg["use_precip"] else None
    rows = build_design_matrix(target, ups, lcfg["lookback_h"], lead, p)
    times = [target.t0 + r.t_index * target.step for r in rows]
    lam = lcfg["l2_lambda"] if lcfg["l2_lambda"] >= 0 else None
    out, series = [], None
    for fold in evalkit.split_folds(timestamps=times, spec=spec):
        tr = [rows[i] for i in fold.train]
        va = [rows[i] for i in fold.validation]
        if len(va) < 2:
            continue
        use = lam
        if use is None:
            a, b = _split_rows(tr, lcfg["validation_fraction"])
            use = select_lambda(a, b) if b else 1e-2
        m = train_linear(tr, use, g.gauge_id, lead, lcfg["lookback_h"])
        obs = np.array([r.target for r in va])
        pers = target.values[[r.t_index for r in va]]
        ps = evalkit.PairedSeries(obs, predict_rows(m, va), pers)
        out += _stage_rows(g.gauge_id, "linear", fold.name, ps)
        series = ([times[i] for i in fold.validation], obs, {"linear": ps.computed, "persistence": pers})
    return out, series


def _stage_rows(gid, name, fold, ps):
    rows = [evalkit.MetricRow(gid, name, "loyo", fold, "nse", evalkit.nse(ps)),
            evalkit.MetricRow(gid, name, "loyo", fold, "rmse", evalkit.rmse(ps))]
    if ps.persistence is not None and np.any(ps.observed != ps.persistence):
        rows.append(evalkit.MetricRow(gid, name, "loyo", fold, "persistent_nse", evalkit.persistent_nse(ps)))
    return rows


def evaluate_lstm_loyo(model: LstmModel, gauges, stages, precip, lead, spec):
    """Retrain the LSTM configuration on each leave-one-year fold."""
    cfg = model.cfg
    inputs = [GaugeInputs(g.gauge_id, _target(g, stages), _upstreams(g, stages), precip.get(g.basin))
              for g in gauges]
    ref = inputs[0].stage
    times = ref.times()
    rows = []
    for fold in evalkit.split_folds(timestamps=times, spec=spec):
        val = np.zeros(len(ref), dtype=bool)
        val[fold.validation] = True
        masks_tr, masks_va = [], []
        for gi in inputs:
            n = len(gi.stage)
            v = np.zeros(n, dtype=bool)
            v[: min(n, len(val))] = val[:n]
            # drop training windows whose targets reach into the validation year
            near = np.convolve(v.astype(int), np.ones(cfg.max_lead + 1, dtype=int), mode="full")[:n] > 0
            masks_tr.append(~v & ~near)
            masks_va.append(v)
        norms = fit_normalizers(inputs, masks_tr)
        prepared = [prepare_gauge(gi, norms[gi.gauge_id], cfg) for gi in inputs]
        tr = make_dataset(prepared, cfg, masks_tr)
        va = make_dataset(prepared, cfg, masks_va)
        if len(tr) == 0 or len(va) < 2:
            continue
        res = train_lstm(tr, cfg)
        med = dataset_medians(res.params, va, cfg, lead)
        for gi_idx, pg in enumerate(prepared):
            sel = va.windows[:, 0] == gi_idx
            if sel.sum() < 2:
                continue
            ts = va.windows[sel, 1]
            obs = pg.raw_stage[ts + lead]
            ps = evalkit.PairedSeries(obs, med[sel], pg.raw_stage[ts])
            rows += _stage_rows(pg.gauge_id, "lstm", fold.name, ps)
    return rows


def evaluate_inundation(gid, kind, cat: EventCatalog, dem, cfg, scheme, spec):
    if scheme == "leo":
        folds = evalkit.split_folds(stages=cat.stages, spec=spec)
    else:
        ts = [e.timestamp for e in cat.events]
        if any(t is None for t in ts):
            raise DataError(f"{gid}: leave-one-year folds need event timestamps")
        folds = evalkit.split_folds(timestamps=ts, spec=spec)
    t, m = cfg["threshold"], cfg["manifold"]
    rows, example = [], None
    for fold in folds:
        sub = cat.subset(fold.train)
        thr = train_thresholding(sub, t["minimal_ratio"], t["dilation_slope"])
        stack = None
        if kind == "manifold":
            stack = build_height_stack(sub, dem, thr, m["factor"], omega=m["omega"], tol=m["tol"],
                                       max_sweeps=m["max_sweeps"])
        for i in fold.validation:
            ev = cat.events[i]
            pred = predict_extent(thr, ev.stage_m) if stack is None else stage_to_depth(stack, dem, ev.stage_m)[0]
            rows += _extent_rows(gid, kind, scheme, f"{fold.name}:{i}", pred, ev.extent)
            example = (pred, ev.extent, f"{gid} {kind} {fold.name} stage {ev.stage_m:.2f} m")
    return rows, example


def cmd_evaluate(args, cfg):
    report = Path(args.report)
    rows, figures = [], []
    ecfg = cfg["evaluate"]
    scheme = args.scheme
    spec = evalkit.FoldSpec("leave-extreme-out" if scheme == "leo" else "leave-one-year",
                            ecfg["leo_margin_m"], ecfg["year_start_month"])
    extra = {"scheme": scheme}
    examples = []

    if args.pred or args.truth:
        if not (args.pred and args.truth):
            raise UsageError("--pred and --truth must be given together")
        gid, preds = _load_extents(Path(args.pred))
        _, truths = _load_extents(Path(args.truth))
        if len(preds) != len(truths):
            raise DataError("prediction and truth hold different numbers of extents")
        for i, (p, t) in enumerate(zip(preds, truths)):
            rows += _extent_rows(gid, "given", "pair", str(i), p, t)
        examples.append((preds[0], truths[0], f"{gid} extent 0"))
    else:
        if not args.artifacts or not args.data:
            raise UsageError("evaluate needs --artifacts and --data (or --pred/--truth)")
        art, data = Path(args.artifacts), Path(args.data)
        gauges = _load_gauges(data, cfg)
        if scheme == "loyo" and ((art / LINEAR_ARTIFACT).exists() or (art / LSTM_ARTIFACT).exists()):
            stages, precip = _load_stages(data), _load_precip(data)
            kind, model = _load_stage_model(art)
            lead = ecfg["lead_h"]
            if kind == "linear":
                for g in gauges:
                    r, series = evaluate_linear_loyo(g, stages, precip, cfg["linear"], lead, spec)
                    rows += r
                    if series is not None:
                        path = report.with_name(f"{report.stem}_{g.gauge_id}_hydrograph.png")
                        figures.append(plotting.plot_hydrograph(*series, path,
                                                                f"{g.gauge_id}, lead {lead} h"))
            else:
                rows += evaluate_lstm_loyo(model, gauges, stages, precip, min(lead, model.cfg.max_lead), spec)
            extra["lead_h"] = lead
        for g in gauges:
            inund_dir = art / "inundation" / g.gauge_id
            cat_path = data / "catalogs" / g.gauge_id / "catalog.json"
            if not (inund_dir / INUNDATION_META).exists() or not cat_path.exists():
                continue
            with open(inund_dir / INUNDATION_META) as fh:
                kind = json.load(fh)["kind"]
            dem = read_ascii_grid(inund_dir / "dem.asc") if kind == "manifold" else None
            r, ex = evaluate_inundation(g.gauge_id, kind, read_event_catalog(cat_path), dem, cfg, scheme, spec)
            rows += r
            if ex is not None:
                examples.append(ex)
    if not rows:
        raise InsufficientDataError("nothing to evaluate: no usable folds or models")

    evalkit.write_report_csv(report, rows)
    for metric in sorted({r.metric for r in rows} & {"nse", "persistent_nse", "f1"}):
        figures.append(plotting.plot_metric_boxes(rows, metric, report.with_name(f"{report.stem}_{metric}.png")))
    for k, (p, t, title) in enumerate(examples):
        figures.append(plotting.plot_extent_confusion(p, t, report.with_name(f"{report.stem}_extent_{k}.png"), title))
    extra["figures"] = [f.name for f in figures]
    extra["wilcoxon"] = _wilcoxon_summary(rows)
    summary_path = report.with_suffix(".summary.json")
    evalkit.write_summary_json(summary_path, rows, extra)
    for model_name, schemes in evalkit.summarize(rows).items():
        for sch, metrics in schemes.items():
            for metric, s in metrics.items():
                print(f"{model_name} {sch} {metric}: median {s['median']:.4f} "
                      f"[{s['min']:.4f}, {s['max']:.4f}] over {s['n_gauges']} gauge(s)")
    print(f"report: {report}; summary: {summary_path}")
    return EXIT_OK


def _wilcoxon_summary(rows):
    """Paired test of per-gauge mean NSE between stage models, when possible."""
    per = {}
    for r in rows:
        if r.metric == "persistent_nse":
            per.setdefault(r.model, {}).setdefault(r.gauge_id, []).append(r.value)
    models = sorted(per)
    if len(models) < 2:
        return None
    a, b = models[:2]
    common = sorted(set(per[a]) & set(per[b]))
    try:
        res = evalkit.wilcoxon_signed_rank([np.mean(per[a][g]) for g in common],
                                           [np.mean(per[b][g]) for g in common])
    except InsufficientDataError as exc:
        return {"models": [a, b], "error": str(exc)}
    return {"models": [a, b], "statistic": res.statistic, "pvalue": res.pvalue, "n": res.n,
            "method": res.method}


# -- render ---------------------------------------------------------------------------------------


def cmd_render(args, cfg):
    r = read_ascii_grid(args.grid)
    scale = render_pgm(r, args.out, args.vmax)
    print(f"rendered {args.grid} -> {args.out} (white = {scale['white_value']:g})")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="floodcast",
        description="Stage forecasting, inundation mapping and flood alerts.",
        epilog="Configuration keys (INI sections) and defaults:\n" + cfgmod.describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
        sp.set_defaults(func=func)
        return sp

    sp = add("qc", cmd_qc, "clean stage series and aggregate precipitation frames")
    sp.add_argument("--in", dest="in_dir", required=True, help="raw data directory")
    sp.add_argument("--out", required=True, help="output data directory")
    sp.add_argument("--history", help="directory of clean historical stage CSVs for screening statistics")

    sp = add("synth", cmd_synth, "write a synthetic raw data directory")
    sp.add_argument("--scenario", default="flood", choices=synthdata.SCENARIOS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--hours", type=int, default=24 * 150, help="record length in hours")
    sp.add_argument("--events", type=int, default=12, help="inundation events in the catalog")

    sp = add("train-stage", cmd_train_stage, "train a stage forecasting model")
    sp.add_argument("--model", required=True, choices=("linear", "lstm"))
    sp.add_argument("--data", required=True, help="QC'd data directory")
    sp.add_argument("--out", required=True,
                    help=f"artifact file (use {LINEAR_ARTIFACT} or {LSTM_ARTIFACT} inside the artifacts dir)")

    sp = add("train-inundation", cmd_train_inundation, "train an inundation model for one gauge")
    sp.add_argument("--model", required=True, choices=("threshold", "manifold"))
    sp.add_argument("--catalog", required=True, help="event catalog JSON")
    sp.add_argument("--dem", required=True, help="DEM ASCII grid")
    sp.add_argument("--out", required=True, help="model directory (artifacts/inundation/<gauge>)")

    sp = add("forecast", cmd_forecast, "forecast stages, trigger alerts and map inundation")
    sp.add_argument("--artifacts", required=True)
    sp.add_argument("--now", required=True, help="issue time, ISO-8601 UTC")
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="QC'd data directory (default: ARTIFACTS/data)")
    sp.add_argument("--external", nargs="*", help="external forecast JSON files")

    sp = add("evaluate", cmd_evaluate, "cross-validate models and write a report")
    sp.add_argument("--scheme", required=True, choices=("loyo", "leo"))
    sp.add_argument("--artifacts")
    sp.add_argument("--data")
    sp.add_argument("--report", required=True, help="report CSV path; summary and figures go alongside")
    sp.add_argument("--pred", help="predicted extent grid or catalog (scores it against --truth)")
    sp.add_argument("--truth", help="true extent grid or catalog")

    sp = add("render", cmd_render, "render an ASCII grid as a grayscale PGM")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vmax", type=float, help="value mapped to white (default: grid maximum)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = cfgmod.load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
