"""Command-line entry point.

Every subcommand prints a JSON summary on stdout; with ``--out DIR`` the
summary and the artifacts (CSV tables, event JSON) are also written there.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time

import numpy as np
import pandas as pd

from . import agent as ag
from . import bandit, wavelet
from .config import ConfigError, RunConfig, load_config, module_seed, to_dict
from .data import DataError, DatasetBundle, load_csv, normalize
from .evaluation import EmptyActual, score_events, traj_metrics
from .features import build_features, label_horizons
from .pipeline import (InsufficientHistory, StageError, WorkflowId, oracle_reconstruction,
                       run_workflow)
from .rba import EventSet, extract_events, fuse_events
from .synth import synth_generate

log = logging.getLogger("rampwise")

BASE_ENV = "RAMPWISE_EXPERIENCE_BASE"
DATA_ERRORS = (DataError, EmptyActual, InsufficientHistory, ag.TooShort, wavelet.SeriesTooShort,
               FileNotFoundError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(a) for k, a in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(a) for a in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if hasattr(v, "value") and isinstance(getattr(v, "value"), str):
        return v.value
    return v


def _strip_clock(v):
    # wall-clock durations are not reproducible; --frozen-time drops them
    if isinstance(v, dict):
        return {k: _strip_clock(a) for k, a in v.items() if k not in ("timings", "total_time", "elapsed")}
    if isinstance(v, list):
        return [_strip_clock(a) for a in v]
    return v


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        elif not isinstance(v, list):
            out[key] = v
    return out


class Context:
    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.out = args.out
        self.frozen = args.frozen_time is not None
        self.now = float(args.frozen_time) if self.frozen else time.time()
        if self.out:
            os.makedirs(self.out, exist_ok=True)

    def path(self, name: str) -> str | None:
        return os.path.join(self.out, name) if self.out else None

    def write_text(self, name: str, text: str):
        if self.out:
            with open(self.path(name), "w") as fh:
                fh.write(text)

    def write_csv(self, name: str, frame: pd.DataFrame):
        if self.out:
            frame.to_csv(self.path(name), index=False, float_format="%.10g")

    def write_metrics(self, name: str, metrics: dict):
        flat = _flat(_jsonable(metrics))
        self.write_csv(name, pd.DataFrame({"metric": list(flat), "value": list(flat.values())}))

    def bundle(self) -> DatasetBundle:
        path = getattr(self.args, "data", None) or self.cfg.data.path
        if not path:
            raise UsageError("no dataset: pass --data or set [data] path in the config")
        schema = self.cfg.data.schema()
        if getattr(self.args, "rated_power", None) is not None:
            schema["rated_power"] = self.args.rated_power
        return load_csv(path, schema).longest_segment()


def _events_frame(events) -> pd.DataFrame:
    rows = [e.to_dict() for e in events]
    cols = ["kind", "onset", "end", "duration", "magnitude", "direction", "slope_variance", "symmetry", "band"]
    return pd.DataFrame(rows, columns=cols)


def _bundle_csv(bundle: DatasetBundle) -> pd.DataFrame:
    df = pd.DataFrame({"timestamp": bundle.power.timestamps, "power": bundle.power.values})
    for k in bundle.covariates.names:
        df[k] = bundle.covariates.columns[k]
    return df


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(ctx: Context) -> dict:
    a = ctx.args
    scfg = dataclasses.replace(ctx.cfg.synth, seed=ctx.cfg.seed)
    changes = {k: v for k, v in (("ramps", a.ramps), ("n", a.n), ("noise_sigma", a.noise_sigma)) if v is not None}
    scfg = dataclasses.replace(scfg, **changes)
    bundle, truth = synth_generate(scfg)
    ctx.write_csv("data.csv", _bundle_csv(bundle))
    ctx.write_text("truth.json", truth.to_json())
    return {"n": len(bundle), "planted": len(truth), "rated_power": bundle.power.rated_power,
            "seed": scfg.seed, "covariates": bundle.covariates.names,
            "truth": [e.to_dict() for e in truth]}


def cmd_ingest(ctx: Context) -> dict:
    b = ctx.bundle()
    norm = normalize(b.power)
    ctx.write_csv("normalized.csv", pd.DataFrame({"timestamp": norm.timestamps, "power": norm.values}))
    return {"rows": len(b), "rated_power": b.power.rated_power, "step": b.power.step,
            "imputed": int(b.imputed.sum()), "violations": norm.violations,
            "covariates": b.covariates.names, "start": int(b.power.timestamps[0]),
            "stop": int(b.power.timestamps[-1])}


def cmd_decompose(ctx: Context) -> dict:
    b = ctx.bundle()
    bands = wavelet.decompose(normalize(b.power).values, ctx.cfg.wavelet, b.power.timestamps)
    df = pd.DataFrame({"timestamp": b.power.timestamps, **bands.bands})
    ctx.write_csv("bands.csv", df)
    stats = wavelet.band_stats(bands)
    ctx.write_csv("band_stats.csv", pd.DataFrame([{"band": k, **v} for k, v in stats.items()]))
    err = float(np.max(np.abs(wavelet.reconstruct(bands) - normalize(b.power).values)))
    return {"bands": list(bands.names), "stats": stats, "max_reconstruction_error": err}


def cmd_events(ctx: Context) -> dict:
    b = ctx.bundle()
    x = normalize(b.power).values
    ev = extract_events(x, ctx.cfg.rba)
    out = {"signal": ev}
    if ctx.args.bands:
        bands = wavelet.decompose(x, ctx.cfg.wavelet)
        per = {k: extract_events(v, ctx.cfg.rba, band=k) for k, v in bands.bands.items()}
        out.update(per)
        out["fused"] = fuse_events(per.values())
    for name, es in out.items():
        ctx.write_text(f"events_{name}.json", es.to_json())
        ctx.write_csv(f"events_{name}.csv", _events_frame(es))
    return {"counts": {k: {"significant": len(v.significant()), "total": len(v)} for k, v in out.items()},
            "events": [e.to_dict() for e in ev.significant()]}


def cmd_features(ctx: Context) -> dict:
    b = ctx.bundle()
    fm = build_features(b, ctx.cfg.workflow_config().features)
    if ctx.out:
        np.savez_compressed(ctx.path("features.npz"), values=fm.values, names=np.array(fm.names),
                            categories=np.array(fm.categories))
    cats = {c: len(ix) for c, ix in fm.category_index().items()}
    ctx.write_csv("categories.csv", pd.DataFrame({"category": list(cats), "columns": list(cats.values())}))
    return {"rows": fm.shape[0], "columns": fm.shape[1], "categories": cats}


def cmd_select(ctx: Context) -> dict:
    b = ctx.bundle()
    wcfg = ctx.cfg.workflow_config()
    x = normalize(b.power).values
    fm = build_features(b, wcfg.features)
    ref = extract_events(x, wcfg.rba)
    labels = label_horizons(ref, None, wcfg.horizons, n=len(x))
    cut = int(len(x) * wcfg.train_frac)
    sub = bandit.select(fm.values[:cut], labels.occurrence[:cut], wcfg.bandit, fm.names, fm.categories)
    table = sub.table()
    ctx.write_csv("selection.csv", pd.DataFrame(table))
    ctx.write_text("selection.json", sub.to_json())
    return {"selected": len(table), "top": table[:10],
            "rewards": [r["reward"] for r in sub.log]}


def _workflow(ctx: Context):
    b = ctx.bundle()
    return run_workflow(WorkflowId(ctx.args.workflow), b, ctx.cfg.workflow_config())


def cmd_train(ctx: Context) -> dict:
    res = _workflow(ctx)
    ctx.write_metrics("metrics.csv", res.metrics)
    if not ctx.frozen:
        ctx.write_csv("timings.csv", pd.DataFrame({"stage": list(res.timings),
                                                   "seconds": list(res.timings.values())}))
    return res.summary()


def cmd_predict(ctx: Context) -> dict:
    res = _workflow(ctx)
    ev = res.events_json()
    ctx.write_text("predictions.json", json.dumps(ev, sort_keys=True))
    frames = [_events_frame(es).assign(horizon=h) for h, es in sorted(res.events.items())]
    if frames:
        ctx.write_csv("predictions.csv", pd.concat(frames, ignore_index=True))
    ctx.write_text("actual.json", res.actual.to_json())
    return {**res.summary(), "events": ev}


def cmd_reconstruct(ctx: Context) -> dict:
    b = ctx.bundle()
    x = normalize(b.power).values
    if ctx.args.oracle:
        rc = ctx.cfg.reconstruction
        start = min(rc.lookback, len(x) // 2)
        out = oracle_reconstruction(x, start, None, rc, ctx.cfg.rba, ctx.cfg.wavelet)
        traj, lo = out["trajectory"], out["start"]
        summary = {"mode": "oracle", "metrics": out["metrics"], "gated_metrics": out["gated_metrics"]}
    else:
        res = run_workflow(WorkflowId(ctx.args.workflow), b, ctx.cfg.workflow_config())
        if res.trajectory is None:
            raise UsageError(f"workflow {ctx.args.workflow} produces no trajectory")
        traj, lo = res.trajectory, res.span[0]
        summary = {"mode": ctx.args.workflow, **res.summary()}
    idx = np.arange(lo, lo + len(traj))
    ctx.write_csv("trajectory.csv", pd.DataFrame({"timestamp": b.power.timestamps[idx], "actual": x[idx],
                                                  "reconstructed": traj}))
    ctx.write_metrics("metrics.csv", summary.get("metrics", {}))
    return summary


def _load_events(path: str) -> dict[str, EventSet]:
    with open(path) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        return {k: EventSet.from_json(json.dumps(v)) for k, v in raw.items()}
    return {"all": EventSet.from_json(json.dumps(raw))}


def cmd_evaluate(ctx: Context) -> dict:
    a = ctx.args
    out: dict = {}
    if a.pred and a.actual:
        pred, act = _load_events(a.pred), _load_events(a.actual)
        single = next(iter(act.values())) if len(act) == 1 else None
        for k, p in pred.items():
            truth = act.get(k, single)
            if truth is None:
                raise UsageError(f"no actual events for key {k!r}")
            out[k] = score_events(p, truth, ctx.cfg.match).as_dict()
        rows = [{"key": k, **v} for k, v in out.items()]
        ctx.write_csv("event_metrics.csv", pd.DataFrame(rows))
    if a.pred_series and a.actual_series:
        p = pd.read_csv(a.pred_series)
        t = pd.read_csv(a.actual_series)
        col = a.column
        out["trajectory"] = traj_metrics(p[col].to_numpy(float), t[col].to_numpy(float))
        ctx.write_metrics("trajectory_metrics.csv", out["trajectory"])
    if not out:
        raise UsageError("evaluate needs --pred/--actual and/or --pred-series/--actual-series")
    if len(out) == 1 and "all" in out:
        return {"metrics": out["all"]}
    return {"metrics": out}


def _base_path(ctx: Context) -> str:
    path = ctx.args.base or os.environ.get(BASE_ENV)
    if not path:
        raise UsageError(f"no experience base: pass --base or set {BASE_ENV}")
    return path


def _context(ctx: Context) -> ag.ContextFingerprint:
    if getattr(ctx.args, "context", None):
        return ag.ContextFingerprint(tuple(json.loads(ctx.args.context)))
    return ag.fingerprint(ctx.bundle(), ctx.cfg.agent, seed=module_seed(ctx.cfg.seed, "fingerprint"))


def cmd_agent_run(ctx: Context) -> dict:
    cfg = ctx.cfg.agent
    base = ag.ExperienceBase.load(_base_path(ctx))
    if not base.records and ctx.args.bootstrap:
        ag.bootstrap(base, now=ctx.now, seed=module_seed(ctx.cfg.seed, "bootstrap"), config=cfg)
    bundle = ctx.bundle()
    fp = ag.fingerprint(bundle, cfg, seed=module_seed(ctx.cfg.seed, "fingerprint"))
    rng = np.random.default_rng(module_seed(ctx.cfg.seed, "agent") + len(base.records))
    decision = ag.select_workflow(fp, base, cfg, rng, now=ctx.now)
    t0 = time.perf_counter()
    res = run_workflow(WorkflowId(decision.workflow), bundle, ctx.cfg.workflow_config())
    exec_time = 0.0 if ctx.frozen else time.perf_counter() - t0
    m = res.metrics
    # the reward's MAE term is in MW; workflows without a trajectory get no
    # trajectory credit
    r2 = m["r2"] if math.isfinite(m.get("r2", math.nan)) else 0.0
    mae = m["mae"] * bundle.power.rated_power if math.isfinite(m.get("mae", math.nan)) else 500.0
    rec = ag.ExperienceRecord.create(fp, decision.workflow, {"r2": r2, "mae": mae, "f1": m["f1"]},
                                     exec_time, ctx.now, "real")
    ag.record_execution(base, rec)
    ctx.write_text("decision.json", json.dumps(_jsonable(decision.rationale), sort_keys=True))
    return {"workflow": decision.workflow, "mode": decision.mode, "reward": rec.reward,
            "fingerprint": fp.as_dict(), "rationale": decision.rationale, "workflow_summary": res.summary(),
            "records": len(base.records), "base": base.path}


def cmd_agent_inspect(ctx: Context) -> dict:
    base = ag.ExperienceBase.load(_base_path(ctx))
    fp = _context(ctx)
    st = ag.agent_state(fp, base, ctx.cfg.agent, now=ctx.now)
    counts = {"synthetic": sum(r.source == "synthetic" for r in base.records),
              "real": sum(r.source == "real" for r in base.records)}
    ctx.write_csv("arms.csv", pd.DataFrame([{"workflow": w, "n": st["counts"][w], "q": st["q"][w],
                                             "ucb": st["ucb"][w], "share": st["shares"][w]}
                                            for w in ctx.cfg.agent.workflows]))
    return {"records": counts, "fingerprint": fp.as_dict(), "state": st,
            "consecutive_exploits": base.state.get("consecutive_exploits", 0)}


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "decompose": cmd_decompose, "events": cmd_events,
    "features": cmd_features, "select": cmd_select, "train": cmd_train, "predict": cmd_predict,
    "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate, "agent-run": cmd_agent_run,
    "agent-inspect": cmd_agent_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="directory for the summary and artifacts")
    common.add_argument("--frozen-time", type=float, default=None,
                        help="epoch seconds used as 'now'; also drops wall-clock timings")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (JSON-parsed), e.g. rba.k_sigma=2.5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="rampwise", description="Event-first wind-power ramp forecasting.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    def data(sp):
        sp.add_argument("--data", help="CSV with timestamp, power and covariate columns")
        sp.add_argument("--rated-power", type=float)
        return sp

    def wf(sp):
        sp.add_argument("--workflow", default="W3", choices=[w.value for w in WorkflowId])
        return sp

    s = add("synth", "generate a synthetic corpus with planted ramps")
    s.add_argument("--ramps", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--noise-sigma", type=float)
    data(add("ingest", "load, validate and normalise a dataset"))
    data(add("decompose", "wavelet bands and band statistics"))
    data(add("events", "ramp event extraction")).add_argument("--bands", action="store_true",
                                                              help="also extract per band and fuse")
    data(add("features", "causal feature matrix"))
    data(add("select", "bandit feature selection"))
    wf(data(add("train", "run a workflow and report training/evaluation metrics")))
    wf(data(add("predict", "run a workflow and write predicted events per horizon")))
    r = wf(data(add("reconstruct", "event-guided trajectory reconstruction")))
    r.add_argument("--oracle", action="store_true", help="feed true bands and events")
    e = add("evaluate", "score predicted events / trajectories against actuals")
    e.add_argument("--pred")
    e.add_argument("--actual")
    e.add_argument("--pred-series")
    e.add_argument("--actual-series")
    e.add_argument("--column", default="value")
    a = data(add("agent-run", "fingerprint, select a workflow, run it and record the result"))
    a.add_argument("--base", help=f"experience base path (default ${BASE_ENV})")
    a.add_argument("--bootstrap", action="store_true", help="seed an empty base with expert priors")
    i = data(add("agent-inspect", "dump Q/UCB/epsilon/contradiction state as JSON"))
    i.add_argument("--base", help=f"experience base path (default ${BASE_ENV})")
    i.add_argument("--context", help="JSON list fingerprint instead of --data")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        ctx = Context(args, cfg)
        summary = {"command": args.command, "seed": cfg.seed, "generated_at": ctx.now,
                   **COMMANDS[args.command](ctx)}
        if ctx.frozen:
            summary = _strip_clock(summary)
        text = json.dumps(_jsonable(summary), sort_keys=True, indent=1)
        ctx.write_text("summary.json", text + "\n")
        if args.command == "agent-run":
            ctx.write_text("config.json", json.dumps(_jsonable(to_dict(cfg)), sort_keys=True, indent=1))
        print(text)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"rampwise {args.command}: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"rampwise {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        code = 2 if isinstance(exc.__cause__, DATA_ERRORS) else 3
        print(f"rampwise {args.command}: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"rampwise {args.command}: internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
