"""``liqguard`` command line: staged pipeline over one JSON config.

Stages write into ``paths.output_dir``. Each stage records a manifest with
the hashes of its inputs; rerunning an up-to-date stage does nothing unless
``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from decimal import Decimal
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (
    AgentParams, assess_risk, build_profile, recommend, recommendation_report,
    sensitivity_stability, validate_feasibility,
)
from .config import ConfigError, file_hash, load_config, provenance
from .detection import DetectionParams, MarginPolicy
from .hazard import (
    HazardEngine, HazardError, estimate_baseline, fit_cox, load_external_scores, save_engines,
)
from .ingestion import (
    EVENT_TYPES, IngestError, build_price_history, infer_wallet_balances, load_price_history,
    parse_transactions, save_price_history,
)
from .lending import LendingError, load_reserve_configs
from .replay import (
    CSV_HEADER, CohortContext, ReplayConfig, ReplayProfile, evaluate_cohort, sample_checkpoints,
)
from .simulator import user_snapshots
from .survival import (
    TASKS, EventPairTask, FeatureConfig, extract_all_pairs, write_feature_manifest,
)
from .trend import TrendParams

logger = logging.getLogger("liqguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PIPELINE = 0, 1, 2, 3

COMMANDS = ("ingest", "fit", "assess", "recommend", "replay", "report", "sensitivity")
UPSTREAM = {"ingest": None, "fit": "ingest", "assess": "fit", "recommend": "fit",
            "replay": "fit", "report": "replay", "sensitivity": "fit"}
RETURN_PERIOD_CAP = 1e300


class DataError(Exception):
    pass


class PipelineError(Exception):
    pass


# --------------------------------------------------------------------------
# Artifact helpers


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, Decimal):
        return str(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _finite(x):
    return float(x) if x is not None and np.isfinite(x) else None


class Run:
    def __init__(self, cfg: dict, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.out = Path(cfg["paths"]["output_dir"])
        self.prov = provenance(cfg)

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, data: dict) -> Path:
        p = self.path(name)
        p.write_text(_dump({"provenance": self.prov, **data}), encoding="utf-8")
        return p

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        buf = io.StringIO()
        buf.write(f"# liqguard {__version__} config={self.prov['config_hash']}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        p = self.path(name)
        p.write_text(buf.getvalue(), encoding="utf-8")
        return p

    def read_json(self, name: str) -> dict:
        return json.loads(self.path(name).read_text(encoding="utf-8"))

    # -- manifests --------------------------------------------------------

    def manifest_path(self, stage: str) -> Path:
        return self.path(f"stage-{stage}.json")

    def require(self, stage: str) -> None:
        up = UPSTREAM[stage]
        if up and not self.manifest_path(up).is_file():
            raise PipelineError(f"missing stage: {up}")

    def inputs_for(self, stage: str) -> dict[str, str]:
        if stage == "ingest":
            paths = self.cfg["paths"]
            files = {"transactions": paths["transactions"], "reserves": paths["reserves"]}
            for k, f in files.items():
                if not f or not Path(f).is_file():
                    raise DataError(f"{k} file not found: {f}")
            return {k: file_hash(f) for k, f in files.items()}
        up = UPSTREAM[stage]
        manifest = json.loads(self.manifest_path(up).read_text(encoding="utf-8"))
        return {name: file_hash(self.path(name)) for name in manifest["outputs"]}

    def up_to_date(self, stage: str, inputs: dict) -> bool:
        mp = self.manifest_path(stage)
        if self.force or not mp.is_file():
            return False
        m = json.loads(mp.read_text(encoding="utf-8"))
        return (m.get("inputs") == inputs and m.get("provenance") == self.prov
                and all(self.path(o).is_file() for o in m.get("outputs", [])))

    def finish(self, stage: str, inputs: dict, outputs: list[str]) -> None:
        self.manifest_path(stage).write_text(_dump(
            {"stage": stage, "inputs": inputs, "outputs": sorted(outputs),
             "provenance": self.prov}), encoding="utf-8")

    # -- loaders ------------------------------------------------------------

    def configs(self):
        return load_reserve_configs(self.cfg["paths"]["reserves"])

    def log(self):
        return parse_transactions(self.cfg["paths"]["transactions"])

    def engines(self) -> dict[str, HazardEngine]:
        data = self.read_json("engines.json")["engines"]
        ext = self.cfg["paths"]["external_scores"]
        return {e: HazardEngine.from_json(d, load_external_scores(ext[e]) if e in ext else None)
                for e, d in data.items()}

    def wallets(self):
        raw = self.read_json("wallets.json")["wallets"]
        return {u: {a: Decimal(v) for a, v in w.items()} for u, w in raw.items()}

    def checkpoints(self) -> list[ReplayProfile]:
        return [ReplayProfile(u, int(t)) for u, t in self.read_json("checkpoints.json")["profiles"]]


# --------------------------------------------------------------------------
# Parameter objects from config


def trend_params(cfg) -> TrendParams:
    return TrendParams(**cfg["trend"])


def agent_params(cfg) -> AgentParams:
    a = cfg["agent"]
    return AgentParams(float(a["multiplier"]), Decimal(str(a["alpha_min"])),
                       int(a["history_depth"]), trend_params(cfg))


def replay_config(cfg) -> ReplayConfig:
    d, r = cfg["detection"], cfg["replay"]
    return ReplayConfig(
        block_time=int(r["block_time"]), min_lead=r["min_lead"],
        dust_threshold=float(r["dust_threshold"]),
        policy=MarginPolicy(float(d["base"]), float(d["per_day_increment"]), float(d["cap"])),
        detection=DetectionParams(int(d["adaptive_base"]), int(d["hybrid_period"]),
                                  int(d["dense_step"]), float(d["milestone_step"]),
                                  float(d["dust_ratio"])),
        time_tolerance=float(d["time_tolerance"]), utilization=float(r["utilization"]),
        tail_seconds=int(r["tail_seconds"]))


def feature_config(cfg) -> FeatureConfig:
    return FeatureConfig(**cfg["features"])


def workers(cfg) -> int:
    w = cfg.get("workers")
    return int(w) if w else (os.cpu_count() or 1)


# --------------------------------------------------------------------------
# Stages


def stage_ingest(run: Run) -> list[str]:
    log = run.log()
    configs = run.configs()
    oracle = build_price_history(log)
    unknown = sorted({r.asset for r in log} - set(configs))
    if unknown:
        raise DataError(f"assets without reserve config: {', '.join(unknown)}")
    factor = run.cfg["replay"]["safety_factor"]
    wallets = {u: {a: str(v) for a, v in infer_wallet_balances(log.for_user(u), factor).items()}
               for u in log.users}
    save_price_history(oracle, run.path("prices.json"))
    run.write_json("parse_report.json", {"report": log.report.to_json(),
                                         "users": len(log.users), "assets": oracle.assets})
    run.write_json("wallets.json", {"safety_factor": factor, "wallets": wallets})
    return ["parse_report.json", "prices.json", "wallets.json"]


def _pairs(run: Run, log, oracle, configs, wallets, window_end=None):
    snaps = user_snapshots({u: log.for_user(u) for u in log.users}, oracle, configs, wallets,
                           run.cfg["replay"]["utilization"])
    tasks = [EventPairTask(a, b) for a, b in TASKS]
    return extract_all_pairs(log, tasks, log.end_time if window_end is None else window_end,
                             snapshots=snaps, config=feature_config(run.cfg))


def stage_fit(run: Run) -> list[str]:
    cfg = run.cfg
    log = run.log()
    configs = run.configs()
    oracle = load_price_history(run.path("prices.json"))
    wallets = run.wallets()
    times = np.array([r.timestamp for r in log], dtype=float)
    train_end = int(np.quantile(times, cfg["sampling"]["train_end_quantile"], method="lower"))
    train_log = log.until(train_end)
    train_pairs = _pairs(run, train_log, oracle, configs, wallets, train_end)
    ext = cfg["paths"]["external_scores"]
    engines, summary = {}, {}
    for e in EVENT_TYPES:
        records = [r for task, rs in train_pairs.items() if task.outcome_event == e for r in rs]
        if e in ext:
            model = load_external_scores(ext[e])
        else:
            model = fit_cox(records, float(cfg["ridge"]))
        baseline = estimate_baseline(model, records, float(cfg["epsilon"]))
        engines[e] = HazardEngine(model, baseline, float(cfg["horizon_days"]))
        summary[e] = {"records": len(records), "events": int(sum(r.event for r in records)),
                      "model": model.kind, "iterations": model.iterations}
    save_engines(engines, run.path("engines.json"), {"provenance": run.prov,
                                                     "train_end": train_end})
    write_feature_manifest(run.path("features.json"), feature_config(cfg))
    all_pairs = _pairs(run, log, oracle, configs, wallets)
    profiles = sample_checkpoints(all_pairs, log, int(cfg["sampling"]["per_pair"]),
                                  tuple(cfg["sampling"]["window"]), int(cfg["seed"]))
    run.write_json("checkpoints.json", {"profiles": [[p.user_id, p.t_rec] for p in profiles]})
    run.write_json("fit_report.json", {"train_end": train_end, "engines": summary})
    return ["engines.json", "features.json", "checkpoints.json", "fit_report.json"]


def _profile_states(run: Run):
    cfg = run.cfg
    log = run.log()
    configs = run.configs()
    oracle = load_price_history(run.path("prices.json"))
    wallets = run.wallets()
    ctx = CohortContext(log, oracle, configs, wallets)
    depth = int(cfg["agent"]["history_depth"])
    for p in run.checkpoints():
        yield p, build_profile(log.for_user(p.user_id), p.t_rec, oracle, configs,
                               wallets.get(p.user_id, {}), market=ctx.market,
                               history_depth=depth, utilization=cfg["replay"]["utilization"],
                               feature_config=feature_config(cfg))


def stage_assess(run: Run) -> list[str]:
    engines = run.engines()
    tp = trend_params(run.cfg)
    items, rows = [], []
    for p, state in _profile_states(run):
        a = assess_risk(state, engines, tp)
        items.append({"user_id": p.user_id, "t_rec": p.t_rec, **a.to_json()})
        times = state.past_times + [state.t_rec]
        feats = state.past_features + [state.features]
        keys = [(p.user_id, t) for t in times]
        for e in EVENT_TYPES:
            tr = engines[e].return_periods(np.vstack(feats), keys)
            rows += [[p.user_id, p.t_rec, t, e, repr(float(min(v, RETURN_PERIOD_CAP)))]
                     for t, v in zip(times, tr)]
    run.write_json("assessments.json", {"assessments": items})
    run.write_csv("hazard_series.csv",
                  ["user_id", "t_rec", "checkpoint_time", "event", "return_period"], rows)
    return ["assessments.json", "hazard_series.csv"]


def stage_recommend(run: Run) -> list[str]:
    engines = run.engines()
    ap = agent_params(run.cfg)
    dust = float(run.cfg["replay"]["dust_threshold"])
    items = []
    for p, state in _profile_states(run):
        a = assess_risk(state, engines, ap.trend)
        rec = validate_feasibility(recommend(state, a, engines, ap), state.account, dust)
        items.append(recommendation_report(state, a, rec))
    run.write_json("recommendations.json", {"recommendations": items})
    return ["recommendations.json"]


def stage_replay(run: Run) -> list[str]:
    log = run.log()
    configs = run.configs()
    oracle = load_price_history(run.path("prices.json"))
    ctx = CohortContext(log, oracle, configs, run.wallets())
    result = evaluate_cohort(run.checkpoints(), ctx, run.engines(), replay_config(run.cfg),
                             agent_params(run.cfg), workers(run.cfg))
    outcomes = []
    for o in result.outcomes:
        outcomes.append({
            "user_id": o.user_id, "t_rec": o.t_rec, "excluded": o.excluded,
            "baseline_liquidated": o.baseline_liquidated,
            "intervention_liquidated": o.intervention_liquidated,
            "baseline_classification": o.baseline_classification,
            "intervention_classification": o.intervention_classification,
            "action": o.action.to_json() if o.action else None,
            "skipped_futures": o.skipped_futures,
            "baseline_liquidations": [ev.to_json() for ev in o.baseline.liquidations]
            if o.baseline else [],
            "intervention_liquidations": [ev.to_json() for ev in o.intervention.liquidations]
            if o.intervention else [],
        })
    run.write_json("cohort.json", {"metrics": result.metrics.to_json(), "outcomes": outcomes,
                                   "errors": result.errors})
    return ["cohort.json"]


def stage_report(run: Run) -> list[str]:
    data = run.read_json("cohort.json")
    run.write_json("summary.json", {"metrics": data["metrics"], "n_errors": len(data["errors"])})
    rows = []
    for o in data["outcomes"]:
        a = o["action"] or {}
        rows.append([o["user_id"], o["t_rec"], o["excluded"] or "",
                     _flag(o["baseline_liquidated"]), _flag(o["intervention_liquidated"]),
                     a.get("action", ""), a.get("asset", ""), a.get("amount", ""),
                     a.get("iterations", ""), o["skipped_futures"]])
    run.write_csv("profiles.csv", CSV_HEADER, rows)
    return ["summary.json", "profiles.csv"]


def _flag(x):
    return "" if x is None else str(int(x))


def stage_sensitivity(run: Run) -> list[str]:
    engines = run.engines()
    s = run.cfg["sensitivity"]
    states = [st for _, st in _profile_states(run)]
    if not states:
        raise DataError("no checkpoints to evaluate")
    stability = sensitivity_stability(states, engines, trend_params(run.cfg),
                                      float(s["perturbation"]), int(s["trials"]),
                                      int(run.cfg["seed"]))
    run.write_json("sensitivity.json", {"stability": stability, "profiles": len(states),
                                        "perturbation": s["perturbation"], "trials": s["trials"]})
    return ["sensitivity.json"]


STAGES = {"ingest": stage_ingest, "fit": stage_fit, "assess": stage_assess,
          "recommend": stage_recommend, "replay": stage_replay, "report": stage_report,
          "sensitivity": stage_sensitivity}


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liqguard", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"liqguard {__version__}")
    p.add_argument("-c", "--config", help="JSON config (default: $LIQGUARD_CONFIG)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. agent.multiplier=3")
    p.add_argument("--force", action="store_true", help="rerun even if up to date")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("command", choices=COMMANDS)
    return p


def run_command(command: str, cfg: dict, force: bool = False) -> str:
    """Run one stage; returns ``"ran"`` or ``"up-to-date"``."""
    run = Run(cfg, force)
    run.out.mkdir(parents=True, exist_ok=True)
    run.require(command)
    inputs = run.inputs_for(command)
    if run.up_to_date(command, inputs):
        logger.info("%s: up to date", command)
        return "up-to-date"
    outputs = STAGES[command](run)
    run.finish(command, inputs, outputs)
    err = run.path("error.json")
    if err.is_file():
        err.unlink()
    return "ran"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"liqguard: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        status = run_command(args.command, cfg, args.force)
    except (DataError, IngestError, LendingError, FileNotFoundError) as exc:
        return _fail(cfg, args.command, EXIT_DATA, exc)
    except (PipelineError, HazardError, ValueError, KeyError) as exc:
        return _fail(cfg, args.command, EXIT_PIPELINE, exc)
    print(f"{args.command}: {status} ({cfg['paths']['output_dir']})")
    return EXIT_OK


def _fail(cfg: dict, command: str, code: int, exc: Exception) -> int:
    msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
    print(f"liqguard: {command}: {msg}", file=sys.stderr)
    out = Path(cfg["paths"]["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(_dump({
            "command": command, "exit_code": code, "error": type(exc).__name__,
            "message": msg, "provenance": provenance(cfg)}), encoding="utf-8")
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
