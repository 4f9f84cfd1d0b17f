"""Command-line entry point.

Exit codes: 0 ok, 1 accuracy below threshold, 2 load/validation failure,
3 retrieval pipeline failure, 4 simulation abort.  Payloads go to stdout,
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import load_run_config
from .errors import (FixtureNotFound, ParseError, PipelineError, SimulationAborted,
                     TaskImpedanceError, UnknownTask)
from .impedance import ImpedanceParams
from .kinematics import load_chain
from .knowledgebase import load_knowledge_base
from .perception import HttpVlmClient, ImageRef, ScriptedVlm, load_decision_tree, load_fixtures
from .retrieval import Retriever, evaluate_retrieval
from .simulation import (TABLE_TASKS, compute_metrics, default_environment, load_heightfield,
                         manifest, run_scenario)
from .vecindex import FlatIndex

EXIT_OK, EXIT_BELOW_THRESHOLD, EXIT_LOAD, EXIT_PIPELINE, EXIT_SIM = 0, 1, 2, 3, 4


class LoadFailure(Exception):
    pass


def _err(msg):
    print(msg, file=sys.stderr)


def _load_config(args):
    overrides = {}
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if getattr(args, "dt", None) is not None:
        overrides["simulation"] = {"dt": args.dt}
    if getattr(args, "threshold", None) is not None:
        overrides["accuracy_threshold"] = args.threshold
    if getattr(args, "fixtures", None):
        overrides["fixtures"] = str(Path(args.fixtures).resolve())
    if getattr(args, "embedding_url", None):
        overrides["embedding"] = {"provider": "external", "url": args.embedding_url}
    return load_run_config(args.config, overrides)


def _assemble(cfg):
    kb = load_knowledge_base(cfg.impedance_db, cfg.gripper_db)
    tree = load_decision_tree(cfg.decision_tree, kb.task_ids)
    provider = cfg.embedding_provider()
    return kb, tree, provider


def _client(cfg, fixtures):
    if cfg.vlm.get("mode", "scripted") == "http":
        return HttpVlmClient(cfg.vlm["url"], float(cfg.vlm.get("timeout", 30.0)))
    return ScriptedVlm(fixtures)


def _write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_build_index(cfg, args):
    kb, _, provider = _assemble(cfg)
    retriever = Retriever(kb, provider, tree=None, config=cfg.retrieval)
    out = cfg.output_dir
    for name, index in (("scenario_index", retriever.scenario_index),
                        ("gripper_index", retriever.gripper_index)):
        payload = index.to_dict()
        payload["config_hash"] = cfg.config_hash
        _write(out / f"{name}.json", json.dumps(payload) + "\n")
    print(f"scenarios: {len(retriever.scenario_index)}, grippers: {len(retriever.gripper_index)}")
    return EXIT_OK


def _load_indexes(cfg, provider):
    """Reuse indexes written by build-index when they match this config."""
    out = cfg.output_dir
    paths = (out / "scenario_index.json", out / "gripper_index.json")
    if not all(p.is_file() for p in paths):
        return None
    loaded = [json.loads(p.read_text(encoding="utf-8")) for p in paths]
    if any(d.get("config_hash") != cfg.config_hash for d in loaded):
        return None
    if any(int(d["dimension"]) != provider.dimension for d in loaded):
        return None
    return tuple(FlatIndex.from_dict(d) for d in loaded)


def cmd_retrieve(cfg, args):
    kb, tree, provider = _assemble(cfg)
    fixtures = load_fixtures(cfg.fixtures)
    retriever = Retriever(kb, provider, tree, cfg.retrieval, _load_indexes(cfg, provider))
    client = _client(cfg, fixtures)
    try:
        params = retriever.run(ImageRef(args.image_uri), client)
    except PipelineError as exc:
        _err(f"error: {exc}")
        return EXIT_PIPELINE
    expected = {f.image_uri: f for f in fixtures}.get(args.image_uri)
    primary = params[0]
    if expected is not None and expected.expected_task_id not in (None, primary.label.task_id):
        _err(f"warning: low confidence: inferred task {primary.label.task_id!r} disagrees with "
             f"the fixture's recorded task {expected.expected_task_id!r}")
    payload = {"image_uri": args.image_uri, "config_hash": cfg.config_hash,
               "query_trace": [[q, a.value] for q, a in primary.label.query_trace],
               "parameters": [p.to_dict() for p in params]}
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_eval_retrieval(cfg, args):
    kb, tree, provider = _assemble(cfg)
    fixtures = load_fixtures(cfg.fixtures)
    retriever = Retriever(kb, provider, tree, cfg.retrieval, _load_indexes(cfg, provider))
    t0 = time.perf_counter()
    report = evaluate_retrieval(fixtures, retriever, _client(cfg, fixtures))
    elapsed = time.perf_counter() - t0
    data = report.to_dict()
    data["config_hash"] = cfg.config_hash
    _write(cfg.output_dir / "retrieval_report.json", json.dumps(data, indent=2, sort_keys=True) + "\n")
    _write(cfg.output_dir / "retrieval_counts.csv", report.to_csv())
    for r in report.records:
        if not r.correct:
            _err(f"incorrect: {r.image_uri}: inferred={r.inferred_task} "
                 f"scenario={r.retrieved_scenario} gripper={r.retrieved_gripper} "
                 f"expected={r.expected_task}/{r.expected_object_class}"
                 + (f" ({r.error})" if r.error else ""))
    _err(f"evaluated {report.total} fixtures in {elapsed:.3f}s")
    print(f"accuracy: {report.accuracy:.4f} ({report.correct_count}/{report.total})")
    return EXIT_OK if report.accuracy >= cfg.accuracy_threshold - 1e-12 else EXIT_BELOW_THRESHOLD


def _fixture_for(task_id, fixtures, retriever, client):
    for fx in sorted(fixtures, key=lambda f: f.image_uri):
        if fx.expected_task_id != task_id:
            continue
        try:
            params = retriever.run(ImageRef(fx.image_uri), client)
        except PipelineError:
            continue
        if params[0].scenario.task_id == task_id:
            return fx, params
    raise PipelineError("perception", FixtureNotFound(
        f"no fixture resolves to task {task_id!r}"))


def _apply_override(imp, override):
    if not override:
        return imp
    return ImpedanceParams.from_gains(override.get("stiffness", imp.stiffness),
                                      override.get("damping", imp.damping), imp.mass)


def _environment(cfg, task_id):
    env = cfg.environment
    profile = load_heightfield(cfg.heightfield) if cfg.heightfield else None
    return default_environment(task_id, k_env=float(env.get("contact_stiffness", 500.0)),
                               d_env=float(env.get("contact_damping", 5.0)),
                               table_height=float(env.get("table_height", -0.20)),
                               cfg=cfg.simulation, profile=profile)


def _simulate_task(cfg, task_id, fixtures, retriever, client, chains):
    """Retrieve and simulate one task; returns ``(rows, aborted)``."""
    fx, params_list = _fixture_for(task_id, fixtures, retriever, client)
    rows = []
    out = cfg.output_dir
    for params in params_list:
        scen = params.scenario
        imp = _apply_override(params.impedance, cfg.gain_override)
        stem = f"{scen.task_id}_{scen.arm.value}"
        env = _environment(cfg, scen.task_id)
        try:
            trace = run_scenario(scen.task_id, imp, chains[scen.arm], env, cfg.simulation)
        except SimulationAborted as exc:
            _write(out / f"{stem}_trace.csv", exc.trace.to_csv())
            _err(f"error: simulation of {stem} aborted: {exc}")
            return rows, True
        metrics = compute_metrics(trace)
        _write(out / f"{stem}_trace.csv", trace.to_csv())
        _write(out / f"{stem}_tracking.csv", trace.tracking_csv())
        _write(out / f"{stem}_metrics.json",
               manifest(scen.task_id, imp, cfg.simulation, cfg.config_hash, metrics))
        rows.append({"task_id": scen.task_id, "arm": scen.arm.value, "image_uri": fx.image_uri,
                     "K_z": float(imp.stiffness[2]), "D_z": float(imp.damping[2]),
                     **metrics.to_dict()})
    return rows, False


def _format_row(row):
    return (f"{row['task_id']:<22} {row['arm']:>3} {row['K_z']:>6.1f} {row['D_z']:>6.1f} "
            f"{row['mean_abs_e_z']:>10.4f} {row['max_abs_e_z']:>10.4f} "
            f"{row['max_abs_F_virt_z']:>12.4f}")


HEADER = (f"{'task':<22} {'arm':>3} {'K_z':>6} {'D_z':>6} {'mean|e_z|':>10} "
          f"{'max|e_z|':>10} {'max|F_z|':>12}")


def cmd_simulate(cfg, args):
    kb, tree, provider = _assemble(cfg)
    fixtures = load_fixtures(cfg.fixtures)
    chains = {arm: load_chain(p) for arm, p in cfg.chains.items()}
    retriever = Retriever(kb, provider, tree, cfg.retrieval, _load_indexes(cfg, provider))
    client = _client(cfg, fixtures)
    if args.all:
        tasks = list(TABLE_TASKS)
    elif args.task_id:
        if args.task_id not in kb.task_ids:
            raise UnknownTask(f"unknown task {args.task_id!r}")
        tasks = [args.task_id]
    else:
        raise LoadFailure("simulate needs a task id or --all")
    rows = []
    done = set()
    for task_id in tasks:
        if task_id in done:
            continue
        try:
            task_rows, aborted = _simulate_task(cfg, task_id, fixtures, retriever, client, chains)
        except PipelineError as exc:
            _err(f"error: {exc}")
            return EXIT_PIPELINE
        rows += task_rows
        done.update(r["task_id"] for r in task_rows)
        if aborted:
            return EXIT_SIM
    if args.all:
        _write(cfg.output_dir / "summary.json",
               json.dumps({"config_hash": cfg.config_hash, "rows": rows}, indent=2) + "\n")
        print(HEADER)
    for row in rows:
        print(_format_row(row))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="taskimpedance",
        description="Retrieve task impedance/gripper parameters and simulate their execution.")
    parser.add_argument("--config", help="run config JSON layered over the shipped defaults")
    parser.add_argument("--output-dir", help="where reports, indexes and traces are written "
                        "(default: taskimpedance-out)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="embed both databases and write the indexes")
    p.add_argument("--embedding-url", help="use an external embedding service at this URL")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="print control parameters for one image as JSON")
    p.add_argument("image_uri")
    p.add_argument("--fixtures", help="fixture file answering the scripted VLM")
    p.add_argument("--embedding-url")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval-retrieval", help="run the fixture suite and report accuracy")
    p.add_argument("--fixtures")
    p.add_argument("--threshold", help="minimum accuracy for exit 0, number or fraction "
                   "(default: 13/14)")
    p.add_argument("--embedding-url")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("simulate", help="retrieve gains and simulate a task")
    p.add_argument("task_id", nargs="?")
    p.add_argument("--all", action="store_true", help="the six evaluation-table rows")
    p.add_argument("--dt", type=float, help="integrator step in seconds (default: 0.02)")
    p.add_argument("--fixtures")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        return args.func(cfg, args)
    except FileNotFoundError as exc:
        _err(f"error: {exc.strerror + ': ' + str(exc.filename) if exc.filename else exc}")
        return EXIT_LOAD
    except (ParseError, LoadFailure) as exc:
        _err(f"error: {type(exc).__name__}: {exc}")
        return EXIT_LOAD
    except UnknownTask as exc:
        _err(f"error: {exc}")
        return EXIT_LOAD
    except TaskImpedanceError as exc:
        _err(f"error: {type(exc).__name__}: {exc}")
        return EXIT_LOAD


if __name__ == "__main__":
    sys.exit(main())
