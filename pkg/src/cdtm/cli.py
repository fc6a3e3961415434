"""``cdtm`` command line: gen-data, train, experiment, report, selftest.

Exit codes: 0 ok, 1 selftest failure, 2 config or usage error,
3 fingerprint mismatch, 4 missing inputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import dataio, selftest
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import RunConfig, load_config
from .errors import CheckpointError, ConfigError, DatasetFormatError, DatasetValidationError
from .experiment import ExperimentPlan, make_splits, run_experiment
from .metrics import auc
from .model import build_models
from .report import render_experiment, rerender
from .synth import Dataset, generate
from .training import TrainState, train

log = logging.getLogger("cdtm")

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_CONFIG = 2
EXIT_FINGERPRINT = 3
EXIT_MISSING = 4

MANIFEST = "manifest.json"
GROUND_TRUTH = "ground_truth.json"
CHECKPOINT = "checkpoint.ckpt"
METRICS = "metrics.csv"
METRIC_COLUMNS = ["step", "domain", "loss", "aux", "align_dist"]


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _config(args) -> RunConfig:
    if not args.config:
        raise CommandError(EXIT_CONFIG, "--config is required")
    try:
        return load_config(args.config)
    except ConfigError as e:
        raise CommandError(EXIT_CONFIG, f"config error: {e}") from None


def _data_seed(cfg: RunConfig, args) -> int:
    return cfg.data_seed if args.seed is None else args.seed


def load_data(cfg: RunConfig, data_dir: str | Path, names: list[str]) -> dict[str, Dataset]:
    """Read datasets listed in a gen-data manifest, checking they match ``cfg``."""
    data_dir = Path(data_dir)
    mpath = data_dir / MANIFEST
    if not mpath.is_file():
        raise CommandError(EXIT_MISSING, f"no {MANIFEST} in {data_dir}; run gen-data first")
    manifest = json.loads(mpath.read_text())
    if manifest.get("data_fingerprint") != cfg.data_fingerprint:
        raise CommandError(EXIT_FINGERPRINT,
                           f"datasets in {data_dir} were generated for data fingerprint "
                           f"{manifest.get('data_fingerprint')}, config has {cfg.data_fingerprint}")
    out = {}
    for name in names:
        entry = manifest["files"].get(name)
        path = data_dir / entry["file"] if entry else None
        if path is None or not path.is_file():
            raise CommandError(EXIT_MISSING, f"dataset for domain {name!r} missing from {data_dir}")
        if _sha256(path) != entry["sha256"]:
            raise CommandError(EXIT_FINGERPRINT, f"{path} does not match its manifest hash")
        try:
            out[name] = dataio.read_dataset(path)
        except (DatasetFormatError, DatasetValidationError) as e:
            raise CommandError(EXIT_MISSING, f"{path}: {e}") from None
    return out


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir or args.data_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = _data_seed(cfg, args)
    if seed != cfg.data_seed:
        cfg = _with_data_seed(cfg, seed)
    meta = {"config_fingerprint": cfg.fingerprint, "data_fingerprint": cfg.data_fingerprint, "seed": seed}
    datasets, truth = generate(cfg.schema, seed, cfg.generator)
    files = {}
    for name, ds in datasets.items():
        path = out / f"{name}.cdtmds"
        dataio.write_dataset(ds, path, meta)
        files[name] = {"file": path.name, "sha256": _sha256(path), "rows": len(ds), "ctr": round(ds.ctr(), 6)}
        log.info("wrote %s (%d rows, ctr %.4f)", path, len(ds), ds.ctr())
    truth.save(out / GROUND_TRUTH, meta)
    manifest = {**meta, "files": files, "ground_truth": {"file": GROUND_TRUTH,
                                                          "sha256": _sha256(out / GROUND_TRUTH)}}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"generated {len(files)} datasets in {out} (data fingerprint {cfg.data_fingerprint}, seed {seed})")
    return EXIT_OK


def _with_data_seed(cfg: RunConfig, seed: int) -> RunConfig:
    norm = json.loads(json.dumps(cfg.normalized))
    norm["generator"]["seed"] = seed
    return replace(cfg, data_seed=seed, normalized=norm)


def _read_metrics(path: Path, before_step: int) -> list[list[str]]:
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))[1:]
    return [r for r in rows if int(r[0]) < before_step]


def _write_metrics(path: Path, stamp: str, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {stamp}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)


def _metric_row(h) -> list[str]:
    step, name, loss, aux, dist = h
    return [str(step), name, repr(float(loss)), repr(float(aux)), repr(float(dist))]


def cmd_train(args) -> int:
    cfg = _config(args)
    names = cfg.train_domains or cfg.schema.names
    schema = cfg.schema.subset(names) if cfg.train_domains else cfg.schema
    data = load_data(cfg, args.data_dir or ".", names)
    tcfg = cfg.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, metrics_path = out / CHECKPOINT, out / METRICS
    stamp = f"config={cfg.fingerprint} seed={tcfg.seed}"

    splits = make_splits({n: data[n] for n in names}, cfg.split)
    train_data = {n: splits[n].train.with_spec(schema.domain(n)) for n in names}

    if args.resume:
        if not ckpt_path.is_file():
            raise CommandError(EXIT_MISSING, f"--resume: no checkpoint at {ckpt_path}")
        try:
            header, _ = read_header(ckpt_path.read_bytes())
            if header.get("config_fingerprint") != cfg.fingerprint or header.get("seed") != tcfg.seed:
                raise CommandError(EXIT_FINGERPRINT,
                                   f"checkpoint {ckpt_path} was written for config {header.get('config_fingerprint')} "
                                   f"seed {header.get('seed')}, not {cfg.fingerprint} seed {tcfg.seed}")
            ck = load_checkpoint(ckpt_path, expected_fingerprint=schema.fingerprint())
        except CheckpointError as e:
            raise CommandError(EXIT_FINGERPRINT, f"cannot resume: {e}") from None
        shared, models, state = ck.shared, ck.models, ck.state
        rows = _read_metrics(metrics_path, state.step)
        log.info("resuming from step %d", state.step)
    else:
        shared, models = build_models(schema, cfg.model, tcfg.seed, with_shared=True)
        state, rows = TrainState(), []

    def checkpoint():
        save_checkpoint(ckpt_path, schema, cfg.model, shared, models, state,
                        extra={"config_fingerprint": cfg.fingerprint, "seed": tcfg.seed})
        _write_metrics(metrics_path, stamp, rows)

    t0 = time.perf_counter()
    while state.step < tcfg.steps:
        n = min(cfg.checkpoint_every - state.step % cfg.checkpoint_every, tcfg.steps - state.step)
        first = len(state.history)
        state = train(shared, models, train_data, tcfg, state=state, steps=n)
        rows.extend(_metric_row(h) for h in state.history[first:])
        checkpoint()
        log.info("step %d/%d, %.1fs elapsed", state.step, tcfg.steps, time.perf_counter() - t0)
    checkpoint()

    parts = []
    for name in names:
        va = splits[name].valid.with_spec(schema.domain(name))
        try:
            parts.append(f"{name}={auc(models[name].predict(shared, va), va.labels):.4f}")
        except ValueError:  # single-class validation slice
            parts.append(f"{name}=n/a")
    print(f"trained {state.step} steps; valid AUC {' '.join(parts)}; "
          f"checkpoint {ckpt_path}; {stamp}")
    return EXIT_OK


def plan_from_config(cfg: RunConfig, task: int, seed: int | None = None, steps: int | None = None
                     ) -> ExperimentPlan:
    ex = cfg.experiment
    tcfg = cfg.train if steps is None else replace(cfg.train, steps=steps)
    seeds = list(ex.seeds) if seed is None else [seed]
    if task == 1:
        src = ex.task1_source or (ex.sources[0] if ex.sources else None)
        sources, targets = ([src] if src else []), list(ex.targets)
    elif task == 4:
        domains = list(ex.task4_domains or ex.targets)
        sources, targets = domains, domains
    else:
        sources, targets = list(ex.sources), list(ex.targets)
    try:
        return ExperimentPlan(task=task, sources=sources, targets=targets, seeds=seeds, train=tcfg,
                              model=cfg.model, eval_every=ex.eval_every, base_steps=ex.base_steps,
                              base_eval_every=ex.base_eval_every)
    except ValueError as e:
        raise CommandError(EXIT_CONFIG, f"config error: experiment for task {task}: {e}") from None


def _stamp(args) -> str:
    return args.stamp or time.strftime("%Y%m%dT%H%M%S")


def cmd_experiment(args) -> int:
    cfg = _config(args)
    plan = plan_from_config(cfg, args.task, args.seed, args.steps)
    names = sorted(set(plan.sources) | set(plan.targets))
    data = load_data(cfg, args.data_dir or ".", names)
    result = run_experiment(plan, cfg.schema, data, cfg.split)
    files = render_experiment(result, args.out_dir or ".", _stamp(args), cfg.fingerprint)
    for p in files.all():
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input) if args.input else None
    if src is None or not src.is_file():
        raise CommandError(EXIT_MISSING, f"report input {args.input!r} not found")
    files = rerender(src, args.out_dir or src.parent, _stamp(args))
    for p in files.all():
        print(p)
    return EXIT_OK


def cmd_selftest(args) -> int:
    ok = selftest.run(echo=print)
    print("selftest passed" if ok else "selftest FAILED")
    return EXIT_OK if ok else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdtm", description="Cross-domain CTR transfer models on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run configuration")
        if data:
            p.add_argument("--data-dir", help="directory holding generated datasets")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--seed", type=int, help="override the seed")
        return p

    p = common(sub.add_parser("gen-data", help="generate synthetic datasets"))
    p.set_defaults(func=cmd_gen_data)
    p = common(sub.add_parser("train", help="train the configured domains jointly"))
    p.add_argument("--steps", type=int, help="total step budget")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out-dir")
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("experiment", help="run one task design end to end"))
    p.add_argument("--task", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--steps", type=int, help="override the joint-model step budget")
    p.add_argument("--stamp", help="filename stamp (default: current time)")
    p.set_defaults(func=cmd_experiment)
    p = sub.add_parser("report", help="re-render CSV and figures from a detail JSON")
    p.add_argument("--input", help="task detail JSON written by experiment")
    p.add_argument("--out-dir")
    p.add_argument("--stamp")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("selftest", help="run built-in property checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("CDTM_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("cdtm").setLevel(level)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except CommandError as e:
        print(f"cdtm {args.command}: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
