"""Command-line entry point.

    slmpda gen-data        --out DIR
    slmpda train           --out DIR [--data CSV]
    slmpda eval            --out DIR --checkpoint PATH [--data CSV]
    slmpda ablate          --out DIR [--rows a,b] [--seeds 0,1,2,3,4] [--workers N]
    slmpda export-features --out DIR --checkpoint PATH [--data CSV]
    slmpda grad-check      [--out DIR]

Shared flags: --config PATH, repeated --set key=value (last wins), --seed N,
--profile {desk,reference}.  Exit codes: 0 success, 1 usage or config error
(nothing written), 2 numeric fault during training (partial outputs kept
and flagged in report.json).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import PROFILES, DEFAULT_PROFILE, ConfigError, RunConfig, apply_overrides, dump_config, flatten, load_config
from .data import DatasetError, PdaTask, generate_synthetic_pda, load_csv_dataset, save_csv_dataset
from .evaluate import (CANONICAL_ROWS, OPTIONAL_ROWS, export_features, make_evaluator, model_distance_report,
                       run_ablation, selector_metrics, source_decisions)
from .gradcheck import format_table, run_grad_suite
from .models import DomainStandardizer
from .trainer import (Checkpoint, CheckpointError, EvalView, Trainer, TrainingFault, load_checkpoint,
                      save_checkpoint)

log = logging.getLogger("slmpda")

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True, seed_help: str = "sets train.seed"):
    p.add_argument("--config", type=Path, help="flat 'section.key = value' file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable, last wins")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--profile", choices=sorted(PROFILES), default=DEFAULT_PROFILE,
                   help="base defaults before --config and --set (default: %(default)s)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slmpda", description="Select, Label, Mix partial domain adaptation at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic task as dataset.csv")
    _common(p, seed_help="sets task.seed")

    p = sub.add_parser("train", help="train and write metrics, checkpoint and report")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset CSV (default: synthetic task from the config)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, seed_help="unused; accepted for symmetry")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("ablate", help="module ablation sweep over seeds")
    _common(p, seed_help="unused; see --seeds")
    p.add_argument("--data", type=Path)
    p.add_argument("--rows", default=",".join(CANONICAL_ROWS),
                   help=f"comma list from {', '.join(CANONICAL_ROWS + OPTIONAL_ROWS)}")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("export-features", help="write G-features of both domains as CSV")
    _common(p, seed_help="unused; accepted for symmetry")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("grad-check", help="finite-difference check of every primitive and loss")
    p.add_argument("--out", type=Path)
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _resolve_config(args, seed_key: str | None = "train.seed", base: RunConfig | None = None) -> RunConfig:
    overrides = list(args.overrides)
    if seed_key and args.seed is not None:
        overrides.append(f"{seed_key}={args.seed}")
    if args.config is not None and not args.config.is_file():
        raise UsageError(f"--config: no such file {args.config}")
    return load_config(args.config, overrides, base=base, profile=args.profile)


def _load_task(args, cfg: RunConfig) -> PdaTask:
    data = getattr(args, "data", None)
    if data is None:
        return generate_synthetic_pda(cfg.task)
    if not data.is_file():
        raise UsageError(f"--data: no such file {data}")
    return load_csv_dataset(data)


def _prepare_out(out: Path) -> Path:
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out: {out} exists and is not a directory")
    return out


def _make_out(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)


def _view_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig, task: PdaTask) -> EvalView:
    std = None
    if cfg.train.standardize:
        std = DomainStandardizer(task.train.source_x, task.train.target_x)
    return EvalView(ckpt.models, std)


def _checkpoint_config(args) -> tuple[Checkpoint, RunConfig]:
    if not args.checkpoint.is_file():
        raise UsageError(f"--checkpoint: no such file {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    base = apply_overrides(RunConfig(), ckpt.config)
    cfg = _resolve_config(args, seed_key=None, base=base)
    return ckpt, cfg


def _check_task_fits(task: PdaTask, ckpt: Checkpoint) -> None:
    if task.train.dim != ckpt.models.G.in_dim or task.train.n_classes != ckpt.models.n_classes:
        raise UsageError(f"dataset (dim {task.train.dim}, {task.train.n_classes} classes) does not match the "
                         f"checkpoint (dim {ckpt.models.G.in_dim}, {ckpt.models.n_classes} classes)")


def evaluation_report(view: EvalView, cfg: RunConfig, task: PdaTask) -> dict:
    use_select = cfg.train.use_select
    metrics = make_evaluator(task, use_select)(view)
    sm = selector_metrics(source_decisions(view, task, use_select), task.evaluation.oracle)
    dist = model_distance_report(view, task, use_select)
    return {
        "target_accuracy": metrics["target_accuracy"],
        "selector": asdict(sm),
        "distances": asdict(dist),
        "n_source": int(len(task.train.source_x)),
        "n_target": int(len(task.train.target_x)),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args, seed_key="task.seed")
    out = _prepare_out(args.out)
    task = generate_synthetic_pda(cfg.task)
    _make_out(out)
    save_csv_dataset(task, out / "dataset.csv")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    log.info("wrote %d source and %d target rows to %s", len(task.train.source_x), len(task.train.target_x),
             out / "dataset.csv")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out)
    task = _load_task(args, cfg)
    _make_out(out)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    trainer = Trainer(cfg.train, task.train, make_evaluator(task, cfg.train.use_select))
    start = time.perf_counter()
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def on_record(rec):
            fh.write(_dumps(rec) + "\n")
            if "target_accuracy" in rec:
                log.info("step %5d  target_accuracy %.4f", rec["step"], rec["target_accuracy"])
        try:
            trainer.run(on_record)
        except TrainingFault as exc:
            fh.flush()
            _write_json(out / "report.json", {"status": "fault", "fault": {
                "step": exc.step, "term": exc.term, "message": str(exc)}, "steps_completed": trainer.t})
            print(f"slmpda: numeric fault at {exc}", file=sys.stderr)
            return EXIT_FAULT
    log.info("trained %d steps in %.1fs", trainer.t, time.perf_counter() - start)
    ckpt = Checkpoint(flatten(cfg), trainer.models, trainer.opt, trainer.t)
    save_checkpoint(ckpt, out / "checkpoint.bin")
    report = {"status": "ok", "steps_completed": trainer.t,
              **evaluation_report(trainer.eval_view(), cfg, task),
              "trajectory": [[e["step"], e["target_accuracy"]] for e in trainer.evaluations]}
    _write_json(out / "report.json", report)
    print(f"target_accuracy {report['target_accuracy']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, cfg = _checkpoint_config(args)
    out = _prepare_out(args.out)
    task = _load_task(args, cfg)
    _check_task_fits(task, ckpt)
    report = {"status": "ok", "checkpoint_step": ckpt.step,
              **evaluation_report(_view_from_checkpoint(ckpt, cfg, task), cfg, task)}
    _make_out(out)
    _write_json(out / "report.json", report)
    print(f"target_accuracy {report['target_accuracy']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args, seed_key=None)
    out = _prepare_out(args.out)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in rows if r not in CANONICAL_ROWS + OPTIONAL_ROWS]
    if unknown or not rows:
        raise UsageError(f"--rows: unknown row(s) {', '.join(unknown) or '(none given)'}")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
    if len(seeds) < 2:
        raise UsageError("--seeds: at least two seeds are needed")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    task = _load_task(args, cfg)
    _make_out(out)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    try:
        result = run_ablation(cfg.train, task, seeds, rows, workers=args.workers)
    except RuntimeError as exc:
        _write_json(out / "ablation.json", {"status": "fault", "message": str(exc)})
        print(f"slmpda: {exc}", file=sys.stderr)
        return EXIT_FAULT
    _write_json(out / "ablation.json", [r.to_dict() for r in result])
    for r in result:
        print(f"{r.name:<13} mean {r.mean:.4f}  std {r.std:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt, cfg = _checkpoint_config(args)
    out = _prepare_out(args.out)
    task = _load_task(args, cfg)
    _check_task_fits(task, ckpt)
    _make_out(out)
    n = export_features(_view_from_checkpoint(ckpt, cfg, task), task, out / "features.csv", cfg.train.use_select)
    log.info("wrote %d rows to %s", n, out / "features.csv")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.points < 1:
        raise UsageError("--points must be >= 1")
    if args.out is not None:
        _prepare_out(args.out)
    rows, seconds = run_grad_suite(points=args.points, seed=args.seed)
    print(format_table(rows, args.tol))
    print(f"{len(rows)} cases x {args.points} points in {seconds:.2f}s")
    ok = all(r.passed(args.tol) for r in rows)
    if args.out is not None:
        _make_out(args.out)
        _write_json(args.out / "grad_check.json", {
            "tolerance": args.tol, "points": args.points, "passed": ok,
            "cases": {r.name: r.max_error for r in rows}})
    return EXIT_OK if ok else EXIT_FAULT


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-features": cmd_export,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DatasetError, CheckpointError) as exc:
        print(f"slmpda {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
