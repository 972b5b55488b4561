"""``rkr`` command-line driver.

Exit codes: 0 success, 1 runtime failure (divergence, unreadable files),
2 invalid config, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .adapters import audit
from .config import ConfigError, ExperimentConfig
from .driver import format_report, generate_data, load_tasks, report_consistency, run_continual, run_gzsl
from .gradcheck import TOLERANCE, run_suite
from .gzsl import NumericalError
from .io import FormatError, atomic_write_text, dumps_json
from .model import SpecError, build_reference_net, resnet18_inventory
from .trainer import DivergenceError, InvariantViolation

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3
AUDIT_PRESETS = ("tiny-mlp", "tiny-cnn", "resnet18")


def _load_config(args, kind: str | None = None) -> ExperimentConfig:
    path = args.config or getattr(args, "config_path", None)
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig(kind=kind or "continual")
    if kind is not None and cfg.kind != kind:
        raise ConfigError(f"{path} describes a {cfg.kind!r} experiment, expected {kind!r}")
    return cfg.with_overrides(seed=args.seed, out=args.out, variant=getattr(args, "variant", None))


def _report_violations(problems: list[str]) -> int:
    for p in problems:
        print(f"invariant violation: {p}", file=sys.stderr)
    return EXIT_INVARIANT if problems else EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if cfg.kind == "gzsl":
        return _gzsl(cfg)
    report, _, problems = run_continual(cfg)
    print(report.csv(), end="")
    print(f"average accuracy {report.average_accuracy:.2f}%  ({report.wall_clock:.1f} s)  -> {cfg.out}")
    return _report_violations(problems)


def _gzsl(cfg: ExperimentConfig) -> int:
    report, _, problems = run_gzsl(cfg)
    print(format_report(cfg.out))
    print(f"memory {report['memory']['memory_percent']:.1f}% of one model  -> {cfg.out}")
    return _report_violations(problems)


def cmd_gzsl_run(args) -> int:
    return _gzsl(_load_config(args, kind="gzsl"))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, kind="gzsl" if args.gzsl else None)
    directory = Path(args.out) if args.out else Path(cfg.out) / "data"
    for p in generate_data(cfg, directory):
        print(p)
    return EXIT_OK


def _audit_spec(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        return cfg.network_spec(load_tasks(cfg)[0].x_train.shape[1:]), cfg.rank if args.rank is None else args.rank, cfg.lite or args.lite
    rank = 2 if args.rank is None else args.rank
    if args.preset == "resnet18":
        return resnet18_inventory(args.num_classes), rank, args.lite
    shape = tuple(args.input_shape) if args.input_shape else None
    return build_reference_net(args.preset, shape, feature_dim=args.feature_dim, hidden=args.hidden), rank, args.lite


def cmd_audit(args) -> int:
    try:
        spec, rank, lite = _audit_spec(args)
    except SpecError as e:
        raise ConfigError(str(e)) from e
    if rank < 1:
        raise ConfigError("rank must be positive")
    result = audit(spec, rank, lite)
    print(dumps_json(result.to_dict()) if args.json else result.table())
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(args.out) / "param_audit.json", dumps_json(result.to_dict()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(args.seed if args.seed is not None else 0)
    width = max(map(len, reports))
    for name, r in reports.items():
        print(f"{name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}  max rel err {r.max_rel_error:.3e}")
    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.passed for r in reports.values())
    print(f"overall max relative error {worst:.3e} (tolerance {TOLERANCE:g}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_report(args) -> int:
    out = args.out or args.run_dir
    if out is None:
        raise ConfigError("report needs a run directory (--out DIR)")
    print(format_report(out))
    problems = report_consistency(out)
    for p in problems:
        print(f"mismatch: {p}", file=sys.stderr)
    return EXIT_INVARIANT if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rkr", description="Low-rank weight rectification for task-incremental learning.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("config_path", nargs="?", help="experiment config (same as --config)")
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        if variant:
            p.add_argument("--variant", help="override the config variant")

    p = sub.add_parser("run", help="train a task sequence and write metrics and checkpoints")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gzsl-run", help="train the zero-shot task sequence")
    common(p)
    p.set_defaults(func=cmd_gzsl_run)

    p = sub.add_parser("gen-data", help="write the configured synthetic tasks as RKRD files")
    common(p, variant=False)
    p.add_argument("--gzsl", action="store_true", help="generate zero-shot tasks when no config is given")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("audit", help="per-layer adapter parameter audit")
    p.add_argument("--config", help="take the network and rank from an experiment config")
    p.add_argument("--preset", choices=AUDIT_PRESETS, default="tiny-mlp")
    p.add_argument("--input-shape", type=int, nargs="+")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--num-classes", type=int, default=100, help="classifier width for resnet18")
    p.add_argument("--rank", "-K", type=int)
    p.add_argument("--lite", action="store_true")
    p.add_argument("--json", action="store_true", help="print JSON instead of the table")
    p.add_argument("--out", help="also write DIR/param_audit.json")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="print a finished run's metrics and cross-check CSV against JSON")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DivergenceError, NumericalError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
