"""Runs configured experiments and writes their artifacts to the output directory.

Continual runs produce::

    out/config.json            resolved config
    out/metrics.json           RunReport (includes wall-clock)
    out/metrics.csv            task,acc_during,acc_after,drift
    out/param_audit.json
    out/base/weights.rkra      base weights + layout + checksum
    out/base/checksum.txt
    out/task_<t>/adapters.rkra (adapter variants, t >= 2) or head.rkra
    out/task_<t>/probe.rkra    probe inputs and the logits recorded at completion
    out/task_<t>/metrics.json

Zero-shot runs write the same top-level files with U/S/H columns, the visual
encoder base under ``base/`` and every task's stored modules under ``task_<t>/``.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from .adapters import save_adapter_set
from .config import ConfigError, ExperimentConfig
from .data import (
    DataConfigError,
    generate_gzsl_tasks,
    generate_synthetic_tasks,
    read_gzsl_tasks,
    read_tasks,
    write_gzsl_tasks,
    write_tasks,
)
from .gzsl import GzslInvariantViolation, GzslLearner, run_gzsl_sequence
from .io import atomic_write_text, dumps_json, write_bundle
from .model import save_base
from .trainer import InvariantViolation, RunReport, RunState, run_sequence

log = logging.getLogger(__name__)

CONTINUAL_DATA_DEFAULTS = {
    "n_tasks": 5,
    "classes_per_task": 2,
    "input_shape": [2],
    "separation": 6.0,
    "conflict_mode": True,
    "n_train": 100,
    "n_test": 100,
}
GZSL_CSV_HEADER = "task,U_during,S_during,H_during,U_after,S_after,H_after,latent_drift"


# ---------------------------------------------------------------- data


def load_tasks(cfg: ExperimentConfig):
    """Tasks named by the config: generated from its seed or read from RKRD files."""
    kind, src = cfg.data_source()
    try:
        if kind == "dir":
            return read_gzsl_tasks(src) if cfg.kind == "gzsl" else read_tasks(src)
        if not isinstance(src, dict):
            raise ConfigError("data.generator must be an object")
        if cfg.kind == "gzsl":
            return generate_gzsl_tasks(**{**src, "seed": cfg.seed})
        return generate_synthetic_tasks(**{**CONTINUAL_DATA_DEFAULTS, **src, "seed": cfg.seed})
    except (DataConfigError, TypeError) as e:
        raise ConfigError(f"data: {e}") from e


def generate_data(cfg: ExperimentConfig, directory) -> list[Path]:
    tasks = load_tasks(cfg)
    directory = Path(directory)
    return write_gzsl_tasks(directory, tasks) if cfg.kind == "gzsl" else write_tasks(directory, tasks)


# ---------------------------------------------------------------- continual runs


def continual_violations(report: RunReport) -> list[str]:
    """Broken guarantees in a finished run; empty when everything holds."""
    problems = []
    adapter_variant = report.variant in ("rkr", "rkr_lite")
    for t in report.tasks:
        if not (0.0 <= t.acc_during <= 100.0 and 0.0 <= t.acc_after <= 100.0):
            problems.append(f"task {t.task}: accuracy outside [0, 100]")
        if adapter_variant and t.drift != 0.0:
            problems.append(f"task {t.task}: probe logits drifted by {t.drift!r}")
        if adapter_variant and t.acc_after != t.acc_during:
            problems.append(f"task {t.task}: accuracy changed from {t.acc_during!r} to {t.acc_after!r}")
        if t.forward_transfer_ok is False:
            problems.append(f"task {t.task}: adapters did not start from the previous task's finals")
    return problems


def write_continual_artifacts(out: Path, cfg: ExperimentConfig, report: RunReport, state: RunState) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", dumps_json(cfg.to_dict()))
    summary = report.to_dict()
    atomic_write_text(out / "metrics.json", dumps_json(summary))
    atomic_write_text(out / "metrics.csv", report.csv())
    atomic_write_text(out / "param_audit.json", dumps_json(report.audit))
    save_base(out / "base" / "weights.rkra", state.base)
    atomic_write_text(out / "base" / "checksum.txt", state.base.checksum() + "\n")
    for entry, res in zip(summary["tasks"], report.tasks):
        tdir = out / f"task_{res.task}"
        if res.task in state.adapters:
            save_adapter_set(tdir / "adapters.rkra", state.adapters[res.task])
        else:
            w, b = state.heads[res.task]
            write_bundle(tdir / "head.rkra", {"weight": w.value, "bias": b.value}, {"task_id": res.task})
        x, logits = state.probes[res.task]
        write_bundle(tdir / "probe.rkra", {"inputs": x, "logits": logits}, {"task_id": res.task})
        atomic_write_text(tdir / "metrics.json", dumps_json({**entry, "loss_history": res.loss_history}))


def run_continual(cfg: ExperimentConfig) -> tuple[RunReport, RunState, list[str]]:
    tasks = load_tasks(cfg)
    spec = cfg.network_spec(tasks[0].x_train.shape[1:])
    try:
        report, state = run_sequence(tasks, spec, cfg.train_configs(len(tasks)), cfg.variant, cfg.forward_transfer)
    except ValueError as e:
        # label/geometry mismatches between data and network are config problems
        raise ConfigError(str(e)) from e
    write_continual_artifacts(Path(cfg.out), cfg, report, state)
    return report, state, continual_violations(report)


# ---------------------------------------------------------------- zero-shot runs


def gzsl_csv(report: dict) -> str:
    lines = [GZSL_CSV_HEADER]
    for t in report["tasks"]:
        d, a = t["during"], t["after"]
        vals = [d["U"], d["S"], d["H"], a["U"], a["S"], a["H"], t["latent_drift"]]
        lines.append(f"{t['task']}," + ",".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def gzsl_violations(report: dict) -> list[str]:
    problems = []
    if report["variant"] != "rkr":
        return problems
    for t in report["tasks"]:
        if t["latent_drift"] != 0.0:
            problems.append(f"task {t['task']}: test latents drifted by {t['latent_drift']!r}")
        if t["after"] != t["during"]:
            problems.append(f"task {t['task']}: U/S/H changed after later tasks")
        if t["encoder_v_base_unchanged"] is False:
            problems.append(f"task {t['task']}: visual encoder base changed")
    return problems


def write_gzsl_artifacts(out: Path, cfg: ExperimentConfig, report: dict, learner: GzslLearner) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", dumps_json(cfg.to_dict()))
    atomic_write_text(out / "metrics.json", dumps_json(report))
    atomic_write_text(out / "metrics.csv", gzsl_csv(report))
    save_base(out / "base" / "encoder_v.rkra", learner.encoder_v_base)
    atomic_write_text(out / "base" / "checksum.txt", learner.encoder_v_checksum() + "\n")
    for entry in report["tasks"]:
        t = entry["task"]
        rec = learner.records[t]
        tdir = out / f"task_{t}"
        if t in learner.adapters:
            save_adapter_set(tdir / "adapters.rkra", learner.adapters[t])
        for name in ("decoder_v", "encoder_a", "decoder_a"):
            save_base(tdir / f"{name}.rkra", getattr(rec, name))
        w, b = rec.classifier
        write_bundle(tdir / "classifier.rkra", {"weight": w.value, "bias": b.value}, {"seen": rec.seen, "unseen": rec.unseen})
        write_bundle(tdir / "test_latents.rkra", {"latents": rec.test_latents}, {"task_id": t})
        atomic_write_text(tdir / "metrics.json", dumps_json({**entry, "loss_history": rec.loss_history}))


def run_gzsl(cfg: ExperimentConfig) -> tuple[dict, GzslLearner, list[str]]:
    tasks = load_tasks(cfg)
    started = time.perf_counter()
    try:
        report, learner = run_gzsl_sequence(tasks, cfg.gzsl_config(), cfg.variant)
    except GzslInvariantViolation as e:
        raise InvariantViolation(str(e)) from e
    report["wall_clock_seconds"] = time.perf_counter() - started
    write_gzsl_artifacts(Path(cfg.out), cfg, report, learner)
    return report, learner, gzsl_violations(report)


# ---------------------------------------------------------------- reports


def read_csv_rows(path) -> tuple[list[str], list[list[float]]]:
    header, *rows = Path(path).read_text().splitlines()
    return header.split(","), [[float(v) for v in r.split(",")] for r in rows]


def report_consistency(out) -> list[str]:
    """Fields shared by metrics.csv and metrics.json that disagree."""
    out = Path(out)
    summary = json.loads((out / "metrics.json").read_text())
    header, rows = read_csv_rows(out / "metrics.csv")
    problems = []
    for row, task in zip(rows, summary["tasks"]):
        for name, val in zip(header, row):
            if name == "task":
                ref = task["task"]
            elif name in ("acc_during", "acc_after", "drift", "latent_drift"):
                ref = task[name]
            else:
                phase, metric = name.split("_")[1], name.split("_")[0]
                ref = task[phase][metric]
            if float(ref) != val:
                problems.append(f"task {task['task']}: {name} is {val!r} in CSV but {ref!r} in JSON")
    if len(rows) != len(summary["tasks"]):
        problems.append("CSV and JSON list different numbers of tasks")
    return problems


def format_report(out) -> str:
    out = Path(out)
    header, rows = read_csv_rows(out / "metrics.csv")
    widths = [max(len(h), 10) for h in header]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for r in rows:
        cells = [str(int(r[0]))] + [f"{v:.4f}" if abs(v) < 1e6 else f"{v:.4g}" for v in r[1:]]
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)
