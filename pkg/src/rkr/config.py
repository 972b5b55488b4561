"""Experiment configuration files (JSON) for the command-line driver.

A continual-learning config looks like::

    {
      "kind": "continual",
      "variant": "rkr",
      "network": {"preset": "tiny-mlp", "hidden": 32, "feature_dim": 4},
      "rank": 2, "lite": false, "forward_transfer": true,
      "train": {"epochs": 30, "lr": 0.01, "milestones": [15, 25]},
      "data": {"generator": {"n_tasks": 5, "input_shape": [2], "conflict_mode": true}},
      "seed": 0,
      "out": "runs/five_task"
    }

``train`` may also be a list with one entry per task. ``network`` may carry an
explicit ``layers`` list instead of a preset, and ``data`` may name a
directory of RKRD files with ``{"dir": "..."}``. A zero-shot config uses
``"kind": "gzsl"``, variant ``rkr`` or ``sft`` and a ``gzsl`` block holding
learner settings; its rank defaults to 16 instead of 2.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .gzsl import GzslConfig, config_from_dict
from .model import NetworkSpec, SpecError, build_reference_net
from .trainer import VARIANTS, TrainConfig

OUT_DIR_ENV = "RKR_OUT_DIR"
GZSL_VARIANTS = ("rkr", "sft")


class ConfigError(ValueError):
    """The experiment config is malformed or inconsistent."""


def _only(d: dict, allowed: set, where: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


@dataclass
class ExperimentConfig:
    kind: str = "continual"
    variant: str = "rkr"
    network: dict = field(default_factory=lambda: {"preset": "tiny-mlp", "hidden": 32, "feature_dim": 4})
    rank: int | None = None
    lite: bool = False
    forward_transfer: bool = True
    train: dict | list = field(default_factory=dict)
    gzsl: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"generator": {}})
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.kind not in ("continual", "gzsl"):
            raise ConfigError(f"kind must be 'continual' or 'gzsl', got {self.kind!r}")
        allowed = GZSL_VARIANTS if self.kind == "gzsl" else VARIANTS
        if self.variant not in allowed:
            raise ConfigError(f"variant {self.variant!r} not in {allowed}")
        if self.rank is None:
            self.rank = 16 if self.kind == "gzsl" else 2
        if not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigError(f"rank must be a positive integer, got {self.rank!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.data, dict) or len(self.data) != 1 or next(iter(self.data)) not in ("generator", "dir"):
            raise ConfigError("data must be {'generator': {...}} or {'dir': path}")
        # Build everything once so errors surface before any training starts.
        if self.kind == "continual":
            self.train_configs(len(self.train) if isinstance(self.train, list) else 1)
        else:
            self.gzsl_config()

    # -- construction

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        _only(d, {f.name for f in dataclasses.fields(cls)}, "config")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, SpecError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, seed=None, out=None, variant=None) -> "ExperimentConfig":
        d = self.to_dict()
        if out is None:
            out = os.environ.get(OUT_DIR_ENV)
        for key, val in (("seed", seed), ("out", out), ("variant", variant)):
            if val is not None:
                d[key] = val
        return ExperimentConfig.from_dict(d)

    # -- views used by the driver

    def data_source(self) -> tuple[str, object]:
        (key, val), = self.data.items()
        return key, val

    def train_configs(self, n_tasks: int) -> list[TrainConfig]:
        """One TrainConfig per task; a single dict applies to every task."""
        if isinstance(self.train, list):
            if len(self.train) != n_tasks:
                raise ConfigError(f"train lists {len(self.train)} entries for {n_tasks} tasks")
            entries = self.train
        else:
            entries = [self.train] * n_tasks
        out = []
        names = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "rank", "lite"}
        for e in entries:
            if not isinstance(e, dict):
                raise ConfigError("each train entry must be an object")
            _only(e, names, "train")
            try:
                out.append(TrainConfig(**e, seed=self.seed, rank=self.rank, lite=self.lite or self.variant == "rkr_lite"))
            except (TypeError, ValueError) as err:
                raise ConfigError(f"train: {err}") from err
        return out

    def network_spec(self, input_shape) -> NetworkSpec:
        net = dict(self.network)
        try:
            if "layers" in net:
                net.setdefault("input_shape", list(input_shape))
                return NetworkSpec.from_dict(net)
            _only(net, {"preset", "hidden", "feature_dim", "input_shape"}, "network")
            return build_reference_net(
                net.get("preset", "tiny-mlp"),
                tuple(net.get("input_shape", input_shape)),
                feature_dim=net.get("feature_dim", 32),
                hidden=net.get("hidden", 32),
            )
        except (SpecError, TypeError, KeyError, ValueError) as e:
            raise ConfigError(f"network: {e}") from e

    def gzsl_config(self) -> GzslConfig:
        names = {f.name for f in dataclasses.fields(GzslConfig)} - {"seed", "rank", "forward_transfer"}
        _only(self.gzsl, names, "gzsl")
        try:
            return config_from_dict({**self.gzsl, "seed": self.seed, "rank": self.rank, "forward_transfer": self.forward_transfer})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"gzsl: {e}") from e
