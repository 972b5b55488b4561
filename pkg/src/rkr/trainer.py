"""Task-incremental training: base network on task 1, adapters only afterwards."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import TaskAdapterSet, audit, init_adapter_set
from .model import AdaptedNetwork, BaseNetwork, NetworkSpec, new_head
from .optim import SGD
from .tensor import Param, make_rng, softmax_cross_entropy

log = logging.getLogger(__name__)

VARIANTS = ("rkr", "rkr_lite", "finetune_baseline")

# make_rng stream ids
_INIT, _SHUFFLE, _ADAPTER = 0, 1, 2


class DivergenceError(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    """A frozen parameter changed, or a completed task's state was disturbed."""


class EvaluationError(ValueError):
    pass


class AuditError(RuntimeError):
    pass


@dataclass
class TaskDataset:
    """Train/test split of one task; labels are global class ids."""

    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: np.ndarray = None

    def __post_init__(self):
        if self.classes is None:
            self.classes = np.unique(np.concatenate([self.y_train, self.y_test]))
        self.classes = np.asarray(self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def local(self, y: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.classes, y)
        if np.any(idx >= len(self.classes)) or np.any(self.classes[np.minimum(idx, len(self.classes) - 1)] != y):
            raise ValueError(f"labels outside task {self.task_id}'s classes")
        return idx


def check_disjoint(tasks: list[TaskDataset]) -> None:
    seen: dict[int, int] = {}
    for t in tasks:
        for c in t.classes.tolist():
            if c in seen:
                raise ValueError(f"class {c} appears in tasks {seen[c]} and {t.task_id}")
            seen[c] = t.task_id


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    milestones: tuple = (15, 25)
    gamma: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    rank: int = 2
    lite: bool = False

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid lr {self.lr} / momentum {self.momentum}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if any(m <= 0 or m >= self.epochs for m in self.milestones):
            raise ValueError(f"milestones must lie in (0, epochs={self.epochs}): {self.milestones}")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiplied by ``gamma`` once per milestone reached."""
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)


def fit_network(net: AdaptedNetwork, x: np.ndarray, y_local: np.ndarray, cfg: TrainConfig, rng: np.random.Generator, label: str = ""):
    """Minibatch SGD on softmax cross-entropy; returns mean loss per epoch."""
    opt = SGD(net.trainable_params(), cfg.lr, cfg.momentum, cfg.weight_decay)
    n = len(x)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            yb = y_local[idx]
            opt.zero_grad()
            loss = net.backward_from(x[idx], lambda lg: softmax_cross_entropy(lg, yb))
            if not np.isfinite(loss):
                raise DivergenceError(f"{label}: non-finite loss at epoch {epoch}, batch {b}")
            opt.step()
            total += loss * len(idx)
        history.append(total / n)
        log.debug("%s epoch %d lr %.4g loss %.5f", label, epoch, opt.lr, history[-1])
    return history


def train_base_task(spec: NetworkSpec, task: TaskDataset, cfg: TrainConfig, freeze: bool = True, dtype=np.float64):
    """Train every base weight jointly with the task-1 head, then freeze the base.

    Returns ``(base, head, loss_history)``.
    """
    base = BaseNetwork(spec, make_rng(cfg.seed, task.task_id, _INIT), dtype)
    head = new_head(spec.feature_dim, task.n_classes, make_rng(cfg.seed, task.task_id, _ADAPTER), dtype)
    net = AdaptedNetwork(base, head=head)
    history = fit_network(
        net, task.x_train.astype(dtype), task.local(task.y_train), cfg, make_rng(cfg.seed, task.task_id, _SHUFFLE), f"task {task.task_id}"
    )
    if freeze:
        base.freeze()
    for p in head:
        p.frozen = True
        p.zero_grad()
    return base, head, history


def train_adapter_task(
    base: BaseNetwork,
    task: TaskDataset,
    cfg: TrainConfig,
    previous: TaskAdapterSet | None = None,
    forward_transfer: bool = True,
    dtype=np.float64,
):
    """Learn rectifications, scaling factors and a head for one later task.

    Returns ``(adapters, loss_history, initial_generator_checksum)``. Raises
    :class:`InvariantViolation` if any base parameter is touched.
    """
    if not base.frozen:
        raise InvariantViolation("base network must be frozen before adapter training")
    before = base.checksum()
    aset = init_adapter_set(
        task.task_id,
        base.spec,
        cfg.rank,
        cfg.lite,
        task.n_classes,
        previous=previous if forward_transfer else None,
        rng=make_rng(cfg.seed, task.task_id, _ADAPTER),
        dtype=dtype,
    )
    initial = aset.generator_checksum()
    net = AdaptedNetwork(base, aset)
    history = fit_network(
        net, task.x_train.astype(dtype), task.local(task.y_train), cfg, make_rng(cfg.seed, task.task_id, _SHUFFLE), f"task {task.task_id}"
    )
    if any(np.any(p.grad) for p in base.params()) or base.checksum() != before:
        raise InvariantViolation(f"base parameters changed while training task {task.task_id}")
    aset.finalize()
    return aset, history, initial


def evaluate_task(net: AdaptedNetwork, task: TaskDataset) -> float:
    """Top-1 accuracy in percent on the task's test split (task-local labels)."""
    if len(task.x_test) == 0:
        raise EvaluationError(f"task {task.task_id} has no test examples")
    pred = net.predict(task.x_test.astype(net.base.dtype))
    return float(np.mean(pred == task.local(task.y_test)) * 100.0)


@dataclass
class TaskResult:
    task: int
    n_classes: int
    acc_during: float
    acc_after: float = float("nan")
    drift: float = float("nan")
    init_checksum: str | None = None
    previous_final_checksum: str | None = None
    final_checksum: str | None = None
    loss_history: list = field(default_factory=list)

    @property
    def forward_transfer_ok(self) -> bool | None:
        if self.previous_final_checksum is None:
            return None
        return self.init_checksum == self.previous_final_checksum


@dataclass
class RunState:
    variant: str
    spec: NetworkSpec
    base: BaseNetwork
    heads: dict[int, tuple[Param, Param]] = field(default_factory=dict)
    adapters: dict[int, TaskAdapterSet] = field(default_factory=dict)
    probes: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def network_for(self, task_id: int) -> AdaptedNetwork:
        if task_id in self.adapters:
            return AdaptedNetwork(self.base, self.adapters[task_id])
        return AdaptedNetwork(self.base, head=self.heads[task_id])


@dataclass
class RunReport:
    variant: str
    seed: int
    rank: int
    lite: bool
    forward_transfer: bool
    tasks: list[TaskResult]
    audit: dict
    wall_clock: float = 0.0

    @property
    def average_accuracy(self) -> float:
        return float(np.mean([t.acc_after for t in self.tasks]))

    @property
    def max_drift(self) -> float:
        return float(max(t.drift for t in self.tasks))

    def csv(self) -> str:
        lines = ["task,acc_during,acc_after,drift"]
        for t in self.tasks:
            lines.append(f"{t.task},{t.acc_during:.17g},{t.acc_after:.17g},{t.drift:.17g}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "rank": self.rank,
            "lite": self.lite,
            "forward_transfer": self.forward_transfer,
            "average_accuracy": self.average_accuracy,
            "wall_clock_seconds": self.wall_clock,
            "tasks": [
                {
                    "task": t.task,
                    "n_classes": t.n_classes,
                    "acc_during": t.acc_during,
                    "acc_after": t.acc_after,
                    "drift": t.drift,
                    "forward_transfer_init_matches_previous": t.forward_transfer_ok,
                    "init_checksum": t.init_checksum,
                    "final_checksum": t.final_checksum,
                    "final_loss": t.loss_history[-1] if t.loss_history else None,
                }
                for t in self.tasks
            ],
            "param_audit": self.audit,
        }


def record_probe(state: RunState, task: TaskDataset, batch_size: int) -> None:
    """Store logits on the first test batch of ``task`` as the forgetting oracle."""
    x = task.x_test[:batch_size].astype(state.base.dtype)
    state.probes[task.task_id] = (x, state.network_for(task.task_id).forward(x))


def no_forgetting_audit(state: RunState, task_ids=None) -> dict[int, float]:
    """Max absolute difference between current and recorded probe logits, per task."""
    task_ids = sorted(state.heads.keys() | state.adapters.keys()) if task_ids is None else task_ids
    drift = {}
    for t in task_ids:
        if t not in state.probes:
            raise AuditError(f"no probe logits recorded for task {t}")
        x, recorded = state.probes[t]
        drift[t] = float(np.max(np.abs(state.network_for(t).forward(x) - recorded)))
    return drift


def run_sequence(
    tasks: list[TaskDataset],
    spec: NetworkSpec,
    cfg: TrainConfig | list[TrainConfig],
    variant: str = "rkr",
    forward_transfer: bool = True,
    dtype=np.float64,
) -> tuple[RunReport, RunState]:
    """Train ``tasks`` in order and evaluate every task during and after the sequence.

    ``cfg`` is one config for all tasks or a list with one per task; seed,
    rank and lite mode are taken from the first. ``rkr_lite`` forces lite
    mode. ``finetune_baseline`` keeps the base trainable and gives each task
    only a fresh head.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    check_disjoint(tasks)
    cfgs = list(cfg) if isinstance(cfg, (list, tuple)) else [cfg] * len(tasks)
    if len(cfgs) != len(tasks):
        raise ValueError(f"{len(cfgs)} train configs for {len(tasks)} tasks")
    shared = {"seed": cfgs[0].seed, "rank": cfgs[0].rank, "lite": cfgs[0].lite or variant == "rkr_lite"}
    cfgs = [replace(c, **shared) for c in cfgs]
    cfg = cfgs[0]
    started = time.perf_counter()
    finetune = variant == "finetune_baseline"

    first = tasks[0]
    base, head, hist = train_base_task(spec, first, cfg, freeze=not finetune, dtype=dtype)
    state = RunState(variant, spec, base, heads={first.task_id: head})
    results = [TaskResult(first.task_id, first.n_classes, evaluate_task(state.network_for(first.task_id), first), loss_history=hist)]
    record_probe(state, first, cfg.batch_size)
    log.info("task %d: %.2f%%", first.task_id, results[0].acc_during)

    previous = None
    for task, cfg in zip(tasks[1:], cfgs[1:]):
        if finetune:
            head = new_head(spec.feature_dim, task.n_classes, make_rng(cfg.seed, task.task_id, _ADAPTER), dtype)
            net = AdaptedNetwork(base, head=head)
            hist = fit_network(
                net, task.x_train.astype(dtype), task.local(task.y_train), cfg,
                make_rng(cfg.seed, task.task_id, _SHUFFLE), f"task {task.task_id}",
            )
            for p in head:
                p.frozen = True
            state.heads[task.task_id] = head
            res = TaskResult(task.task_id, task.n_classes, evaluate_task(net, task), loss_history=hist)
        else:
            protected = {t: a.checksum() for t, a in state.adapters.items()}
            aset, hist, initial = train_adapter_task(base, task, cfg, previous, forward_transfer, dtype)
            if any(state.adapters[t].checksum() != c for t, c in protected.items()):
                raise InvariantViolation(f"training task {task.task_id} modified an earlier task's adapters")
            state.adapters[task.task_id] = aset
            res = TaskResult(task.task_id, task.n_classes, evaluate_task(state.network_for(task.task_id), task), loss_history=hist)
            res.init_checksum = initial
            res.previous_final_checksum = previous.generator_checksum() if (previous is not None and forward_transfer) else None
            res.final_checksum = aset.generator_checksum()
            previous = aset
        record_probe(state, task, cfg.batch_size)
        results.append(res)
        log.info("task %d: %.2f%%", task.task_id, res.acc_during)

    drift = no_forgetting_audit(state, [t.task for t in results])
    for res, task in zip(results, tasks):
        res.acc_after = evaluate_task(state.network_for(task.task_id), task)
        res.drift = drift[task.task_id]
    report = RunReport(
        variant, cfg.seed, cfg.rank, cfg.lite, forward_transfer, results,
        audit(spec, cfg.rank, cfg.lite).to_dict(), time.perf_counter() - started,
    )
    return report, state

