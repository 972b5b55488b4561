"""Per-task rectification and scaling generators over a frozen base network.

A rectification generator holds two low-rank factors ``lm`` (rows x K) and
``rm`` (K x cols). Their product, reshaped to the layer's weight shape, is
added to the frozen weight. A scaling generator holds one multiplicative
factor per output channel (conv) or unit (fc).

For a conv kernel ``(W_f, H_f, C_in, C_out)`` the factor matrix has
``W_f*C_in`` rows and ``H_f*C_out`` columns. Row ``r`` maps to
``(w_f, c_in) = divmod(r, C_in)`` and column ``c`` to
``(h_f, c_out) = divmod(c, C_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .io import read_bundle, write_bundle
from .tensor import DimensionError, Param, checksum, make_rng, matmul, matmul_backward

CONV = "conv"
FC = "fc"


class IncompatibleAdaptersError(ValueError):
    """Adapters were built for a different network layout, rank or mode."""


class AdapterStateError(RuntimeError):
    pass


def factor_shapes(kind: str, target_shape: tuple, rank: int) -> tuple[tuple[int, int], tuple[int, int]]:
    if rank < 1:
        raise ValueError(f"rank must be positive, got {rank}")
    if kind == CONV:
        wf, hf, cin, cout = target_shape
        return (wf * cin, rank), (rank, hf * cout)
    if kind == FC:
        hin, hout = target_shape
        return (hin, rank), (rank, hout)
    raise ValueError(f"unknown target kind {kind!r}")


@dataclass(eq=False)
class RectificationGenerator:
    lm: Param
    rm: Param
    target_kind: str
    target_shape: tuple

    def __post_init__(self):
        self.target_shape = tuple(int(s) for s in self.target_shape)
        lm_shape, rm_shape = factor_shapes(self.target_kind, self.target_shape, self.lm.shape[1])
        if self.lm.shape != lm_shape or self.rm.shape != rm_shape:
            raise DimensionError(
                f"factors {self.lm.shape} x {self.rm.shape} do not generate a "
                f"{self.target_kind} weight of shape {self.target_shape}"
            )

    @classmethod
    def zeros(cls, kind: str, target_shape: tuple, rank: int, dtype=np.float64):
        lm_shape, rm_shape = factor_shapes(kind, target_shape, rank)
        return cls(Param(np.zeros(lm_shape, dtype)), Param(np.zeros(rm_shape, dtype)), kind, target_shape)

    @property
    def rank(self) -> int:
        return self.lm.shape[1]

    @property
    def n_params(self) -> int:
        return self.lm.size + self.rm.size

    def matrix(self) -> np.ndarray:
        return matmul(self.lm.value, self.rm.value)

    def params(self) -> list[Param]:
        return [self.lm, self.rm]


def _matrix_to_weight(m: np.ndarray, kind: str, target_shape: tuple) -> np.ndarray:
    if kind == FC:
        return m
    wf, hf, cin, cout = target_shape
    return m.reshape(wf, cin, hf, cout).transpose(0, 2, 1, 3)


def _weight_to_matrix(w: np.ndarray, kind: str, target_shape: tuple) -> np.ndarray:
    if kind == FC:
        return w
    wf, hf, cin, cout = target_shape
    return w.transpose(0, 2, 1, 3).reshape(wf * cin, hf * cout)


def generate_rectification(gen: RectificationGenerator) -> np.ndarray:
    """Product of the two factors, reshaped to the target weight shape."""
    r = _matrix_to_weight(gen.matrix(), gen.target_kind, gen.target_shape)
    if r.shape != gen.target_shape:
        raise AdapterStateError(f"rectification has shape {r.shape}, target is {gen.target_shape}")
    return r


def rectification_backward(gen: RectificationGenerator, d_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the two factors given the gradient of the rectification."""
    d_m = _weight_to_matrix(d_r, gen.target_kind, gen.target_shape)
    return matmul_backward(d_m, gen.lm.value, gen.rm.value)


def adapt_weights(base: Param | np.ndarray, r: np.ndarray) -> np.ndarray:
    """New array ``base + r``; ``base`` itself is untouched."""
    value = base.value if isinstance(base, Param) else base
    if value.shape != r.shape:
        raise DimensionError(f"rectification shape {r.shape} does not match weight shape {value.shape}")
    return value + r


@dataclass(eq=False)
class ScalingFactorGenerator:
    f: Param
    target_kind: str

    @classmethod
    def ones(cls, kind: str, n_out: int, dtype=np.float64):
        return cls(Param(np.ones(n_out, dtype)), kind)

    @property
    def n_params(self) -> int:
        return self.f.size

    def params(self) -> list[Param]:
        return [self.f]


def apply_scaling(o: np.ndarray, f) -> np.ndarray:
    """Multiply the last axis of ``o`` (channels or units) by ``f``."""
    f = f.f.value if isinstance(f, ScalingFactorGenerator) else np.asarray(f)
    if f.ndim != 1 or o.shape[-1] != f.shape[0]:
        raise DimensionError(f"{f.shape[0] if f.ndim == 1 else f.shape} scaling factors for output of shape {o.shape}")
    return o * f


def scaling_backward(dy: np.ndarray, o: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(d_o, d_f)``."""
    return dy * f, (dy * o).reshape(-1, o.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------- per-task sets


@dataclass(eq=False)
class LayerAdapters:
    rect: RectificationGenerator | None
    scale: ScalingFactorGenerator | None

    def params(self) -> list[Param]:
        out = []
        if self.rect is not None:
            out += self.rect.params()
        if self.scale is not None:
            out += self.scale.params()
        return out


@dataclass(eq=False)
class TaskAdapterSet:
    """Everything a task owns: generators for every adaptable layer plus its head."""

    task_id: int
    rank: int
    lite: bool
    layers: dict[int, LayerAdapters]
    head_weight: Param
    head_bias: Param
    finalized: bool = field(default=False)

    def generator_params(self) -> list[Param]:
        return [p for i in sorted(self.layers) for p in self.layers[i].params()]

    def params(self) -> list[Param]:
        return self.generator_params() + [self.head_weight, self.head_bias]

    def generator_checksum(self) -> str:
        return checksum(*(p.value for p in self.generator_params()))

    def checksum(self) -> str:
        return checksum(*(p.value for p in self.params()))

    def n_generator_params(self) -> int:
        return sum(p.size for p in self.generator_params())

    def finalize(self) -> None:
        for p in self.params():
            p.frozen = True
            p.zero_grad()
        self.finalized = True


def _head(n_features: int, n_classes: int, rng, dtype) -> tuple[Param, Param]:
    bound = 1.0 / np.sqrt(n_features)
    w = rng.uniform(-bound, bound, size=(n_features, n_classes)).astype(dtype)
    return Param(w), Param(np.zeros(n_classes, dtype))


def _layer_plan(spec, lite: bool):
    """(index, kind, weight shape, out units, has_rect, has_scale) for every adaptable layer."""
    plan = []
    for i, layer in spec.adaptable_layers():
        has_rect = layer.kind == CONV or not lite
        has_scale = layer.kind == FC or not lite
        plan.append((i, layer.kind, tuple(layer.weight_shape), layer.out_dim, has_rect, has_scale))
    return plan


def init_adapter_set(
    task_id: int,
    spec,
    rank: int,
    lite: bool,
    n_classes: int,
    previous: TaskAdapterSet | None = None,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> TaskAdapterSet:
    """Adapters for a new task.

    With ``previous`` the generators are copied from it (the head is always
    fresh). Otherwise ``lm`` is small uniform noise, ``rm`` is zero and the
    scaling factors are one, so the adapted network starts out computing the
    base network exactly.
    """
    if task_id < 2:
        raise ValueError("task 1 trains the base network; adapters start at task 2")
    rng = rng if rng is not None else make_rng(0, task_id)
    plan = _layer_plan(spec, lite)
    if previous is not None:
        _check_compatible(previous, plan, rank, lite)
    layers = {}
    for i, kind, shape, n_out, has_rect, has_scale in plan:
        rect = scale = None
        if has_rect:
            if previous is not None:
                prev = previous.layers[i].rect
                rect = RectificationGenerator(Param(prev.lm.value.copy()), Param(prev.rm.value.copy()), kind, shape)
            else:
                rect = RectificationGenerator.zeros(kind, shape, rank, dtype)
                bound = 1.0 / np.sqrt(rect.lm.shape[0])
                rect.lm.value[...] = rng.uniform(-bound, bound, size=rect.lm.shape)
        if has_scale:
            if previous is not None:
                scale = ScalingFactorGenerator(Param(previous.layers[i].scale.f.value.copy()), kind)
            else:
                scale = ScalingFactorGenerator.ones(kind, n_out, dtype)
        layers[i] = LayerAdapters(rect, scale)
    hw, hb = _head(spec.feature_dim, n_classes, rng, dtype)
    return TaskAdapterSet(task_id, rank, lite, layers, hw, hb)


def _check_compatible(previous: TaskAdapterSet, plan, rank: int, lite: bool) -> None:
    if previous.rank != rank or previous.lite != lite:
        raise IncompatibleAdaptersError(
            f"previous adapters have rank {previous.rank}, lite={previous.lite}; requested rank {rank}, lite={lite}"
        )
    if sorted(previous.layers) != [p[0] for p in plan]:
        raise IncompatibleAdaptersError(
            f"previous adapters cover layers {sorted(previous.layers)}, network has {[p[0] for p in plan]}"
        )
    for i, kind, shape, n_out, has_rect, has_scale in plan:
        la = previous.layers[i]
        if (la.rect is not None) != has_rect or (la.scale is not None) != has_scale:
            raise IncompatibleAdaptersError(f"layer {i}: generator set differs")
        if la.rect is not None and (la.rect.target_kind != kind or la.rect.target_shape != shape):
            raise IncompatibleAdaptersError(f"layer {i}: rectification targets {la.rect.target_shape}, layer is {shape}")
        if la.scale is not None and la.scale.f.shape != (n_out,):
            raise IncompatibleAdaptersError(f"layer {i}: {la.scale.f.shape[0]} scaling factors for {n_out} outputs")


# ---------------------------------------------------------------- overhead accounting


class Overhead(NamedTuple):
    percent: float
    numerator: int
    denominator: int


def overhead_conv(wf: int, hf: int, cin: int, cout: int, rank: int) -> Overhead:
    """Extra parameters of one adapted conv layer relative to its kernel."""
    _positive(wf, hf, cin, cout, rank)
    num = rank * (wf * cin + hf * cout) + cout
    den = wf * hf * cin * cout
    return Overhead(num / den * 100, num, den)


def overhead_fc(hin: int, hout: int, rank: int) -> Overhead:
    """Extra parameters of one adapted fully connected layer relative to its weight."""
    _positive(hin, hout, rank)
    num = rank * (hin + hout) + hout
    den = hin * hout
    return Overhead(num / den * 100, num, den)


def _positive(*vals):
    if any(int(v) != v or v < 1 for v in vals):
        raise ValueError(f"sizes and rank must be positive integers, got {vals}")


@dataclass
class LayerAudit:
    index: int
    name: str
    kind: str
    weight_shape: tuple
    base_weights: int
    base_bias: int
    base_other: int
    rectification: int
    scaling: int
    per_task_norm: int

    @property
    def adapter(self) -> int:
        return self.rectification + self.scaling + self.per_task_norm


@dataclass
class ParamAudit:
    rank: int
    lite: bool
    layers: list[LayerAudit]

    @property
    def rectification_total(self) -> int:
        return sum(r.rectification for r in self.layers)

    @property
    def scaling_total(self) -> int:
        return sum(r.scaling for r in self.layers)

    @property
    def norm_total(self) -> int:
        return sum(r.per_task_norm for r in self.layers)

    @property
    def adapter_total(self) -> int:
        return self.rectification_total + self.scaling_total + self.norm_total

    @property
    def base_total(self) -> int:
        return sum(r.base_weights + r.base_bias + r.base_other for r in self.layers)

    @property
    def base_bias_total(self) -> int:
        return sum(r.base_bias for r in self.layers)

    @property
    def base_total_excl_bias(self) -> int:
        return self.base_total - self.base_bias_total

    @property
    def percent(self) -> float:
        return 100.0 * self.adapter_total / self.base_total

    @property
    def percent_excl_bias(self) -> float:
        return 100.0 * self.adapter_total / self.base_total_excl_bias

    def conventions(self) -> list[str]:
        notes = [
            "adapter counts exclude per-task classification heads",
            "percent divides by every base parameter: weights, biases, normalization affine "
            "parameters and non-adapted layers; percent_excl_bias drops biases from the base",
            "biases are frozen after the first task and never rectified",
        ]
        if self.norm_total:
            notes.append(
                "normalization layers keep per-task affine parameters (2 per channel); "
                "they are counted as adapter parameters"
            )
        if self.lite:
            notes.append("lite mode: conv layers carry only rectification, fc layers only scaling")
        return notes

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "lite": self.lite,
            "layers": [
                {
                    "index": r.index,
                    "name": r.name,
                    "kind": r.kind,
                    "weight_shape": list(r.weight_shape),
                    "base_weights": r.base_weights,
                    "base_bias": r.base_bias,
                    "base_other": r.base_other,
                    "rectification": r.rectification,
                    "scaling": r.scaling,
                    "per_task_norm": r.per_task_norm,
                    "adapter": r.adapter,
                }
                for r in self.layers
            ],
            "totals": {
                "base": self.base_total,
                "base_excl_bias": self.base_total_excl_bias,
                "rectification": self.rectification_total,
                "scaling": self.scaling_total,
                "per_task_norm": self.norm_total,
                "adapter": self.adapter_total,
                "percent": self.percent,
                "percent_excl_bias": self.percent_excl_bias,
            },
            "conventions": self.conventions(),
        }

    def table(self) -> str:
        lines = [f"{'layer':>5} {'kind':<5} {'shape':<22} {'base':>10} {'rect':>8} {'scale':>7} {'norm':>6} {'adapter':>8}"]
        for r in self.layers:
            base = r.base_weights + r.base_bias + r.base_other
            lines.append(
                f"{r.index:>5} {r.kind:<5} {str(tuple(r.weight_shape)):<22} {base:>10} "
                f"{r.rectification:>8} {r.scaling:>7} {r.per_task_norm:>6} {r.adapter:>8}"
            )
        lines.append(
            f"total base {self.base_total} (excl. bias {self.base_total_excl_bias}), "
            f"adapter {self.adapter_total}: {self.percent:.4f}% ({self.percent_excl_bias:.4f}% excl. bias)"
        )
        return "\n".join(lines)


def audit(spec, rank: int, lite: bool = False) -> ParamAudit:
    """Closed-form per-task parameter overhead of a network layout."""
    rows = []
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind in (CONV, FC):
            shape = tuple(layer.weight_shape)
            n_w = int(np.prod(shape))
            n_b = layer.out_dim if layer.bias else 0
            rect = scale = 0
            if layer.adaptable:
                lm_shape, rm_shape = factor_shapes(kind, shape, rank)
                if kind == CONV or not lite:
                    rect = lm_shape[0] * rank + rank * rm_shape[1]
                if kind == FC or not lite:
                    scale = layer.out_dim
            rows.append(LayerAudit(i, layer.name, kind, shape, n_w, n_b, 0, rect, scale, 0))
        elif kind == "norm":
            rows.append(LayerAudit(i, layer.name, kind, (layer.out_dim,), 0, 0, 2 * layer.out_dim, 0, 0, 2 * layer.out_dim))
    return ParamAudit(rank, lite, rows)


# ---------------------------------------------------------------- checkpoints


def save_adapter_set(path, aset: TaskAdapterSet) -> str:
    """Write ``aset`` as a tensor bundle; returns the content checksum."""
    tensors, layers_meta = {}, []
    for i in sorted(aset.layers):
        la = aset.layers[i]
        entry = {"index": i}
        if la.rect is not None:
            tensors[f"layer{i}.lm"] = la.rect.lm.value
            tensors[f"layer{i}.rm"] = la.rect.rm.value
            entry.update(kind=la.rect.target_kind, target_shape=list(la.rect.target_shape))
        if la.scale is not None:
            tensors[f"layer{i}.f"] = la.scale.f.value
            entry["scale_kind"] = la.scale.target_kind
        layers_meta.append(entry)
    tensors["head.weight"] = aset.head_weight.value
    tensors["head.bias"] = aset.head_bias.value
    meta = {"task_id": aset.task_id, "rank": aset.rank, "lite": aset.lite, "layers": layers_meta}
    return write_bundle(path, tensors, meta)


def load_adapter_set(path) -> TaskAdapterSet:
    tensors, meta = read_bundle(path)
    layers = {}
    for entry in meta["layers"]:
        i = entry["index"]
        rect = scale = None
        if f"layer{i}.lm" in tensors:
            rect = RectificationGenerator(
                Param(tensors[f"layer{i}.lm"]), Param(tensors[f"layer{i}.rm"]), entry["kind"], tuple(entry["target_shape"])
            )
        if f"layer{i}.f" in tensors:
            scale = ScalingFactorGenerator(Param(tensors[f"layer{i}.f"]), entry["scale_kind"])
        layers[i] = LayerAdapters(rect, scale)
    aset = TaskAdapterSet(
        meta["task_id"], meta["rank"], meta["lite"], layers, Param(tensors["head.weight"]), Param(tensors["head.bias"])
    )
    aset.finalize()
    return aset
