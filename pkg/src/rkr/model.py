"""Network layouts, the shared base network and task-adapted forward passes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import (
    CONV,
    FC,
    AdapterStateError,
    TaskAdapterSet,
    adapt_weights,
    apply_scaling,
    generate_rectification,
    rectification_backward,
    scaling_backward,
)
from .io import read_bundle, write_bundle
from .tensor import (
    DimensionError,
    Param,
    affine_backward,
    affine_forward,
    checksum,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    make_rng,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
)

LAYER_KINDS = (CONV, FC, "pool", "activation", "flatten", "norm")


class SpecError(ValueError):
    """Invalid or inconsistent network layout."""


@dataclass
class LayerSpec:
    """One layer. Conv uses ``in_dim``/``out_dim`` as channel counts and ``kernel`` as ``(W_f, H_f)``."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: tuple = (1, 1)
    stride: int = 1
    padding: int = 0
    size: int = 2
    bias: bool = True
    adaptable: bool | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.adaptable is None:
            self.adaptable = self.kind in (CONV, FC)
        if self.adaptable and self.kind not in (CONV, FC):
            raise SpecError(f"only conv and fc layers can be adapted, not {self.kind!r}")
        if self.kind in (CONV, FC, "norm") and self.out_dim < 1:
            raise SpecError(f"{self.kind} layer needs a positive out_dim")
        if self.kind in (CONV, FC) and self.in_dim < 1:
            raise SpecError(f"{self.kind} layer needs a positive in_dim")

    @property
    def weight_shape(self) -> tuple:
        if self.kind == CONV:
            return (self.kernel[0], self.kernel[1], self.in_dim, self.out_dim)
        if self.kind == FC:
            return (self.in_dim, self.out_dim)
        raise SpecError(f"{self.kind} layer has no weight")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = list(self.kernel)
        return d


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list[LayerSpec]
    sequential: bool = True
    name: str = ""
    _shapes: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        if self.sequential:
            self._shapes = self._infer_shapes()

    def _infer_shapes(self) -> list[tuple]:
        shape, out = self.input_shape, []
        for i, l in enumerate(self.layers):
            where = f"layer {i} ({l.kind})"
            if l.kind == CONV:
                if len(shape) != 3 or shape[2] != l.in_dim:
                    raise SpecError(f"{where} expects (H, W, {l.in_dim}) input, got {shape}")
                try:
                    ho = conv_output_size(shape[0], l.kernel[1], l.stride, l.padding)
                    wo = conv_output_size(shape[1], l.kernel[0], l.stride, l.padding)
                except ValueError as exc:
                    raise SpecError(f"{where}: {exc}") from exc
                shape = (ho, wo, l.out_dim)
            elif l.kind == FC:
                if len(shape) != 1 or shape[0] != l.in_dim:
                    raise SpecError(f"{where} expects ({l.in_dim},) input, got {shape}")
                shape = (l.out_dim,)
            elif l.kind == "pool":
                if len(shape) != 3 or shape[0] < l.size or shape[1] < l.size:
                    raise SpecError(f"{where} cannot pool input {shape}")
                shape = (shape[0] // l.size, shape[1] // l.size, shape[2])
            elif l.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif l.kind == "norm":
                if shape[-1] != l.out_dim:
                    raise SpecError(f"{where} normalizes {l.out_dim} channels, input has {shape[-1]}")
            out.append(shape)
        return out

    def shapes(self) -> list[tuple]:
        if not self.sequential:
            raise SpecError("layer inventory is not a sequential network")
        return list(self._shapes)

    @property
    def feature_dim(self) -> int:
        """Width of the vector fed to task heads.

        For a non-sequential inventory this is the input width of its final,
        non-adapted fc layer (the shared classifier stands in for the head).
        """
        if not self.sequential:
            last = self.layers[-1] if self.layers else None
            if last is None or last.kind != FC or last.adaptable:
                raise SpecError("layer inventory must end in a non-adapted fc classifier")
            return last.in_dim
        last = self.shapes()[-1] if self.layers else self.input_shape
        if len(last) != 1:
            raise SpecError(f"network must end in a flat feature vector, ends in {last}")
        return last[0]

    def adaptable_layers(self) -> list[tuple[int, LayerSpec]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.adaptable]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "sequential": self.sequential,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            layers = [LayerSpec(**l) for l in d["layers"]]
            return cls(d["input_shape"], layers, d.get("sequential", True), d.get("name", ""))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed network spec: {exc}") from exc

    # -- operation counts

    def base_multiplies(self) -> int:
        """Multiplies of one forward pass through the adaptable layers (heads excluded)."""
        total, shapes = 0, self.shapes()
        for i, l in self.adaptable_layers():
            if l.kind == CONV:
                ho, wo, _ = shapes[i]
                total += ho * wo * int(np.prod(l.weight_shape))
            else:
                total += l.in_dim * l.out_dim
        return total

    def scaling_multiplies(self, adapters: TaskAdapterSet) -> int:
        """Per-inference multiplies spent on scaling factors: C_out*H'*W' per conv, H_out per fc."""
        shapes = self.shapes()
        return sum(
            int(np.prod(shapes[i])) for i, la in adapters.layers.items() if la.scale is not None
        )


def build_reference_net(preset: str, input_shape=None, feature_dim: int = 32, hidden: int = 32) -> NetworkSpec:
    """Desk-scale presets.

    ``tiny-cnn``: conv 5x5/8 -> relu -> pool -> conv 5x5/16 -> relu -> pool -> flatten -> fc -> relu
    (convs use padding 2). ``tiny-mlp``: fc -> relu -> fc -> relu.
    """
    if preset == "tiny-cnn":
        h, w, c = tuple(input_shape or (16, 16, 1))
        layers = [
            LayerSpec(CONV, c, 8, kernel=(5, 5), padding=2, name="conv1"),
            LayerSpec("activation"),
            LayerSpec("pool"),
            LayerSpec(CONV, 8, 16, kernel=(5, 5), padding=2, name="conv2"),
            LayerSpec("activation"),
            LayerSpec("pool"),
            LayerSpec("flatten"),
        ]
        flat = (h // 4) * (w // 4) * 16
        layers += [LayerSpec(FC, flat, feature_dim, name="fc1"), LayerSpec("activation")]
        return NetworkSpec((h, w, c), layers, name=preset)
    if preset == "tiny-mlp":
        (d,) = tuple(input_shape or (8,))
        layers = [
            LayerSpec(FC, d, hidden, name="fc1"),
            LayerSpec("activation"),
            LayerSpec(FC, hidden, feature_dim, name="fc2"),
            LayerSpec("activation"),
        ]
        return NetworkSpec((d,), layers, name=preset)
    raise SpecError(f"unknown preset {preset!r} (expected 'tiny-cnn' or 'tiny-mlp')")


def resnet18_inventory(num_classes: int = 100) -> NetworkSpec:
    """Parameter inventory of the CIFAR ResNet-18 (3x3 stem, no max-pool).

    Convs are bias-free and each is followed by batch norm; the final
    classifier is listed as a non-adapted fc layer. Skip connections make this
    a non-sequential inventory usable only for auditing.
    """
    layers = [LayerSpec(CONV, 3, 64, (3, 3), bias=False, name="conv1"), LayerSpec("norm", out_dim=64, name="bn1")]
    cin = 64
    for stage, cout in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            stride = 2 if (block == 0 and stage > 1) else 1
            p = f"layer{stage}.{block}"
            layers += [
                LayerSpec(CONV, cin, cout, (3, 3), stride, 1, bias=False, name=f"{p}.conv1"),
                LayerSpec("norm", out_dim=cout, name=f"{p}.bn1"),
                LayerSpec(CONV, cout, cout, (3, 3), 1, 1, bias=False, name=f"{p}.conv2"),
                LayerSpec("norm", out_dim=cout, name=f"{p}.bn2"),
            ]
            if stride != 1 or cin != cout:
                layers += [
                    LayerSpec(CONV, cin, cout, (1, 1), stride, bias=False, name=f"{p}.shortcut"),
                    LayerSpec("norm", out_dim=cout, name=f"{p}.shortcut_bn"),
                ]
            cin = cout
    layers.append(LayerSpec(FC, 512, num_classes, adaptable=False, name="classifier"))
    return NetworkSpec((32, 32, 3), layers, sequential=False, name="resnet18-cifar")


# ---------------------------------------------------------------- forward / backward engine


def network_forward(spec: NetworkSpec, weights, biases, scales, x: np.ndarray):
    """Run the layer stack on a batch. ``scales`` maps layer index to factors or is empty.

    Returns features and the caches for :func:`network_backward`.
    """
    caches = []
    for i, l in enumerate(spec.layers):
        if l.kind == CONV:
            y, c = conv2d_forward(x, weights[i], l.stride, l.padding)
            if l.bias:
                y = y + biases[i]
            f = scales.get(i)
            pre = y
            if f is not None:
                y = apply_scaling(y, f)
            caches.append((c, pre, f))
        elif l.kind == FC:
            y = affine_forward(x, weights[i], biases[i] if l.bias else np.zeros(l.out_dim, x.dtype))
            f = scales.get(i)
            pre = y
            if f is not None:
                y = apply_scaling(y, f)
            caches.append((x, pre, f))
        elif l.kind == "activation":
            y, c = relu_forward(x)
            caches.append(c)
        elif l.kind == "pool":
            y, c = maxpool_forward(x, l.size)
            caches.append(c)
        elif l.kind == "flatten":
            caches.append(x.shape)
            y = x.reshape(x.shape[0], -1)
        else:
            raise SpecError(f"{l.kind} layers are audit-only and cannot be executed")
        x = y
    return x, caches


def network_backward(spec: NetworkSpec, weights, caches, d_out: np.ndarray):
    """Return ``(grads, d_input)``; ``grads`` maps conv/fc layer index to ``{"W", "b", "F"}`` arrays."""
    grads = {}
    d = d_out
    for i in range(len(spec.layers) - 1, -1, -1):
        l, c = spec.layers[i], caches[i]
        if l.kind in (CONV, FC):
            inner, pre, f = c
            g = {}
            if f is not None:
                d, g["F"] = scaling_backward(d, pre, f)
            if l.bias:
                g["b"] = d.reshape(-1, l.out_dim).sum(axis=0)
            if l.kind == CONV:
                d, g["W"] = conv2d_backward(d, inner)
            else:
                d, g["W"], _ = affine_backward(d, inner, weights[i])
            grads[i] = g
        elif l.kind == "activation":
            d = relu_backward(d, c)
        elif l.kind == "pool":
            d = maxpool_backward(d, c)
        elif l.kind == "flatten":
            d = d.reshape(c)
    return grads, d


class BaseNetwork:
    """Shared weights and biases of every adaptable layer."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator | None = None, dtype=np.float64):
        self.spec = spec
        self.dtype = dtype
        rng = rng if rng is not None else make_rng(0)
        self.weights: dict[int, Param] = {}
        self.biases: dict[int, Param] = {}
        for i, l in spec.adaptable_layers():
            shape = l.weight_shape
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            self.weights[i] = Param(rng.uniform(-bound, bound, size=shape).astype(dtype))
            if l.bias:
                self.biases[i] = Param(np.zeros(l.out_dim, dtype))

    def params(self) -> list[Param]:
        return [self.weights[i] for i in sorted(self.weights)] + [self.biases[i] for i in sorted(self.biases)]

    def freeze(self) -> None:
        for p in self.params():
            p.frozen = True
            p.zero_grad()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params())

    def checksum(self) -> str:
        return checksum(*(p.value for p in self.params()))

    def copy(self) -> "BaseNetwork":
        new = object.__new__(BaseNetwork)
        new.spec, new.dtype = self.spec, self.dtype
        new.weights = {i: p.copy() for i, p in self.weights.items()}
        new.biases = {i: p.copy() for i, p in self.biases.items()}
        return new


def save_base(path, base: BaseNetwork) -> str:
    """Checkpoint the base weights together with the layout and parameter checksum."""
    tensors = {f"layer{i}.weight": p.value for i, p in sorted(base.weights.items())}
    tensors.update({f"layer{i}.bias": p.value for i, p in sorted(base.biases.items())})
    meta = {"spec": base.spec.to_dict(), "checksum": base.checksum(), "frozen": base.frozen}
    return write_bundle(path, tensors, meta)


def load_base(path) -> BaseNetwork:
    tensors, meta = read_bundle(path)
    base = object.__new__(BaseNetwork)
    base.spec = NetworkSpec.from_dict(meta["spec"])
    base.weights, base.biases = {}, {}
    for name, arr in tensors.items():
        layer, kind = name.split(".")
        target = base.weights if kind == "weight" else base.biases
        target[int(layer[len("layer"):])] = Param(arr, frozen=meta["frozen"])
    base.dtype = next(iter(base.weights.values())).value.dtype.type
    if base.checksum() != meta["checksum"]:
        raise AdapterStateError(f"{path}: restored weights do not match the stored checksum")
    return base


def new_head(n_features: int, n_classes: int, rng: np.random.Generator, dtype=np.float64) -> tuple[Param, Param]:
    bound = 1.0 / np.sqrt(n_features)
    return Param(rng.uniform(-bound, bound, size=(n_features, n_classes)).astype(dtype)), Param(np.zeros(n_classes, dtype))


class AdaptedNetwork:
    """The base network specialised to one task.

    ``adapters=None`` gives the plain base network (the first task, or the
    fine-tuning baseline) with an explicit ``head``. Pass ``head=False`` for a
    headless stack whose output is the last layer's features.
    """

    def __init__(self, base: BaseNetwork, adapters: TaskAdapterSet | None = None, head: tuple[Param, Param] | None = None):
        self.base = base
        self.adapters = adapters
        if head is None:
            if adapters is None:
                raise ValueError("a network without adapters needs an explicit head (or head=False)")
            head = (adapters.head_weight, adapters.head_bias)
        self.head = head or None
        self._materialized: dict[int, np.ndarray] | None = None
        self.rectification_calls = 0

    @property
    def spec(self) -> NetworkSpec:
        return self.base.spec

    def _task_weights(self) -> dict[int, np.ndarray]:
        out = {}
        for i, w in self.base.weights.items():
            la = self.adapters.layers.get(i) if self.adapters is not None else None
            if la is not None and la.rect is not None:
                self.rectification_calls += 1
                out[i] = adapt_weights(w, generate_rectification(la.rect))
            else:
                out[i] = w.value
        return out

    def task_weights(self) -> dict[int, np.ndarray]:
        return self._materialized if self._materialized is not None else self._task_weights()

    def scales(self) -> dict[int, np.ndarray]:
        if self.adapters is None:
            return {}
        return {i: la.scale.f.value for i, la in self.adapters.layers.items() if la.scale is not None}

    def materialize(self) -> dict[int, np.ndarray]:
        """Precompute the task weights once; later passes skip the factor products."""
        if self.adapters is not None and not self.adapters.finalized:
            raise AdapterStateError(f"adapters for task {self.adapters.task_id} are still being trained")
        self._materialized = self._task_weights()
        return self._materialized

    def dematerialize(self) -> None:
        self._materialized = None

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[1:] != self.spec.input_shape:
            if x.shape == self.spec.input_shape:
                return x[None]
            raise DimensionError(f"input of shape {x.shape[1:]} per example, network expects {self.spec.input_shape}")
        return x

    def features(self, x: np.ndarray) -> np.ndarray:
        weights = self.task_weights()
        biases = {i: p.value for i, p in self.base.biases.items()}
        feats, _ = network_forward(self.spec, weights, biases, self.scales(), self._check_input(x))
        return feats

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.head is None:
            return self.features(x)
        hw, hb = self.head
        return affine_forward(self.features(x), hw.value, hb.value)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = self._check_input(x)
        return np.concatenate([self.forward(x[s : s + batch_size]).argmax(axis=1) for s in range(0, len(x), batch_size)])

    def forward_train(self, x: np.ndarray):
        """Features plus the context :meth:`backward_train` needs."""
        x = self._check_input(x)
        weights = self._task_weights()
        biases = {i: p.value for i, p in self.base.biases.items()}
        feats, caches = network_forward(self.spec, weights, biases, self.scales(), x)
        return feats, (weights, caches)

    def backward_train(self, ctx, d_feats: np.ndarray) -> np.ndarray:
        """Accumulate gradients into every non-frozen base and adapter param; returns d(input)."""
        weights, caches = ctx
        grads, d_input = network_backward(self.spec, weights, caches, d_feats)
        for i, g in grads.items():
            self.base.weights[i].accumulate(g["W"])
            if "b" in g:
                self.base.biases[i].accumulate(g["b"])
            la = self.adapters.layers.get(i) if self.adapters is not None else None
            if la is None:
                continue
            if la.rect is not None:
                d_lm, d_rm = rectification_backward(la.rect, g["W"])
                la.rect.lm.accumulate(d_lm)
                la.rect.rm.accumulate(d_rm)
            if la.scale is not None:
                la.scale.f.accumulate(g["F"])
        return d_input

    def backward_from(self, x: np.ndarray, loss_grad_fn):
        """Forward pass through head, then backward. ``loss_grad_fn(logits) -> (loss, dlogits)``."""
        feats, ctx = self.forward_train(x)
        hw, hb = self.head
        logits = affine_forward(feats, hw.value, hb.value)
        loss, d_logits = loss_grad_fn(logits)
        d_feats, d_hw, d_hb = affine_backward(d_logits, feats, hw.value)
        hw.accumulate(d_hw)
        hb.accumulate(d_hb)
        self.backward_train(ctx, d_feats)
        return loss

    def trainable_params(self) -> list[Param]:
        ps = [p for p in self.base.params() if not p.frozen]
        if self.adapters is not None:
            ps += [p for p in self.adapters.generator_params() if not p.frozen]
        if self.head is not None:
            ps += [p for p in self.head if not p.frozen]
        return ps
