"""Finite-difference checks of every hand-written backward pass (float64)."""

from __future__ import annotations

import numpy as np

from .adapters import (
    RectificationGenerator,
    ScalingFactorGenerator,
    apply_scaling,
    generate_rectification,
    init_adapter_set,
    rectification_backward,
    scaling_backward,
)
from .gzsl import (
    CadaModel,
    LatentGaussian,
    cada_objective,
    kl_backward,
    kl_divergence,
    reparameterize,
    reparameterize_backward,
    wasserstein_backward,
    wasserstein_diagonal,
    _mlp,
)
from .model import AdaptedNetwork, BaseNetwork, build_reference_net
from .tensor import (
    GradCheckReport,
    Param,
    affine_backward,
    affine_forward,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    make_rng,
    matmul,
    matmul_backward,
    maxpool_backward,
    maxpool_forward,
    softmax_cross_entropy,
)

TOLERANCE = 1e-4
STEP = 1e-5


def _readout(rng, shape):
    """Random weights turning an array into a scalar loss ``sum(out * g)``."""
    return rng.standard_normal(shape)


def check_matmul(rng) -> GradCheckReport:
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    g = _readout(rng, (3, 2))
    da, db = matmul_backward(g, a, b)
    return grad_check(lambda: float(np.sum(matmul(a, b) * g)), {"a": a, "b": b}, {"a": da, "b": db}, TOLERANCE, STEP)


def check_affine(rng) -> GradCheckReport:
    x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
    g = _readout(rng, (5, 3))
    dx, dw, db = affine_backward(g, x, w)
    f = lambda: float(np.sum(affine_forward(x, w, b) * g))
    return grad_check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, TOLERANCE, STEP)


def check_conv2d(rng, stride: int = 1, padding: int = 0) -> GradCheckReport:
    x = rng.standard_normal((2, 4, 4, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    y, cache = conv2d_forward(x, k, stride, padding)
    g = _readout(rng, y.shape)
    dx, dk = conv2d_backward(g, cache)
    f = lambda: float(np.sum(conv2d_forward(x, k, stride, padding)[0] * g))
    return grad_check(f, {"x": x, "kernel": k}, {"x": dx, "kernel": dk}, TOLERANCE, STEP)


def check_maxpool(rng) -> GradCheckReport:
    x = rng.standard_normal((2, 4, 5, 3))
    y, cache = maxpool_forward(x)
    g = _readout(rng, y.shape)
    dx = maxpool_backward(g, cache)
    return grad_check(lambda: float(np.sum(maxpool_forward(x)[0] * g)), {"x": x}, {"x": dx}, TOLERANCE, STEP)


def check_softmax_cross_entropy(rng) -> GradCheckReport:
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    _, d = softmax_cross_entropy(logits, labels)
    return grad_check(lambda: softmax_cross_entropy(logits, labels)[0], {"logits": logits}, {"logits": d}, TOLERANCE, STEP)


def check_conv_layer_adapters(rng) -> GradCheckReport:
    """LM, RM and F through one adapted conv layer followed by cross-entropy."""
    x = rng.standard_normal((3, 5, 5, 2))
    base = rng.standard_normal((3, 3, 2, 4))
    gen = RectificationGenerator(Param(rng.standard_normal((6, 2))), Param(rng.standard_normal((2, 12))), "conv", base.shape)
    sf = ScalingFactorGenerator(Param(rng.uniform(0.5, 1.5, 4)), "conv")
    bias = rng.standard_normal(4)
    labels = rng.integers(0, 4, size=3)

    def loss_and_grads(backward: bool):
        w = base + generate_rectification(gen)
        o, cache = conv2d_forward(x, w, 1, 1)
        o = o + bias
        y = apply_scaling(o, sf)
        logits = y.mean(axis=(1, 2))
        loss, dl = softmax_cross_entropy(logits, labels)
        if not backward:
            return loss
        dy = np.broadcast_to(dl[:, None, None, :], y.shape) / (y.shape[1] * y.shape[2])
        do, df = scaling_backward(dy, o, sf.f.value)
        _, dw = conv2d_backward(do, cache)
        dlm, drm = rectification_backward(gen, dw)
        return {"lm": dlm, "rm": drm, "f": df}

    analytic = loss_and_grads(True)
    inputs = {"lm": gen.lm.value, "rm": gen.rm.value, "f": sf.f.value}
    return grad_check(lambda: loss_and_grads(False), inputs, analytic, TOLERANCE, STEP)


def check_fc_layer_adapters(rng) -> GradCheckReport:
    x = rng.standard_normal((4, 5))
    base = rng.standard_normal((5, 3))
    gen = RectificationGenerator(Param(rng.standard_normal((5, 2))), Param(rng.standard_normal((2, 3))), "fc", base.shape)
    f = rng.uniform(0.5, 1.5, 3)
    labels = rng.integers(0, 3, size=4)

    def forward():
        o = affine_forward(x, base + generate_rectification(gen), np.zeros(3))
        return o, apply_scaling(o, f)

    o, y = forward()
    _, dy = softmax_cross_entropy(y, labels)
    do, df = scaling_backward(dy, o, f)
    _, dw, _ = affine_backward(do, x, base + generate_rectification(gen))
    dlm, drm = rectification_backward(gen, dw)
    loss = lambda: softmax_cross_entropy(forward()[1], labels)[0]
    return grad_check(loss, {"lm": gen.lm.value, "rm": gen.rm.value, "f": f}, {"lm": dlm, "rm": drm, "f": df}, TOLERANCE, STEP)


def check_adapted_network(rng) -> GradCheckReport:
    """End to end through the tiny CNN: every generator param and the head."""
    spec = build_reference_net("tiny-cnn", (8, 8, 1), feature_dim=6)
    base = BaseNetwork(spec, rng)
    base.freeze()
    aset = init_adapter_set(2, spec, 2, False, 3, rng=rng)
    for p in aset.generator_params():
        p.value[...] = p.value + 0.1 * rng.standard_normal(p.shape)
    net = AdaptedNetwork(base, aset)
    x = rng.standard_normal((3, 8, 8, 1))
    labels = rng.integers(0, 3, size=3)
    for p in aset.params():
        p.zero_grad()
    net.backward_from(x, lambda lg: softmax_cross_entropy(lg, labels))
    params = aset.params()
    inputs = {f"p{i}": p.value for i, p in enumerate(params)}
    analytic = {f"p{i}": p.grad.copy() for i, p in enumerate(params)}
    return grad_check(lambda: softmax_cross_entropy(net.forward(x), labels)[0], inputs, analytic, TOLERANCE, STEP)


def check_reparameterize(rng) -> GradCheckReport:
    g = LatentGaussian(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    eps = rng.standard_normal((4, 3))
    w = _readout(rng, (4, 3))
    dm, dl = reparameterize_backward(w, g, eps)
    f = lambda: float(np.sum(reparameterize(g, eps=eps)[0] * w))
    return grad_check(f, {"mean": g.mean, "log_variance": g.log_variance}, {"mean": dm, "log_variance": dl}, TOLERANCE, STEP)


def check_kl(rng) -> GradCheckReport:
    g = LatentGaussian(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    dm, dl = kl_backward(g)
    f = lambda: float(np.sum(kl_divergence(g)))
    return grad_check(f, {"mean": g.mean, "log_variance": g.log_variance}, {"mean": dm, "log_variance": dl}, TOLERANCE, STEP)


def check_wasserstein(rng) -> GradCheckReport:
    g1 = LatentGaussian(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    g2 = LatentGaussian(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    grads = wasserstein_backward(g1, g2)
    f = lambda: float(np.sum(wasserstein_diagonal(g1, g2)))
    inputs = {"m1": g1.mean, "l1": g1.log_variance, "m2": g2.mean, "l2": g2.log_variance}
    return grad_check(f, inputs, dict(zip(inputs, grads)), TOLERANCE, STEP)


def check_cada_objective(rng) -> GradCheckReport:
    """Full objective (L1 reconstruction, KL, cross- and distribution alignment)
    through an adapted visual encoder, the attribute encoder and both decoders."""
    feat, emb, lat = 6, 4, 3
    ev_base = BaseNetwork(_mlp(feat, 5, 2 * lat), rng)
    ev_base.freeze()
    aset = init_adapter_set(2, ev_base.spec, 2, False, 0, rng=rng)
    for p in aset.generator_params():
        p.value[...] = p.value + 0.2 * rng.standard_normal(p.shape)
    model = CadaModel(
        AdaptedNetwork(ev_base, aset, head=False),
        AdaptedNetwork(BaseNetwork(_mlp(lat, 5, feat), rng), head=False),
        AdaptedNetwork(BaseNetwork(_mlp(emb, 5, 2 * lat), rng), head=False),
        AdaptedNetwork(BaseNetwork(_mlp(lat, 5, emb), rng), head=False),
    )
    x, c = rng.standard_normal((5, feat)), rng.standard_normal((5, emb))
    eps_v, eps_a = rng.standard_normal((5, lat)), rng.standard_normal((5, lat))
    weights = (0.3, 0.7, 1.3)
    params = model.trainable_params()
    for p in params:
        p.zero_grad()
    cada_objective(model, x, c, eps_v, eps_a, *weights)
    inputs = {f"p{i}": p.value for i, p in enumerate(params)}
    analytic = {f"p{i}": p.grad.copy() for i, p in enumerate(params)}
    f = lambda: cada_objective(model, x, c, eps_v, eps_a, *weights, backward=False)[0]
    return grad_check(f, inputs, analytic, TOLERANCE, STEP)


CHECKS = {
    "matmul": check_matmul,
    "affine": check_affine,
    "conv2d": check_conv2d,
    "conv2d_stride2_pad1": lambda rng: check_conv2d(rng, 2, 1),
    "maxpool": check_maxpool,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "conv_layer_rectification_scaling": check_conv_layer_adapters,
    "fc_layer_rectification_scaling": check_fc_layer_adapters,
    "adapted_tiny_cnn": check_adapted_network,
    "reparameterize": check_reparameterize,
    "kl_divergence": check_kl,
    "wasserstein_diagonal": check_wasserstein,
    "cada_objective": check_cada_objective,
}


def run_suite(seed: int = 0) -> dict[str, GradCheckReport]:
    return {name: fn(make_rng(seed, i)) for i, (name, fn) in enumerate(CHECKS.items())}
