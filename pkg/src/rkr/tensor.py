"""Dense array operators with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects in row-major order. Images use the
``(N, H, W, C)`` layout and convolution kernels the ``(W_f, H_f, C_in, C_out)``
layout. Every operator comes as a ``*_forward`` / ``*_backward`` pair; the
backward function takes the upstream gradient plus whatever the forward
returned as cache.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class GeometryError(ValueError):
    """A convolution or pooling window does not fit its input."""


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Seeded PCG64 generator; ``keys`` derive independent child streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class Param:
    """Trainable array with its gradient buffer.

    Frozen params ignore :meth:`accumulate`, so their gradient stays zero and
    optimizers leave them alone.
    """

    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match param shape {self.value.shape}")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def copy(self) -> "Param":
        return Param(self.value.copy(), frozen=self.frozen)


# ---------------------------------------------------------------- matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dc @ b.T, a.T @ dc


# ---------------------------------------------------------------- affine


def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight + bias`` for ``x`` of shape ``(H_in,)`` or ``(N, H_in)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"affine shapes disagree: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def affine_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Return ``(dx, dweight, dbias)``."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ weight.T, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------- conv2d


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise GeometryError(
            f"kernel {kernel} with stride {stride}, padding {padding} does not fit input extent {size}"
        )
    return out


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlate ``x`` (``(H, W, C_in)`` or batched) with ``kernel``.

    ``kernel[w_f, h_f, c_in, c_out]`` multiplies the input pixel at row
    ``i*stride + h_f`` and column ``j*stride + w_f``. No kernel flip.

    Returns the output and a cache for :func:`conv2d_backward`.
    """
    xb, squeeze = _as_batch(x)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be (W_f, H_f, C_in, C_out), got {kernel.shape}")
    wf, hf, cin, cout = kernel.shape
    if xb.shape[3] != cin:
        raise DimensionError(f"input channels {xb.shape[3]} do not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise GeometryError(f"invalid stride {stride} / padding {padding}")
    n, h, w, _ = xb.shape
    ho = conv_output_size(h, hf, stride, padding)
    wo = conv_output_size(w, wf, stride, padding)
    if padding:
        xb = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # (N, H', W', C_in, H_f, W_f)
    win = sliding_window_view(xb, (hf, wf), axis=(1, 2))[:, : ho * stride : stride, : wo * stride : stride]
    k = kernel.transpose(2, 1, 0, 3)  # (C_in, H_f, W_f, C_out)
    y = np.tensordot(win, k, axes=([3, 4, 5], [0, 1, 2]))
    cache = (win, kernel, stride, padding, x.shape, squeeze)
    return (y[0] if squeeze else y), cache


def conv2d_backward(dy: np.ndarray, cache):
    """Return ``(dx, dkernel)``."""
    win, kernel, stride, padding, in_shape, squeeze = cache
    if squeeze:
        dy = dy[None]
    wf, hf, cin, cout = kernel.shape
    dk = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2]))  # (C_in, H_f, W_f, C_out)
    dkernel = dk.transpose(2, 1, 0, 3)
    n = dy.shape[0]
    h, w = in_shape[-3], in_shape[-2]
    ho, wo = dy.shape[1], dy.shape[2]
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, cin), dtype=dy.dtype)
    for a in range(hf):
        for b in range(wf):
            dxp[:, a : a + stride * ho : stride, b : b + stride * wo : stride, :] += dy @ kernel[b, a].T
    dx = dxp[:, padding : padding + h, padding : padding + w, :]
    return (dx[0] if squeeze else dx), dkernel


# ---------------------------------------------------------------- pooling / activation


def maxpool_forward(x: np.ndarray, size: int = 2):
    """Non-overlapping ``size`` x ``size`` max pooling (stride == size); trailing rows/cols are dropped."""
    xb, squeeze = _as_batch(x)
    n, h, w, c = xb.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise GeometryError(f"pool window {size} does not fit input {x.shape}")
    xc = xb[:, : ho * size, : wo * size, :]
    blocks = xc.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return (y[0] if squeeze else y), (idx, x.shape, size, squeeze)


def maxpool_backward(dy: np.ndarray, cache) -> np.ndarray:
    idx, in_shape, size, squeeze = cache
    if squeeze:
        dy = dy[None]
        in_shape = (1, *in_shape)
    n, h, w, c = in_shape
    ho, wo = dy.shape[1], dy.shape[2]
    blocks = np.zeros((n, ho, wo, c, size * size), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    dxc = blocks.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * size, wo * size, c)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, : ho * size, : wo * size, :] = dxc
    return dx[0] if squeeze else dx


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


# ---------------------------------------------------------------- losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``.

    Accepts a single logit vector with an integer label, or a batch
    ``(N, C)`` with ``N`` labels.
    """
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    lab = np.atleast_1d(np.asarray(labels))
    c = lg.shape[1]
    if lab.shape[0] != lg.shape[0]:
        raise DimensionError(f"{lab.shape[0]} labels for {lg.shape[0]} logit rows")
    if np.any(lab < 0) or np.any(lab >= c):
        raise IndexError(f"label out of range [0, {c}): {lab[(lab < 0) | (lab >= c)][:5].tolist()}")
    logp = log_softmax(lg)
    n = lg.shape[0]
    loss = -logp[np.arange(n), lab].mean()
    grad = np.exp(logp)
    grad[np.arange(n), lab] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple | None
    tolerance: float
    nonfinite: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.nonfinite is None and self.max_rel_error <= self.tolerance


def grad_check(fn, inputs: dict, analytic: dict, tolerance: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences of ``fn``.

    ``fn`` takes no arguments and reads the arrays in ``inputs``, which are
    perturbed in place (and restored). Error per element is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    worst_err, worst = 0.0, None
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 arrays, {name!r} is {arr.dtype}")
        ana = np.asarray(analytic[name])
        if ana.shape != arr.shape:
            raise DimensionError(f"analytic gradient for {name!r} has shape {ana.shape}, expected {arr.shape}")
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = fn()
            arr[idx] = orig - h
            fm = fn()
            arr[idx] = orig
            num = (fp - fm) / (2 * h)
            a = float(ana[idx])
            if not (np.isfinite(num) and np.isfinite(a)):
                return GradCheckReport(np.inf, (name, idx), tolerance, nonfinite=(name, idx, a, num))
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, idx)
    return GradCheckReport(worst_err, worst, tolerance)
