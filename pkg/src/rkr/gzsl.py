"""Cross- and distribution-aligned VAEs for task-incremental zero-shot learning.

Two VAEs share a latent space: one encodes visual features, one encodes
class embeddings. Only the visual encoder is shared across tasks; from the
second task on its base weights are frozen and it is specialised with
per-task rectification and scaling generators. The attribute encoder, both
decoders and the latent classifier are small and stored per task.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .adapters import TaskAdapterSet, init_adapter_set
from .data import GzslTask
from .model import AdaptedNetwork, BaseNetwork, LayerSpec, NetworkSpec, new_head
from .optim import Adam
from .tensor import Param, checksum, make_rng, softmax_cross_entropy

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class NumericalError(RuntimeError):
    pass


class PairingError(ValueError):
    pass


class GzslInvariantViolation(RuntimeError):
    pass


@dataclass
class LatentGaussian:
    """Diagonal Gaussian; rows are examples when batched."""

    mean: np.ndarray
    log_variance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_variance)


def split_gaussian(out: np.ndarray) -> tuple[LatentGaussian, np.ndarray]:
    """First half of ``out`` is the mean, second half the (clamped) log-variance.

    Also returns the mask of log-variance entries inside the clamp range.
    """
    if not np.all(np.isfinite(out)):
        raise NumericalError("encoder produced non-finite values")
    d = out.shape[-1] // 2
    raw = out[..., d:]
    return LatentGaussian(out[..., :d], np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)), (raw > LOGVAR_MIN) & (raw < LOGVAR_MAX)


def encode(encoder: AdaptedNetwork, features: np.ndarray) -> LatentGaussian:
    return split_gaussian(encoder.forward(features))[0]


def reparameterize(g: LatentGaussian, rng: np.random.Generator | None = None, eps: np.ndarray | None = None):
    """``z = mean + std * eps`` with ``eps ~ N(0, I)``. Returns ``(z, eps)``."""
    if eps is None:
        eps = (rng if rng is not None else make_rng(0)).standard_normal(g.mean.shape)
    return g.mean + g.std * eps, eps


def reparameterize_backward(dz: np.ndarray, g: LatentGaussian, eps: np.ndarray):
    """Return ``(d_mean, d_log_variance)``."""
    return dz, dz * 0.5 * g.std * eps


def kl_divergence(g: LatentGaussian) -> np.ndarray:
    """KL(g || N(0, I)) summed over latent dims, one value per row."""
    var = g.variance
    return 0.5 * np.sum(g.mean**2 + var - 1.0 - g.log_variance, axis=-1)


def kl_backward(g: LatentGaussian):
    return g.mean, 0.5 * (g.variance - 1.0)


def l1_distance(target: np.ndarray, pred: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(pred - target), axis=-1)


def vae_loss(x: np.ndarray, reconstruction: np.ndarray, g: LatentGaussian, beta: float) -> float:
    """L1 reconstruction plus ``beta``-weighted KL, averaged over rows."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if x.shape != reconstruction.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {reconstruction.shape}")
    return float(np.mean(l1_distance(x, reconstruction) + beta * kl_divergence(g)))


def cross_alignment_loss(x_v, x_a, attr_from_visual, visual_from_attr) -> float:
    """L1(D_a(z_v), c) + L1(D_v(z_a), x), averaged over rows."""
    x_v, x_a = np.atleast_2d(x_v), np.atleast_2d(x_a)
    if len(x_v) != len(x_a):
        raise PairingError(f"{len(x_v)} visual rows paired with {len(x_a)} embedding rows")
    return float(np.mean(l1_distance(x_a, np.atleast_2d(attr_from_visual)) + l1_distance(x_v, np.atleast_2d(visual_from_attr))))


def wasserstein_diagonal(g1: LatentGaussian, g2: LatentGaussian) -> np.ndarray:
    """2-Wasserstein distance between diagonal Gaussians, one value per row."""
    return np.sqrt(np.sum((g1.mean - g2.mean) ** 2, axis=-1) + np.sum((g1.std - g2.std) ** 2, axis=-1))


def wasserstein_backward(g1: LatentGaussian, g2: LatentGaussian):
    """Gradients of the per-row distance w.r.t. ``(mean1, logvar1, mean2, logvar2)``.

    Rows at distance zero get zero gradient.
    """
    w = wasserstein_diagonal(g1, g2)[..., None]
    inv = np.divide(1.0, w, out=np.zeros_like(w), where=w > 0)
    dm = (g1.mean - g2.mean) * inv
    ds = (g1.std - g2.std) * inv
    return dm, ds * 0.5 * g1.std, -dm, -ds * 0.5 * g2.std


def distribution_alignment_loss(g_v: LatentGaussian, g_a: LatentGaussian) -> float:
    if g_v.mean.shape != g_a.mean.shape:
        raise ValueError(f"latent shapes differ: {g_v.mean.shape} vs {g_a.mean.shape}")
    return float(np.mean(wasserstein_diagonal(g_v, g_a)))


@dataclass
class AnnealSchedule:
    """Weight that ramps linearly from 0 at ``start`` to ``rate*(end-start)`` at ``end``."""

    start: float
    end: float
    rate: float

    def value(self, epoch: float) -> float:
        return self.rate * min(max(epoch - self.start, 0.0), self.end - self.start)

    def scaled(self, factor: float) -> "AnnealSchedule":
        """Same final value reached over an epoch axis stretched by ``factor``."""
        return AnnealSchedule(self.start * factor, self.end * factor, self.rate / factor)


# reference schedules for a 100-epoch run
DELTA = AnnealSchedule(6, 22, 0.54)
GAMMA = AnnealSchedule(21, 75, 0.044)
BETA = AnnealSchedule(0, 90, 0.0026)


def harmonic_mean(u: float, s: float) -> float:
    return 2.0 * u * s / (u + s) if (u + s) > 0 else 0.0


@dataclass
class GzslMetrics:
    u: float
    s: float

    @property
    def h(self) -> float:
        return harmonic_mean(self.u, self.s)

    def to_dict(self) -> dict:
        return {"U": self.u, "S": self.s, "H": self.h}


def per_class_accuracy(pred: np.ndarray, y: np.ndarray, classes) -> float:
    """Mean over ``classes`` of top-1 accuracy (percent); classes without examples are skipped."""
    accs = []
    for c in classes:
        sel = y == c
        if not np.any(sel):
            warnings.warn(f"class {c} has no test examples; excluded from the average", stacklevel=2)
            continue
        accs.append(np.mean(pred[sel] == c))
    return float(np.mean(accs) * 100.0) if accs else 0.0


def gzsl_metrics(pred: np.ndarray, y: np.ndarray, seen, unseen) -> GzslMetrics:
    return GzslMetrics(per_class_accuracy(pred, y, unseen), per_class_accuracy(pred, y, seen))


# ---------------------------------------------------------------- model


@dataclass
class GzslConfig:
    epochs: int = 100
    batch_size: int = 50
    lr: float = 1e-3
    clf_lr: float = 1e-3
    clf_epochs: int = 30
    clf_samples: int = 50
    latent_dim: int = 8
    encoder_v_hidden: int = 48
    decoder_v_hidden: int = 52
    encoder_a_hidden: int = 44
    decoder_a_hidden: int = 20
    rank: int = 16
    forward_transfer: bool = True
    seed: int = 0
    delta: AnnealSchedule = None
    gamma: AnnealSchedule = None
    beta: AnnealSchedule = None

    def __post_init__(self):
        f = self.epochs / 100.0
        self.delta = self.delta or DELTA.scaled(f)
        self.gamma = self.gamma or GAMMA.scaled(f)
        self.beta = self.beta or BETA.scaled(f)
        for name in ("delta", "gamma", "beta"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, AnnealSchedule(**v))


def _mlp(n_in: int, hidden: int, n_out: int) -> NetworkSpec:
    return NetworkSpec((n_in,), [LayerSpec("fc", n_in, hidden), LayerSpec("activation"), LayerSpec("fc", hidden, n_out)])


@dataclass
class CadaModel:
    """The four networks used for one task."""

    encoder_v: AdaptedNetwork
    decoder_v: AdaptedNetwork
    encoder_a: AdaptedNetwork
    decoder_a: AdaptedNetwork

    @property
    def latent_dim(self) -> int:
        return self.encoder_v.spec.feature_dim // 2

    def trainable_params(self) -> list[Param]:
        return [p for net in (self.encoder_v, self.decoder_v, self.encoder_a, self.decoder_a) for p in net.trainable_params()]


def cada_objective(model: CadaModel, x: np.ndarray, c: np.ndarray, eps_v, eps_a, beta, gamma, delta, backward: bool = True):
    """Total loss on one paired batch; accumulates gradients when ``backward``.

    ``rec + beta*KL + gamma*CA + delta*DA`` with every term averaged over rows.
    Returns ``(loss, parts)``.
    """
    if len(x) != len(c):
        raise PairingError(f"{len(x)} features paired with {len(c)} class embeddings")
    n = len(x)
    out_v, ctx_ev = model.encoder_v.forward_train(x)
    out_a, ctx_ea = model.encoder_a.forward_train(c)
    g_v, mask_v = split_gaussian(out_v)
    g_a, mask_a = split_gaussian(out_a)
    z_v, _ = reparameterize(g_v, eps=eps_v)
    z_a, _ = reparameterize(g_a, eps=eps_a)
    dec_v, ctx_dv = model.decoder_v.forward_train(np.concatenate([z_v, z_a]))
    dec_a, ctx_da = model.decoder_a.forward_train(np.concatenate([z_a, z_v]))
    rec_x, cross_x = dec_v[:n], dec_v[n:]
    rec_c, cross_c = dec_a[:n], dec_a[n:]

    parts = {
        "reconstruction": float(np.mean(l1_distance(x, rec_x) + l1_distance(c, rec_c))),
        "kl": float(np.mean(kl_divergence(g_v) + kl_divergence(g_a))),
        "cross_alignment": cross_alignment_loss(x, c, cross_c, cross_x),
        "distribution_alignment": distribution_alignment_loss(g_v, g_a),
    }
    loss = parts["reconstruction"] + beta * parts["kl"] + gamma * parts["cross_alignment"] + delta * parts["distribution_alignment"]
    if not backward:
        return loss, parts

    d_dec_v = np.concatenate([np.sign(rec_x - x), gamma * np.sign(cross_x - x)]) / n
    d_dec_a = np.concatenate([np.sign(rec_c - c), gamma * np.sign(cross_c - c)]) / n
    dz_dv = model.decoder_v.backward_train(ctx_dv, d_dec_v)
    dz_da = model.decoder_a.backward_train(ctx_da, d_dec_a)
    dz_v = dz_dv[:n] + dz_da[n:]
    dz_a = dz_dv[n:] + dz_da[:n]

    dm_v, dl_v = reparameterize_backward(dz_v, g_v, eps_v)
    dm_a, dl_a = reparameterize_backward(dz_a, g_a, eps_a)
    km_v, kl_v = kl_backward(g_v)
    km_a, kl_a = kl_backward(g_a)
    wm_v, wl_v, wm_a, wl_a = wasserstein_backward(g_v, g_a)
    dm_v = dm_v + (beta * km_v + delta * wm_v) / n
    dl_v = (dl_v + (beta * kl_v + delta * wl_v) / n) * mask_v
    dm_a = dm_a + (beta * km_a + delta * wm_a) / n
    dl_a = (dl_a + (beta * kl_a + delta * wl_a) / n) * mask_a
    model.encoder_v.backward_train(ctx_ev, np.concatenate([dm_v, dl_v], axis=-1))
    model.encoder_a.backward_train(ctx_ea, np.concatenate([dm_a, dl_a], axis=-1))
    return loss, parts


def _freeze(*nets: AdaptedNetwork) -> None:
    for net in nets:
        for p in net.base.params():
            p.frozen = True
            p.zero_grad()


@dataclass
class GzslTaskRecord:
    task_id: int
    decoder_v: BaseNetwork
    encoder_a: BaseNetwork
    decoder_a: BaseNetwork
    classifier: tuple[Param, Param]
    seen: np.ndarray
    unseen: np.ndarray
    metrics_during: GzslMetrics | None = None
    test_latents: np.ndarray | None = None
    loss_history: list = field(default_factory=list)


class GzslLearner:
    """Sequential zero-shot learner; ``variant`` is ``"rkr"`` or ``"sft"`` (sequential fine-tuning)."""

    def __init__(self, cfg: GzslConfig, variant: str = "rkr"):
        if variant not in ("rkr", "sft"):
            raise ValueError(f"unknown variant {variant!r}")
        self.cfg = cfg
        self.variant = variant
        self.encoder_v_base: BaseNetwork | None = None
        self.adapters: dict[int, TaskAdapterSet] = {}
        self.records: dict[int, GzslTaskRecord] = {}
        self._last: int | None = None

    # -- model access

    def encoder_v(self, task_id: int) -> AdaptedNetwork:
        return AdaptedNetwork(self.encoder_v_base, self.adapters.get(task_id), head=False)

    def model_for(self, task_id: int) -> CadaModel:
        r = self.records[task_id]
        return CadaModel(
            self.encoder_v(task_id),
            AdaptedNetwork(r.decoder_v, head=False),
            AdaptedNetwork(r.encoder_a, head=False),
            AdaptedNetwork(r.decoder_a, head=False),
        )

    def encoder_v_checksum(self) -> str:
        return self.encoder_v_base.checksum()

    # -- training

    def fit_task(self, task: GzslTask) -> GzslMetrics | None:
        """Train on one task's seen classes and fit its latent classifier.

        Evaluates on the task's test split when it has one and returns those
        metrics (``None`` otherwise).
        """
        cfg, t = self.cfg, task.task_id
        feat_dim, emb_dim, L = task.x_train.shape[1], task.embeddings.shape[1], cfg.latent_dim
        first = self.encoder_v_base is None
        init_rng = make_rng(cfg.seed, t, 0)
        if first:
            self.encoder_v_base = BaseNetwork(_mlp(feat_dim, cfg.encoder_v_hidden, 2 * L), init_rng)
            dv = BaseNetwork(_mlp(L, cfg.decoder_v_hidden, feat_dim), init_rng)
            ea = BaseNetwork(_mlp(emb_dim, cfg.encoder_a_hidden, 2 * L), init_rng)
            da = BaseNetwork(_mlp(L, cfg.decoder_a_hidden, emb_dim), init_rng)
        else:
            prev = self.records[self._last]
            dv, ea, da = prev.decoder_v.copy(), prev.encoder_a.copy(), prev.decoder_a.copy()
            for net in (dv, ea, da):
                for p in net.params():
                    p.frozen = False
            if self.variant == "sft":
                for p in self.encoder_v_base.params():
                    p.frozen = False
        if self.variant == "rkr" and not first:
            previous = self.adapters.get(self._last) if cfg.forward_transfer else None
            self.adapters[t] = init_adapter_set(t, self.encoder_v_base.spec, cfg.rank, False, 0, previous, make_rng(cfg.seed, t, 2))
        encoder_v = self.encoder_v(t)
        model = CadaModel(encoder_v, AdaptedNetwork(dv, head=False), AdaptedNetwork(ea, head=False), AdaptedNetwork(da, head=False))

        base_before = self.encoder_v_base.checksum()
        history = self._train_vae(model, task, make_rng(cfg.seed, t, 1))
        if self.variant == "rkr" and not first:
            if self.encoder_v_base.checksum() != base_before or any(np.any(p.grad) for p in self.encoder_v_base.params()):
                raise GzslInvariantViolation(f"visual encoder base changed while training task {t}")
            self.adapters[t].finalize()
        _freeze(model.decoder_v, model.encoder_a, model.decoder_a)
        if self.variant == "rkr" or first:
            _freeze(model.encoder_v)

        clf = self._train_classifier(model, task, make_rng(cfg.seed, t, 3))
        self.records[t] = GzslTaskRecord(t, dv, ea, da, clf, np.asarray(task.seen), np.asarray(task.unseen), loss_history=history)
        self._last = t
        rec = self.records[t]
        if len(task.x_test):
            rec.metrics_during = self.evaluate(task)
            rec.test_latents = self.transform(task.x_test, t)
            log.info("gzsl task %d: U %.2f S %.2f H %.2f", t, rec.metrics_during.u, rec.metrics_during.s, rec.metrics_during.h)
        return rec.metrics_during

    def _train_vae(self, model: CadaModel, task: GzslTask, rng) -> list[float]:
        cfg = self.cfg
        opt = Adam(model.trainable_params(), cfg.lr)
        x_all = task.x_train.astype(np.float64)
        c_all = task.embeddings.astype(np.float64)[task.y_train]
        n, L = len(x_all), cfg.latent_dim
        history = []
        for epoch in range(cfg.epochs):
            beta, gamma, delta = cfg.beta.value(epoch), cfg.gamma.value(epoch), cfg.delta.value(epoch)
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                eps = rng.standard_normal((2, len(idx), L))
                opt.zero_grad()
                loss, _ = cada_objective(model, x_all[idx], c_all[idx], eps[0], eps[1], beta, gamma, delta)
                if not np.isfinite(loss):
                    raise NumericalError(f"task {task.task_id}: non-finite loss at epoch {epoch}")
                opt.step()
                total += loss * len(idx)
            history.append(total / n)
        return history

    def _train_classifier(self, model: CadaModel, task: GzslTask, rng) -> tuple[Param, Param]:
        cfg = self.cfg
        classes = np.arange(task.n_classes)
        g = encode(model.encoder_a, task.embeddings.astype(np.float64))
        y = np.repeat(classes, cfg.clf_samples)
        z, _ = reparameterize(LatentGaussian(g.mean[y], g.log_variance[y]), rng)
        head = new_head(cfg.latent_dim, task.n_classes, rng)
        opt = Adam(list(head), cfg.clf_lr)
        for _ in range(cfg.clf_epochs):
            order = rng.permutation(len(y))
            for start in range(0, len(y), 32):
                idx = order[start : start + 32]
                opt.zero_grad()
                logits = z[idx] @ head[0].value + head[1].value
                _, d = softmax_cross_entropy(logits, y[idx])
                head[0].accumulate(z[idx].T @ d)
                head[1].accumulate(d.sum(axis=0))
                opt.step()
        for p in head:
            p.frozen = True
            p.zero_grad()
        return head

    # -- inference

    def transform(self, x: np.ndarray, task_id: int) -> np.ndarray:
        """Latent means of visual features under the task's encoder."""
        return encode(self.encoder_v(task_id), np.asarray(x, np.float64)).mean

    def predict(self, x: np.ndarray, task_id: int) -> np.ndarray:
        w, b = self.records[task_id].classifier
        return (self.transform(x, task_id) @ w.value + b.value).argmax(axis=1)

    def evaluate(self, task: GzslTask) -> GzslMetrics:
        r = self.records[task.task_id]
        return gzsl_metrics(self.predict(task.x_test, task.task_id), task.y_test, r.seen, r.unseen)

    # -- accounting

    def memory_accounting(self) -> dict:
        """Stored parameter counts relative to one four-network model.

        The per-task decoders and attribute encoder are only needed to keep
        training; inference needs the visual encoder, its adapters and the
        classifier, reported separately as ``inference_encoder_*``.
        """
        enc = sum(p.size for p in self.encoder_v_base.params())
        first = self.records[min(self.records)]
        one_model = enc + sum(p.size for n in (first.decoder_v, first.encoder_a, first.decoder_a) for p in n.params())
        per_task = {
            t: {
                "encoder_v_adapters": self.adapters[t].n_generator_params() if t in self.adapters else 0,
                "decoders_and_attribute_encoder": sum(p.size for n in (r.decoder_v, r.encoder_a, r.decoder_a) for p in n.params()),
                "classifier": sum(p.size for p in r.classifier),
            }
            for t, r in self.records.items()
        }
        adapters = sum(v["encoder_v_adapters"] for v in per_task.values())
        if self.variant == "rkr":
            stored = enc + sum(sum(v.values()) - v["classifier"] for v in per_task.values())
        else:
            # fine-tuning overwrites one model in place; nothing per task survives but the classifier
            stored = one_model
        return {
            "encoder_v_base": enc,
            "single_model": one_model,
            "per_task": per_task,
            "stored_excluding_classifiers": stored,
            "memory_percent": 100.0 * stored / one_model,
            "inference_encoder_params": enc + adapters,
            "inference_encoder_percent": 100.0 * (enc + adapters) / enc,
        }


def run_gzsl_sequence(tasks: list[GzslTask], cfg: GzslConfig, variant: str = "rkr") -> tuple[dict, GzslLearner]:
    """Train every task, then re-evaluate all of them; returns a JSON-ready report."""
    learner = GzslLearner(cfg, variant)
    checks = {}
    for task in tasks:
        before = learner.encoder_v_checksum() if learner.encoder_v_base is not None else None
        learner.fit_task(task)
        if before is not None:
            checks[task.task_id] = before == learner.encoder_v_checksum()
    out = []
    for task in tasks:
        rec = learner.records[task.task_id]
        after = learner.evaluate(task)
        drift = float(np.max(np.abs(learner.transform(task.x_test, task.task_id) - rec.test_latents)))
        out.append(
            {
                "task": task.task_id,
                "during": rec.metrics_during.to_dict(),
                "after": after.to_dict(),
                "latent_drift": drift,
                "encoder_v_base_unchanged": checks.get(task.task_id),
            }
        )
    report = {"variant": variant, "seed": cfg.seed, "rank": cfg.rank, "tasks": out, "memory": learner.memory_accounting()}
    return report, learner


def encoder_checksum(learner: GzslLearner, task_id: int) -> str:
    enc = learner.encoder_v(task_id)
    parts = [p.value for p in enc.base.params()]
    if enc.adapters is not None:
        parts += [p.value for p in enc.adapters.generator_params()]
    return checksum(*parts)


def config_from_dict(d: dict) -> GzslConfig:
    d = dict(d)
    for k in ("delta", "gamma", "beta"):
        if isinstance(d.get(k), dict):
            d[k] = AnnealSchedule(**d[k])
    return GzslConfig(**d)

