"""Invariants checked over generated inputs."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rkr.adapters import (
    CONV,
    FC,
    RectificationGenerator,
    ScalingFactorGenerator,
    apply_scaling,
    audit,
    generate_rectification,
    overhead_conv,
    overhead_fc,
)
from rkr.gzsl import AnnealSchedule, LatentGaussian, harmonic_mean, kl_divergence, per_class_accuracy, wasserstein_diagonal
from rkr.io import DatasetFile, read_dataset, write_dataset
from rkr.model import LayerSpec, NetworkSpec
from rkr.tensor import Param, conv2d_forward, make_rng, softmax_cross_entropy

settings.register_profile("rkr", deadline=None, max_examples=60)
settings.load_profile("rkr")

small = st.integers(1, 6)
finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def gaussians(d):
    return st.builds(
        LatentGaussian,
        arrays(np.float64, d, elements=finite),
        arrays(np.float64, d, elements=st.floats(-4, 4)),
    )


@given(h=small, w=small, cin=small, cout=small, seed=st.integers(0, 2**16))
def test_pointwise_conv_is_per_pixel_matmul(h, w, cin, cout, seed):
    r = make_rng(seed)
    x, k = r.standard_normal((h, w, cin)), r.standard_normal((1, 1, cin, cout))
    y, _ = conv2d_forward(x, k)
    np.testing.assert_allclose(y, x @ k[0, 0], rtol=1e-12, atol=1e-12)


@given(wf=st.integers(1, 3), hf=st.integers(1, 3), cin=small, cout=small, k=small, seed=st.integers(0, 2**16))
def test_rectification_rank_bounded_by_k(wf, hf, cin, cout, k, seed):
    r = make_rng(seed)
    g = RectificationGenerator(Param(r.standard_normal((wf * cin, k))), Param(r.standard_normal((k, hf * cout))), CONV, (wf, hf, cin, cout))
    m = generate_rectification(g).transpose(0, 2, 1, 3).reshape(wf * cin, hf * cout)
    s = np.linalg.svd(m, compute_uv=False)
    assert np.sum(s > 1e-9 * s.max()) <= k


@given(wf=st.integers(1, 5), hf=st.integers(1, 5), cin=st.integers(1, 64), cout=st.integers(1, 64), k=st.integers(1, 8))
def test_conv_overhead_matches_constructed_generators(wf, hf, cin, cout, k):
    rect = RectificationGenerator.zeros(CONV, (wf, hf, cin, cout), k)
    scale = ScalingFactorGenerator.ones(CONV, cout)
    o = overhead_conv(wf, hf, cin, cout, k)
    assert o.numerator == rect.lm.size + rect.rm.size + scale.f.size
    assert o.denominator == wf * hf * cin * cout


@given(hin=st.integers(1, 200), hout=st.integers(1, 200), k=st.integers(1, 8))
def test_fc_overhead_matches_constructed_generators(hin, hout, k):
    rect = RectificationGenerator.zeros(FC, (hin, hout), k)
    assert overhead_fc(hin, hout, k).numerator == rect.lm.size + rect.rm.size + hout


@given(dims=st.lists(st.integers(1, 40), min_size=2, max_size=5), k=st.integers(1, 6), lite=st.booleans())
def test_rectification_count_linear_in_rank(dims, k, lite):
    layers = [LayerSpec("fc", a, b) for a, b in zip(dims, dims[1:])]
    spec = NetworkSpec((dims[0],), layers)
    one, many = audit(spec, 1, lite), audit(spec, k, lite)
    assert many.rectification_total == k * one.rectification_total
    assert many.scaling_total == one.scaling_total


@given(c=st.integers(1, 5), target=st.integers(0, 4), factor=finite, seed=st.integers(0, 2**16))
def test_scaling_only_touches_its_channel(c, target, factor, seed):
    target %= c
    out = make_rng(seed).standard_normal((2, 3, 3, c))
    f = np.ones(c)
    f[target] = factor
    scaled = apply_scaling(out, f)
    keep = np.arange(c) != target
    np.testing.assert_array_equal(scaled[..., keep], out[..., keep])
    np.testing.assert_array_equal(scaled[..., target], out[..., target] * factor)


@given(g=st.integers(1, 6).flatmap(gaussians))
def test_kl_non_negative(g):
    assert kl_divergence(g) >= -1e-12


@given(data=st.data(), d=st.integers(1, 6))
def test_w2_is_a_metric(data, d):
    a, b, c = (data.draw(gaussians(d)) for _ in range(3))
    ab, ba = wasserstein_diagonal(a, b), wasserstein_diagonal(b, a)
    assert ab >= 0 and ab == ba
    assert wasserstein_diagonal(a, a) == 0
    assert wasserstein_diagonal(a, c) <= ab + wasserstein_diagonal(b, c) + 1e-9


@given(start=st.floats(0, 50), length=st.floats(0.1, 50), rate=st.floats(0, 2), e1=st.floats(0, 200), e2=st.floats(0, 200))
def test_anneal_monotone_and_bounded(start, length, rate, e1, e2):
    s = AnnealSchedule(start, start + length, rate)
    lo, hi = sorted((e1, e2))
    assert 0 <= s.value(lo) <= s.value(hi) <= rate * length + 1e-12


@given(u=st.floats(0, 100), s=st.floats(0, 100))
def test_harmonic_mean_between_min_and_arithmetic_mean(u, s):
    h = harmonic_mean(u, s)
    assert min(u, s) - 1e-9 <= h <= (u + s) / 2 + 1e-9


@given(y=st.lists(st.integers(0, 3), min_size=1, max_size=30), seed=st.integers(0, 2**16), copies=st.integers(2, 4))
def test_per_class_accuracy_invariant_to_duplication(y, seed, copies):
    y = np.array(y)
    pred = make_rng(seed).integers(0, 4, len(y))
    classes = np.unique(y)
    assert per_class_accuracy(np.tile(pred, copies), np.tile(y, copies), classes) == per_class_accuracy(pred, y, classes)


@given(logits=arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)), data=st.data())
def test_cross_entropy_gradient_sums_to_zero(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, grad = softmax_cross_entropy(logits, label)
    assert loss >= 0
    assert abs(grad.sum()) < 1e-12
    assert grad[label] <= 0


@given(
    x=st.tuples(st.integers(0, 5), st.integers(1, 4), st.integers(1, 3)).flatmap(
        lambda s: arrays(np.float32, s, elements=st.floats(-1e6, 1e6, width=32))
    ),
    with_embeddings=st.booleans(),
    data=st.data(),
)
def test_dataset_round_trip(tmp_path_factory, x, with_embeddings, data):
    y = np.array(data.draw(st.lists(st.integers(0, 2**32 - 1), min_size=len(x), max_size=len(x))), dtype=np.int64)
    emb = np.arange(6, dtype=np.float32).reshape(3, 2) if with_embeddings else None
    path = tmp_path_factory.mktemp("ds") / "d.rkrd"
    write_dataset(path, DatasetFile(x, y, 3, emb))
    back = read_dataset(path)
    assert back.inputs.tobytes() == x.tobytes() and back.inputs.shape == x.shape
    assert back.labels.tolist() == y.tolist()
    assert (back.embeddings is None) == (emb is None)
