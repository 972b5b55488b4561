import math
from fractions import Fraction

import numpy as np
import pytest

from rkr.data import generate_gzsl_tasks
from rkr.gzsl import (
    BETA,
    DELTA,
    GAMMA,
    AnnealSchedule,
    GzslConfig,
    GzslLearner,
    LatentGaussian,
    PairingError,
    cross_alignment_loss,
    distribution_alignment_loss,
    gzsl_metrics,
    harmonic_mean,
    kl_divergence,
    per_class_accuracy,
    reparameterize,
    run_gzsl_sequence,
    split_gaussian,
    vae_loss,
    wasserstein_diagonal,
)
from rkr.tensor import make_rng


def gauss(mean, logvar):
    return LatentGaussian(np.asarray(mean, float), np.asarray(logvar, float))


def exact_h(u, s):
    u, s = Fraction(str(u)), Fraction(str(s))
    return 2 * u * s / (u + s)


@pytest.fixture(scope="module")
def quick_cfg():
    return GzslConfig(epochs=20, clf_epochs=10)


@pytest.fixture(scope="module")
def small_tasks():
    return generate_gzsl_tasks(n_tasks=2, n_train=30, n_test=10, seed=2)


class TestClosedForms:
    def test_kl_unit_mean(self):
        assert kl_divergence(gauss([1.0], [0.0])) == pytest.approx(0.5, abs=1e-12)

    def test_kl_unit_log_variance(self):
        assert kl_divergence(gauss([0.0], [1.0])) == pytest.approx((math.e - 2) / 2, abs=1e-12)

    def test_kl_standard_normal_is_zero(self):
        assert kl_divergence(gauss(np.zeros(4), np.zeros(4))) == 0.0

    def test_w2_mean_shift(self):
        assert wasserstein_diagonal(gauss([0, 0], [0, 0]), gauss([3, 4], [0, 0])) == pytest.approx(5.0, abs=1e-12)

    def test_w2_std_difference(self):
        assert wasserstein_diagonal(gauss([0.0], [0.0]), gauss([0.0], [math.log(4.0)])) == pytest.approx(1.0, abs=1e-12)

    def test_w2_identical(self):
        g = gauss([0.3, -1.0], [0.2, 0.1])
        assert wasserstein_diagonal(g, g) == 0.0

    def test_cross_alignment_toy(self):
        z = np.zeros((1, 2))
        assert cross_alignment_loss(z, z, np.ones((1, 2)), np.ones((1, 2))) == pytest.approx(4.0)

    def test_cross_alignment_requires_pairs(self):
        with pytest.raises(PairingError):
            cross_alignment_loss(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)))

    def test_vae_loss_rejects_negative_beta(self):
        with pytest.raises(ValueError):
            vae_loss(np.zeros((1, 2)), np.zeros((1, 2)), gauss([[0.0]], [[0.0]]), -0.1)

    def test_vae_loss_value(self):
        loss = vae_loss(np.zeros((1, 2)), np.array([[1.0, -2.0]]), gauss([[1.0]], [[0.0]]), 2.0)
        assert loss == pytest.approx(3.0 + 2.0 * 0.5)

    def test_distribution_alignment_shape_check(self):
        with pytest.raises(ValueError):
            distribution_alignment_loss(gauss(np.zeros((2, 3)), np.zeros((2, 3))), gauss(np.zeros((2, 4)), np.zeros((2, 4))))


class TestSchedules:
    def test_delta_at_ramp_end(self):
        assert DELTA.value(22) == pytest.approx(8.64, abs=1e-12)

    def test_zero_before_start(self):
        assert GAMMA.value(20) == 0.0 and DELTA.value(0) == 0.0

    def test_held_after_end(self):
        assert BETA.value(200) == pytest.approx(0.0026 * 90)

    def test_scaled_reaches_same_weight(self):
        s = DELTA.scaled(0.5)
        assert s.value(11) == pytest.approx(8.64) and s.value(2.9) == 0.0

    def test_config_scales_with_epochs(self):
        assert GzslConfig(epochs=50).delta == DELTA.scaled(0.5)
        assert GzslConfig().gamma == GAMMA


class TestMetrics:
    def test_equal_accuracies(self):
        assert harmonic_mean(50, 50) == 50

    def test_zero_unseen(self):
        assert harmonic_mean(0, 80) == 0 and harmonic_mean(0, 0) == 0

    def test_reference_pair_matches_exact_fraction(self):
        h = harmonic_mean(58.79, 69.36)
        assert h == pytest.approx(float(exact_h(58.79, 69.36)), abs=1e-9)
        assert round(h, 2) == 63.64

    def test_per_class_average(self):
        y = np.array([0, 0, 0, 0, 1])
        pred = np.array([0, 0, 0, 0, 0])
        assert per_class_accuracy(pred, y, [0, 1]) == 50.0

    def test_empty_class_warns_and_is_skipped(self):
        with pytest.warns(UserWarning, match="class 2"):
            assert per_class_accuracy(np.array([0, 1]), np.array([0, 1]), [0, 1, 2]) == 100.0

    def test_split_into_unseen_and_seen(self):
        m = gzsl_metrics(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), seen=[1], unseen=[0])
        assert (m.u, m.s, m.h) == (50.0, 100.0, pytest.approx(200 / 3))


class TestSampling:
    def test_reparameterize_moments(self):
        g = gauss(np.full((200_000, 1), 1.5), np.full((200_000, 1), math.log(0.25)))
        z, _ = reparameterize(g, make_rng(0))
        assert z.mean() == pytest.approx(1.5, abs=0.01)
        assert z.std() == pytest.approx(0.5, abs=0.01)

    def test_explicit_noise(self):
        z, eps = reparameterize(gauss([1.0], [0.0]), eps=np.array([2.0]))
        assert z[0] == 3.0 and eps[0] == 2.0

    def test_log_variance_clamped(self):
        g, inside = split_gaussian(np.array([[0.0, 50.0], [0.0, -50.0]]))
        assert g.log_variance.ravel().tolist() == [10.0, -10.0]
        assert not inside.any()


class TestLearner:
    def test_base_encoder_untouched_and_latents_stable(self, small_tasks, quick_cfg):
        report, learner = run_gzsl_sequence(small_tasks, quick_cfg, "rkr")
        assert report["tasks"][1]["encoder_v_base_unchanged"] is True
        for t in report["tasks"]:
            assert t["latent_drift"] == 0.0
            assert t["after"] == t["during"]

    def test_sft_moves_first_task_latents(self, small_tasks, quick_cfg):
        report, _ = run_gzsl_sequence(small_tasks, quick_cfg, "sft")
        assert report["tasks"][0]["latent_drift"] > 0
        assert report["tasks"][1]["encoder_v_base_unchanged"] is False

    def test_memory_accounting(self, small_tasks, quick_cfg):
        report, learner = run_gzsl_sequence(small_tasks, quick_cfg, "rkr")
        mem = report["memory"]
        assert mem["inference_encoder_params"] == mem["encoder_v_base"] + learner.adapters[2].n_generator_params()
        assert mem["per_task"][1]["encoder_v_adapters"] == 0

    def test_train_only_task_has_no_metrics(self, small_tasks, quick_cfg):
        t = small_tasks[0]
        t = type(t)(t.task_id, t.embeddings, t.seen, t.unseen, t.x_train, t.y_train, t.x_test[:0], t.y_test[:0])
        assert GzslLearner(quick_cfg).fit_task(t) is None

    def test_unknown_variant(self, quick_cfg):
        with pytest.raises(ValueError):
            GzslLearner(quick_cfg, "ewc")

    def test_schedule_dicts_accepted(self):
        cfg = GzslConfig(delta={"start": 1, "end": 2, "rate": 0.5})
        assert isinstance(cfg.delta, AnnealSchedule) and cfg.delta.value(5) == 0.5
