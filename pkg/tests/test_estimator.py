import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rkr import RKRCadaVAE, RKRClassifier
from rkr.data import generate_gzsl_tasks, generate_synthetic_tasks

FAST = dict(epochs=10, milestones=(6,), feature_dim=8, hidden=16)


@pytest.fixture(scope="module")
def tasks():
    return generate_synthetic_tasks(3, 2, (6,), separation=8.0, seed=2)


@pytest.fixture(scope="module")
def fitted(tasks):
    clf = RKRClassifier(**FAST)
    clf.fit(tasks[0].x_train, tasks[0].y_train)
    for t in tasks[1:]:
        clf.partial_fit(t.x_train, t.y_train)
    return clf


class TestRKRClassifier:
    def test_params_round_trip_through_clone(self):
        clf = RKRClassifier(rank=4, lite=True)
        twin = clone(clf)
        assert twin.get_params() == clf.get_params()
        assert twin.set_params(rank=3).rank == 3

    def test_every_task_predicts_its_own_labels(self, fitted, tasks):
        assert fitted.n_tasks_ == 3
        for t in tasks:
            pred = fitted.predict(t.x_test, task=t.task_id)
            assert set(np.unique(pred)) <= set(t.classes.tolist())
            assert fitted.score(t.x_test, t.y_test, task=t.task_id) >= 0.9

    def test_earlier_tasks_unchanged_by_later_ones(self, tasks):
        clf = RKRClassifier(**FAST).fit(tasks[0].x_train, tasks[0].y_train)
        clf.partial_fit(tasks[1].x_train, tasks[1].y_train)
        before = [clf.decision_function(t.x_test, task=t.task_id) for t in tasks[:2]]
        clf.partial_fit(tasks[2].x_train, tasks[2].y_train)
        for t, b in zip(tasks[:2], before):
            np.testing.assert_array_equal(clf.decision_function(t.x_test, task=t.task_id), b)

    def test_probabilities_sum_to_one(self, fitted, tasks):
        p = fitted.predict_proba(tasks[1].x_test, task=2)
        assert p.shape == (len(tasks[1].x_test), 2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_default_task_is_latest(self, fitted, tasks):
        np.testing.assert_array_equal(fitted.predict(tasks[2].x_test), fitted.predict(tasks[2].x_test, task=3))
        np.testing.assert_array_equal(fitted.classes_, tasks[2].classes)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            RKRClassifier().predict(np.zeros((2, 3)))

    def test_unknown_task(self, fitted, tasks):
        with pytest.raises(ValueError):
            fitted.predict(tasks[0].x_test, task=4)

    def test_overlapping_classes_rejected(self, tasks):
        clf = RKRClassifier(**FAST).fit(tasks[0].x_train, tasks[0].y_train)
        with pytest.raises(ValueError, match="earlier task"):
            clf.partial_fit(tasks[0].x_train, tasks[0].y_train)

    def test_shape_mismatch_rejected(self, tasks):
        clf = RKRClassifier(**FAST).fit(tasks[0].x_train, tasks[0].y_train)
        with pytest.raises(ValueError, match="shape"):
            clf.partial_fit(np.zeros((4, 5)), np.array([10, 11, 10, 11]))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            RKRClassifier(**FAST).fit(np.zeros((4, 3)), np.zeros(4))

    def test_nan_input_rejected(self):
        X = np.zeros((4, 3))
        X[0, 0] = np.nan
        with pytest.raises(ValueError):
            RKRClassifier(**FAST).fit(X, [0, 1, 0, 1])

    def test_partial_fit_on_fresh_estimator_fits(self, tasks):
        clf = RKRClassifier(**FAST).partial_fit(tasks[0].x_train, tasks[0].y_train)
        assert clf.n_tasks_ == 1 and clf.n_features_in_ == 6


@pytest.fixture(scope="module")
def gz():
    return generate_gzsl_tasks(n_tasks=2, n_train=30, n_test=10, seed=4)


@pytest.fixture(scope="module")
def model(gz):
    m = RKRCadaVAE(epochs=20, clf_epochs=10)
    m.fit(gz[0].x_train, gz[0].y_train, gz[0].embeddings, gz[0].unseen)
    first = m.transform(gz[0].x_test, task=1)
    m.partial_fit(gz[1].x_train, gz[1].y_train, gz[1].embeddings, gz[1].unseen)
    return m, first


class TestRKRCadaVAE:
    def test_transform_shape_and_stability(self, model, gz):
        m, first = model
        assert first.shape == (len(gz[0].x_test), 8)
        np.testing.assert_array_equal(m.transform(gz[0].x_test, task=1), first)

    def test_score_is_harmonic_mean(self, model, gz):
        m, _ = model
        met = m.gzsl_metrics(gz[1].x_test, gz[1].y_test)
        assert m.score(gz[1].x_test, gz[1].y_test) == met.h
        assert 0.0 <= met.h <= 100.0

    def test_unseen_class_in_training_rejected(self, gz):
        t = gz[0]
        with pytest.raises(ValueError, match="unseen"):
            RKRCadaVAE().fit(t.x_train, t.y_train, t.embeddings, [int(t.seen[0])])

    def test_labels_must_index_embeddings(self, gz):
        t = gz[0]
        with pytest.raises(ValueError):
            RKRCadaVAE().fit(t.x_train, t.y_train + 100, t.embeddings, t.unseen)

    def test_clone(self):
        assert clone(RKRCadaVAE(variant="sft")).variant == "sft"
