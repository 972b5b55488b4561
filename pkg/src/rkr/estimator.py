"""scikit-learn style estimators over the continual and zero-shot learners.

Both estimators learn one task per call: ``fit`` trains the first task and
resets any previous state, ``partial_fit`` appends the next task. Inference
takes ``task=`` (task identity is known at test time) and defaults to the most
recent task.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import GzslTask
from .gzsl import GzslConfig, GzslLearner, GzslMetrics, gzsl_metrics
from .model import AdaptedNetwork, NetworkSpec, build_reference_net
from .tensor import softmax
from .trainer import RunState, TaskDataset, TrainConfig, train_adapter_task, train_base_task


class RKRClassifier(ClassifierMixin, BaseEstimator):
    """Task-incremental classifier with a frozen shared network and per-task adapters.

    Parameters
    ----------
    network : dict or None
        Explicit layout (``NetworkSpec.to_dict`` format). When ``None`` the
        ``preset`` is built for the input shape seen by ``fit``.
    rank : int
        Inner dimension of every low-rank weight rectification.
    lite : bool
        Rectify conv layers only and scale fc layers only.
    forward_transfer : bool
        Start each task's adapters from the previous task's trained values.

    Attributes
    ----------
    classes_ : ndarray
        Classes of the most recently learned task.
    task_classes_ : dict[int, ndarray]
        Classes of every learned task, keyed by 1-based task id.
    n_tasks_ : int
    state_ : RunState
        Shared base network, task-1 head and per-task adapter sets.
    loss_history_ : dict[int, list[float]]
    """

    def __init__(
        self,
        preset="tiny-mlp",
        hidden=32,
        feature_dim=16,
        network=None,
        rank=2,
        lite=False,
        forward_transfer=True,
        epochs=30,
        batch_size=32,
        lr=0.01,
        momentum=0.9,
        milestones=(15, 25),
        gamma=0.1,
        random_state=0,
    ):
        self.preset = preset
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.network = network
        self.rank = rank
        self.lite = lite
        self.forward_transfer = forward_transfer
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.milestones = milestones
        self.gamma = gamma
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            milestones=tuple(self.milestones), gamma=self.gamma, seed=int(self.random_state or 0),
            rank=self.rank, lite=self.lite,
        )

    def _network_spec(self, input_shape) -> NetworkSpec:
        if self.network is not None:
            return self.network if isinstance(self.network, NetworkSpec) else NetworkSpec.from_dict(self.network)
        return build_reference_net(self.preset, input_shape, feature_dim=self.feature_dim, hidden=self.hidden)

    def _validate(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        classes = np.unique(y)
        if len(classes) < 2:
            raise ValueError("each task needs at least two classes")
        return X, y, classes

    def fit(self, X, y):
        """Train the shared network and the first task's head, then freeze the network."""
        X, y, classes = self._validate(X, y)
        spec = self._network_spec(X.shape[1:])
        task = TaskDataset(1, X, y, X[:0], y[:0], classes)
        base, head, history = train_base_task(spec, task, self._train_config())
        self.state_ = RunState("rkr_lite" if self.lite else "rkr", spec, base, heads={1: head})
        self.task_classes_ = {1: classes}
        self.loss_history_ = {1: history}
        self.classes_ = classes
        self.n_tasks_ = 1
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def partial_fit(self, X, y):
        """Learn one more task with adapters only; fits the first task if unfitted.

        The new task's classes must not overlap any earlier task's classes.
        """
        if not hasattr(self, "state_"):
            return self.fit(X, y)
        X, y, classes = self._validate(X, y)
        if X.shape[1:] != self.state_.spec.input_shape:
            raise ValueError(f"expected inputs of shape {self.state_.spec.input_shape}, got {X.shape[1:]}")
        overlap = np.intersect1d(classes, np.concatenate(list(self.task_classes_.values())))
        if overlap.size:
            raise ValueError(f"classes {overlap.tolist()} already belong to an earlier task")
        t = self.n_tasks_ + 1
        previous = self.state_.adapters.get(t - 1)
        task = TaskDataset(t, X, y, X[:0], y[:0], classes)
        aset, history, _ = train_adapter_task(self.state_.base, task, self._train_config(), previous, self.forward_transfer)
        self.state_.adapters[t] = aset
        self.task_classes_[t] = classes
        self.loss_history_[t] = history
        self.classes_ = classes
        self.n_tasks_ = t
        return self

    def _task(self, task) -> int:
        check_is_fitted(self, "state_")
        t = self.n_tasks_ if task is None else int(task)
        if t not in self.task_classes_:
            raise ValueError(f"unknown task {task}; learned tasks are 1..{self.n_tasks_}")
        return t

    def task_network(self, task=None) -> AdaptedNetwork:
        """The base network specialised to ``task`` (for materialization or inspection)."""
        return self.state_.network_for(self._task(task))

    def decision_function(self, X, task=None) -> np.ndarray:
        net = self.task_network(task)
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return net.forward(X)

    def predict_proba(self, X, task=None) -> np.ndarray:
        return softmax(self.decision_function(X, task))

    def predict(self, X, task=None) -> np.ndarray:
        """Global class labels of ``task``."""
        t = self._task(task)
        return self.task_classes_[t][self.decision_function(X, t).argmax(axis=1)]

    def score(self, X, y, task=None, sample_weight=None) -> float:
        """Mean accuracy (fraction, as in scikit-learn) on ``task``."""
        pred = self.predict(X, task)
        return float(np.average(pred == np.asarray(y), weights=sample_weight))


class RKRCadaVAE(TransformerMixin, BaseEstimator):
    """Sequential generalized zero-shot learner (CADA-VAE with an adapted visual encoder).

    ``fit``/``partial_fit`` take visual features of seen classes, their labels
    (row indices into ``class_embeddings``), the embedding table of all task
    classes and the unseen class ids. ``transform`` returns latent means;
    ``predict`` ranks every class, seen or unseen.
    """

    def __init__(
        self,
        variant="rkr",
        rank=16,
        latent_dim=8,
        epochs=100,
        batch_size=50,
        lr=1e-3,
        clf_lr=1e-3,
        clf_epochs=30,
        clf_samples=50,
        forward_transfer=True,
        random_state=0,
    ):
        self.variant = variant
        self.rank = rank
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clf_lr = clf_lr
        self.clf_epochs = clf_epochs
        self.clf_samples = clf_samples
        self.forward_transfer = forward_transfer
        self.random_state = random_state

    def _config(self) -> GzslConfig:
        return GzslConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, clf_lr=self.clf_lr,
            clf_epochs=self.clf_epochs, clf_samples=self.clf_samples, latent_dim=self.latent_dim,
            rank=self.rank, forward_transfer=self.forward_transfer, seed=int(self.random_state or 0),
        )

    def _task_data(self, X, y, class_embeddings, unseen_classes) -> GzslTask:
        X, y = check_X_y(X, y, dtype=np.float64)
        emb = check_array(class_embeddings, dtype=np.float64)
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= len(emb):
            raise ValueError("labels must index rows of class_embeddings")
        unseen = np.unique(np.asarray(unseen_classes, dtype=np.int64))
        if np.intersect1d(unseen, y).size:
            raise ValueError("unseen classes must not appear in the training labels")
        seen = np.setdiff1d(np.arange(len(emb)), unseen)
        t = 1 if not hasattr(self, "learner_") else self.n_tasks_ + 1
        return GzslTask(t, emb, seen, unseen, X, y, X[:0], y[:0])

    def fit(self, X, y, class_embeddings, unseen_classes):
        vars(self).pop("learner_", None)
        return self.partial_fit(X, y, class_embeddings, unseen_classes)

    def partial_fit(self, X, y, class_embeddings, unseen_classes):
        task = self._task_data(X, y, class_embeddings, unseen_classes)
        if task.task_id == 1:
            self.learner_ = GzslLearner(self._config(), self.variant)
        self.learner_.fit_task(task)
        self.n_tasks_ = task.task_id
        self.n_features_in_ = X.shape[1]
        return self

    def _task(self, task) -> int:
        check_is_fitted(self, "learner_")
        t = self.n_tasks_ if task is None else int(task)
        if t not in self.learner_.records:
            raise ValueError(f"unknown task {task}; learned tasks are 1..{self.n_tasks_}")
        return t

    def transform(self, X, task=None) -> np.ndarray:
        t = self._task(task)
        return self.learner_.transform(check_array(X, dtype=np.float64), t)

    def predict(self, X, task=None) -> np.ndarray:
        t = self._task(task)
        return self.learner_.predict(check_array(X, dtype=np.float64), t)

    def gzsl_metrics(self, X, y, task=None) -> GzslMetrics:
        t = self._task(task)
        rec = self.learner_.records[t]
        return gzsl_metrics(self.predict(X, t), np.asarray(y), rec.seen, rec.unseen)

    def score(self, X, y, task=None) -> float:
        """Harmonic mean H of unseen and seen per-class accuracy, in percent."""
        return self.gzsl_metrics(X, y, task).h
