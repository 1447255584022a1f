"""scikit-learn facades over the numpy engine.

``MnemonicMLPClassifier`` trains an MLP with embedded class codes and can
hand back a copy of itself with some classes forgotten. ``FisherForgetter``
holds the forgetting hyperparameters separately so that grid-search style
tooling can clone and vary them.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import ClassPartition, LabeledDataset, generate_codebook
from .nn import SgdConfig, forward, softmax
from .trainer import TrainConfig, train_with_codes
from .unlearner import DEFAULT_EPSILON, forget, forget_with_data


class MnemonicMLPClassifier(ClassifierMixin, BaseEstimator):
    """Multi-layer perceptron trained with stochastic mnemonic-code replacement.

    Class labels may be arbitrary; internally they are mapped to
    ``0..n_classes-1`` in sorted order.
    """

    def __init__(self, hidden_layer_sizes=(256, 128), t_mix=0.1, epochs=20, batch_size=128,
                 learning_rate=0.01, weight_decay=5e-4, schedule="constant",
                 codes_per_class=1, code_seed=0, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.t_mix = t_mix
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.codes_per_class = codes_per_class
        self.code_seed = code_seed
        self.random_state = random_state

    def _train_config(self, n_samples: int) -> TrainConfig:
        steps = self.epochs * -(-n_samples // self.batch_size)
        sgd = SgdConfig(self.learning_rate, self.weight_decay, self.schedule,
                        steps if self.schedule == "cosine" else None)
        return TrainConfig(t_mix=self.t_mix, epochs=self.epochs, batch_size=self.batch_size,
                           sgd=sgd, seed=int(self.random_state or 0),
                           hidden=tuple(self.hidden_layer_sizes))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        k = self.classes_.size
        dataset = LabeledDataset(X, encoded, k, "train")
        codebook = (generate_codebook(k, X.shape[1], self.codes_per_class, self.code_seed)
                    if self.t_mix > 0 else None)
        self.model_, self.record_ = train_with_codes(dataset, codebook,
                                                     self._train_config(len(dataset)))
        self.codebook_ = codebook
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.model_, X)

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        return softmax(self._logits(X))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def _encode(self, labels) -> list[int]:
        labels = np.atleast_1d(labels)
        pos = np.searchsorted(self.classes_, labels)
        pos = np.clip(pos, 0, self.classes_.size - 1)
        bad = labels[self.classes_[pos] != labels]
        if bad.size:
            raise ValueError(f"unknown classes {bad.tolist()}")
        return sorted(set(pos.tolist()))

    def forget(self, classes, forgetter: "FisherForgetter | None" = None, X=None, y=None):
        """Copy of this classifier with ``classes`` forgotten; ``self`` is left as is.

        With ``X``/``y`` the Fisher diagonals come from those rows instead of
        the codebook.
        """
        check_is_fitted(self, "model_")
        forgetter = forgetter if forgetter is not None else FisherForgetter()
        partition = ClassPartition.from_forget(self._encode(classes), self.classes_.size)
        if X is None:
            if self.codebook_ is None:
                raise ValueError("classifier was fit with t_mix=0; pass X and y")
            model, report = forget(self.model_, self.codebook_, partition, forgetter.lambda1,
                                   forgetter.lambda2, forgetter.epsilon)
        else:
            X, y = check_X_y(X, y, dtype=np.float64)
            data = LabeledDataset(X, np.searchsorted(self.classes_, y), self.classes_.size)
            model, report = forget_with_data(self.model_, data, partition, forgetter.lambda1,
                                             forgetter.lambda2, forgetter.samples_per_class,
                                             forgetter.random_state, forgetter.epsilon)
        out = clone(self)
        out.classes_ = self.classes_
        out.n_features_in_ = self.n_features_in_
        out.record_ = self.record_
        out.codebook_ = self.codebook_
        out.model_ = model
        out.forget_report_ = report
        return out


class FisherForgetter(BaseEstimator):
    """Hyperparameters of the one-shot perturbation.

    ``samples_per_class`` and ``random_state`` only matter when forgetting
    from data rows rather than codes.
    """

    def __init__(self, lambda1=1e-3, lambda2=10.0, epsilon=DEFAULT_EPSILON,
                 samples_per_class=None, random_state=0):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.epsilon = epsilon
        self.samples_per_class = samples_per_class
        self.random_state = random_state

    def transform(self, classifier: MnemonicMLPClassifier, classes, X=None, y=None):
        return classifier.forget(classes, self, X, y)
