"""Clinical feature encoding and L2-regularized multinomial logistic regression.

Used both for the clinical-only baseline and for fusion with the MIL model's
penultimate (aggregation-token) representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import ConfigError
from .cohort import ClinicalFeatures, Location, Sex

LAYOUT_VERSION = 1
CLINICAL_DIM = 1 + len(Sex) + len(Location)


def encode_clinical(features: ClinicalFeatures) -> np.ndarray:
    """[age / 100, sex one-hot (MALE, FEMALE), location one-hot (6 slots)]."""
    if features is None:
        raise ConfigError("missing clinical data", "clinical")
    v = np.zeros(CLINICAL_DIM)
    v[0] = features.age / 100.0
    v[1 + list(Sex).index(Sex(features.sex))] = 1.0
    v[1 + len(Sex) + list(Location).index(Location(features.location))] = 1.0
    return v


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LogRegModel:
    weights: np.ndarray  # n_classes x n_features
    bias: np.ndarray
    l2: float
    n_iter: int = 0
    grad_norm: float = 0.0

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.weights.shape[1]:
            raise ConfigError(f"expected {self.weights.shape[1]} features, got {X.shape[1]}")
        return _softmax(X @ self.weights.T + self.bias)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "layout_version": LAYOUT_VERSION,
                "l2": self.l2,
                "weights": self.weights.tolist(),
                "bias": self.bias.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> LogRegModel:
        d = json.loads(text)
        if d.get("layout_version") != LAYOUT_VERSION:
            raise ConfigError(f"unsupported layout_version {d.get('layout_version')}", "layout_version")
        return cls(np.array(d["weights"], dtype=np.float64), np.array(d["bias"], dtype=np.float64), d["l2"])


def _objective(W, b, X, Y, l2):
    """Mean cross-entropy + (l2 / 2) ||W||^2 and its gradients."""
    P = _softmax(X @ W.T + b)
    n = len(X)
    loss = -np.sum(Y * np.log(np.clip(P, 1e-300, None))) / n + 0.5 * l2 * np.sum(W * W)
    R = (P - Y) / n
    return loss, R.T @ X + l2 * W, R.sum(axis=0)


def fit_logreg(
    X,
    y,
    l2: float = 1e-3,
    tol: float = 1e-6,
    max_iter: int = 20_000,
    n_classes: int | None = None,
    history: list | None = None,
) -> LogRegModel:
    """Full-batch gradient descent with Armijo backtracking from zero weights.

    Trial steps use the Barzilai-Borwein length; backtracking keeps every
    accepted step a strict decrease. Stops when the gradient norm drops
    below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ConfigError("X must be n x d with one label per row")
    if not np.all(np.isfinite(X)):
        raise ConfigError("X has non-finite entries")
    if len(np.unique(y)) < 2:
        raise ConfigError("fit_logreg needs at least two classes in y", "y")
    k = n_classes or int(y.max()) + 1
    Y = np.eye(k)[y]
    W = np.zeros((k, X.shape[1]))
    b = np.zeros(k)
    loss, gW, gb = _objective(W, b, X, Y, l2)
    step = 1.0
    prev = None
    gnorm = float(np.sqrt(np.sum(gW**2) + np.sum(gb**2)))
    it = 0
    for it in range(1, max_iter + 1):
        if gnorm < tol:
            it -= 1
            break
        if prev is not None:
            sW, sb, dW, db = W - prev[0], b - prev[1], gW - prev[2], gb - prev[3]
            sy = np.sum(sW * dW) + np.sum(sb * db)
            if sy > 0:
                step = (np.sum(sW**2) + np.sum(sb**2)) / sy
        g2 = gnorm**2
        while True:
            W_new, b_new = W - step * gW, b - step * gb
            loss_new, gW_new, gb_new = _objective(W_new, b_new, X, Y, l2)
            if loss_new <= loss - 1e-4 * step * g2 or step < 1e-12:
                break
            step *= 0.5
        if loss_new > loss:
            break
        prev = (W, b, gW, gb)
        W, b, loss, gW, gb = W_new, b_new, loss_new, gW_new, gb_new
        gnorm = float(np.sqrt(np.sum(gW**2) + np.sum(gb**2)))
        if history is not None:
            history.append(loss)
    return LogRegModel(W, b, l2, n_iter=it, grad_norm=gnorm)


def fusion_features(clinical: ClinicalFeatures, penultimate) -> np.ndarray:
    """Clinical vector concatenated with the (ensemble-averaged) image representation."""
    if clinical is None:
        raise ConfigError("missing clinical data", "clinical")
    return np.concatenate([encode_clinical(clinical), np.asarray(penultimate, dtype=np.float64)])


def fuse_predict(model: LogRegModel, clinical: ClinicalFeatures, penultimate) -> np.ndarray:
    return model.predict_proba(fusion_features(clinical, penultimate))[0]
