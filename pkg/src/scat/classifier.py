"""Prototype softmax classifier over frozen embeddings."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingSet, read_binary, write_binary

DEFAULT_TEMPERATURE = 0.01


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _features(X) -> np.ndarray:
    return X.features if isinstance(X, EmbeddingSet) else np.asarray(X, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class PrototypeClassifier:
    """Class prototypes ``W`` (C x D) scored by ``softmax(v @ W.T / temperature)``."""

    W: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] < 2:
            raise ValueError(f"W must be C x D with C >= 2, got shape {W.shape}")
        if not np.isfinite(W).all():
            raise ValueError("prototype matrix contains non-finite values")
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def logits(self, X) -> np.ndarray:
        X = _features(X)
        if X.shape[1] != self.dim:
            raise ValueError(f"embedding dimension {X.shape[1]} != prototype dimension {self.dim}")
        return X @ self.W.T / self.temperature

    def predict_proba(self, X) -> np.ndarray:
        """N x C row-stochastic probability matrix."""
        with np.errstate(over="ignore", invalid="ignore"):
            P = softmax(self.logits(X))
        if not np.isfinite(P).all():
            raise FloatingPointError(
                f"non-finite probabilities; temperature={self.temperature} is too small"
            )
        return P

    def with_weights(self, W: np.ndarray) -> "PrototypeClassifier":
        return PrototypeClassifier(W, self.temperature)


def predict_proba(clf: PrototypeClassifier, X) -> np.ndarray:
    return clf.predict_proba(X)


def build_text_prototypes(
    template_embeddings: Sequence[np.ndarray], temperature: float = DEFAULT_TEMPERATURE
) -> PrototypeClassifier:
    """Average each class's template embeddings into one prototype.

    ``template_embeddings[c]`` is a J_c x D array of unit vectors.  The mean is
    deliberately left un-normalized.
    """
    if len(template_embeddings) < 2:
        raise ValueError("need template embeddings for at least two classes")
    rows = []
    for c, T in enumerate(template_embeddings):
        T = np.atleast_2d(np.asarray(T, dtype=np.float64))
        if T.shape[0] == 0 or T.size == 0:
            raise ValueError(f"class {c} has no template embeddings")
        rows.append(T.mean(axis=0))
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise ValueError(f"template embeddings disagree on dimension: {sorted(dims)}")
    return PrototypeClassifier(np.vstack(rows), temperature)


def save_classifier(clf: PrototypeClassifier, path) -> None:
    """W goes to the binary embedding format, temperature to ``<path>.json``."""
    path = Path(path)
    write_binary(path, clf.W, np.arange(clf.num_classes), clf.num_classes)
    Path(f"{path}.json").write_text(json.dumps({"temperature": clf.temperature}) + "\n")


def load_classifier(path, temperature: float | None = None) -> PrototypeClassifier:
    path = Path(path)
    W, _, _ = read_binary(path)
    if temperature is None:
        sidecar = Path(f"{path}.json")
        temperature = (
            json.loads(sidecar.read_text())["temperature"] if sidecar.exists() else DEFAULT_TEMPERATURE
        )
    return PrototypeClassifier(W.astype(np.float64), float(temperature))
