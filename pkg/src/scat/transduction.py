"""Unsupervised transductive refinement of class prototypes.

Both objectives are minimized over the prototype matrix W on the joint
(calibration + test) features::

    TIM:       lam * H(Y|X) - H(q_hat)
    KL_PRIOR:  lam * H(Y|X) + KL(q || q_hat)

where ``H(Y|X) = -mean_i sum_c p_ic log p_ic`` is the average prediction
entropy, ``q_hat`` the mean prediction, and ``q`` a label marginal fixed
in advance (the calibration label frequencies).  Gradients are analytic.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .classifier import PrototypeClassifier, log_softmax
from .embeddings import EmbeddingSet, LabelMarginal

OBJECTIVES = ("TIM", "KL_PRIOR")
MARGINAL_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    objective: str = "KL_PRIOR"
    lam: float = 1.0
    iterations: int = 100
    base_lr: float = 0.01
    schedule: str = "cosine"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolverTrace:
    objective: np.ndarray
    lr: np.ndarray
    W_init: np.ndarray
    W_final: np.ndarray
    converged: bool = field(default=False)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,objective,lr\n")
            for t, (f, lr) in enumerate(zip(self.objective, self.lr)):
                fh.write(f"{t},{f!r},{lr!r}\n")


def cosine_lr(base_lr: float, t: int, iterations: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / iterations))


def _features(X) -> np.ndarray:
    if isinstance(X, EmbeddingSet):
        return X.features
    return np.asarray(X, dtype=np.float64)


def _prior(q) -> np.ndarray:
    return q.probs if isinstance(q, LabelMarginal) else np.asarray(q, dtype=np.float64)


def _forward(W, X, tau):
    logp = log_softmax(X @ W.T / tau)
    P = np.exp(logp)
    return P, logp


def _value_and_dlogits(kind, W, X, tau, lam, q):
    """Objective value and its derivative with respect to the logits (n x C)."""
    n = X.shape[0]
    P, logp = _forward(W, X, tau)
    plogp = P * logp
    row_neg_ent = plogp.sum(axis=1)
    cond = -lam * row_neg_ent.mean()
    # d/dz_ic of sum_c p_c log p_c is p_ic (log p_ic - sum_k p_ik log p_ik)
    G = -(lam / n) * P * (logp - row_neg_ent[:, None])

    q_hat = P.mean(axis=0)
    q_safe = np.maximum(q_hat, MARGINAL_FLOOR)
    if kind == "TIM":
        marg = float(np.sum(q_hat * np.log(q_safe)))
        dq = np.log(q_safe) + 1.0
    elif kind == "KL_PRIOR":
        q = _prior(q)
        pos = q > 0
        marg = float(np.sum(q[pos] * (np.log(q[pos]) - np.log(q_safe[pos]))))
        dq = np.where(pos, -q / q_safe, 0.0)
    else:
        raise ValueError(f"unknown objective {kind!r}")
    # chain rule through q_hat = mean_i softmax(z_i)
    G += (P * (dq[None, :] - (P @ dq)[:, None])) / n
    value = cond + marg
    if not math.isfinite(value):
        raise FloatingPointError("objective evaluated to a non-finite value")
    return value, G


def objective_tim(W, X_joint, tau: float, lam: float) -> float:
    W = np.asarray(W, dtype=np.float64)
    return _value_and_dlogits("TIM", W, _features(X_joint), tau, lam, None)[0]


def objective_kl(W, X_joint, tau: float, lam: float, q) -> float:
    W = np.asarray(W, dtype=np.float64)
    return _value_and_dlogits("KL_PRIOR", W, _features(X_joint), tau, lam, q)[0]


def value_and_gradient(kind: str, W, X_joint, tau: float, lam: float, q=None):
    W = np.asarray(W, dtype=np.float64)
    X = _features(X_joint)
    value, G = _value_and_dlogits(kind, W, X, tau, lam, q)
    return value, G.T @ X / tau


def gradient(kind: str, W, X_joint, tau: float, lam: float, q=None) -> np.ndarray:
    """Analytic C x D gradient of the selected objective with respect to W."""
    return value_and_gradient(kind, W, X_joint, tau, lam, q)[1]


def adam_cosine(
    W0: np.ndarray,
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    iterations: int,
    base_lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Full-batch Adam with a cosine learning-rate decay (no warmup).

    Returns ``(W, objective_per_iteration, lr_per_iteration)``; the objective
    is recorded before each step.
    """
    W = np.array(W0, dtype=np.float64)
    m = np.zeros_like(W)
    v = np.zeros_like(W)
    values = np.empty(iterations)
    lrs = np.empty(iterations)
    for t in range(iterations):
        try:
            f, g = value_and_grad(W)
        except FloatingPointError as exc:
            raise FloatingPointError(f"iteration {t}: {exc}") from None
        if not np.isfinite(g).all():
            raise FloatingPointError(f"iteration {t}: non-finite gradient")
        lr = cosine_lr(base_lr, t, iterations)
        values[t], lrs[t] = f, lr
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** (t + 1))
        v_hat = v / (1 - beta2 ** (t + 1))
        W -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return W, values, lrs


def solve(init: PrototypeClassifier, features: np.ndarray, q, cfg: SolverConfig = SolverConfig()):
    """Refine ``init`` on unlabeled joint features; labels enter only through ``q``.

    ``features`` must be a bare array: the solver has no way to receive
    per-sample labels.  Returns ``(classifier, trace)`` with the temperature
    unchanged.
    """
    if isinstance(features, EmbeddingSet):
        raise TypeError("solve takes a bare feature matrix, not a (possibly labeled) EmbeddingSet")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty N x D feature matrix")
    if cfg.objective == "KL_PRIOR":
        if q is None:
            raise ValueError("KL_PRIOR objective needs a label marginal")
        if _prior(q).size != init.num_classes:
            raise ValueError("label marginal and classifier disagree on the class count")
    tau = init.temperature

    def vg(W):
        return value_and_gradient(cfg.objective, W, X, tau, cfg.lam, q)

    W, values, lrs = adam_cosine(
        init.W, vg, cfg.iterations, cfg.base_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    final = vg(W)[0]
    converged = abs(final - values[-1]) <= 1e-6 * max(1.0, abs(final))
    trace = SolverTrace(values, lrs, np.array(init.W), W.copy(), converged)
    return init.with_weights(W), trace
