"""Split conformal prediction for classifiers that output probability vectors.

Scores are non-conformity measures: lower means the label fits better.  The
threshold is an exact order statistic of the calibration scores; no
interpolation is applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

SCORE_KINDS = ("LAC", "APS", "RAPS")
STOCHASTIC_TOL = 1e-6


@dataclass(frozen=True)
class NonconformityScorer:
    kind: str = "LAC"
    raps_k_reg: int = 1
    raps_penalty: float = 0.001
    randomized: bool = False

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}; expected one of {SCORE_KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.raps_k_reg < 0 or self.raps_penalty < 0:
            raise ValueError("RAPS k_reg and penalty must be non-negative")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "randomized": self.randomized}
        if self.kind == "RAPS":
            d.update(raps_k_reg=self.raps_k_reg, raps_penalty=self.raps_penalty)
        return d


def _check_probs(P: np.ndarray) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if np.any(P < -STOCHASTIC_TOL) or np.any(np.abs(P.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
        raise ValueError("probability rows must be non-negative and sum to 1")
    return P


def score_matrix(scorer: NonconformityScorer, P: np.ndarray, U: np.ndarray | None = None) -> np.ndarray:
    """Scores of every (row, label) pair as an N x C matrix.

    ``U`` holds one uniform draw per pair and is required iff the scorer is
    randomized.  The descending sort breaks probability ties by ascending
    class index.
    """
    P = _check_probs(P)
    if scorer.randomized and U is None:
        raise ValueError("randomized scores need uniform draws")
    if scorer.kind == "LAC":
        return 1.0 - P
    n, C = P.shape
    order = np.argsort(-P, axis=1, kind="stable")
    ranks = np.empty_like(order)
    ranks[np.arange(n)[:, None], order] = np.arange(C)
    cum = np.cumsum(np.take_along_axis(P, order, axis=1), axis=1)
    S = np.take_along_axis(cum, ranks, axis=1)
    if scorer.randomized:
        S = S - np.asarray(U, dtype=np.float64).reshape(n, C) * P
    if scorer.kind == "RAPS":
        S = S + scorer.raps_penalty * np.maximum(0, ranks + 1 - scorer.raps_k_reg)
    return S


def score(scorer: NonconformityScorer, p, y: int, u: float | None = None) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.size:
        raise ValueError(f"label {y} outside [0, {p.size})")
    if scorer.randomized:
        if u is None or not 0.0 <= u < 1.0:
            raise ValueError("randomized scores need u in [0, 1)")
        U = np.full((1, p.size), u)
    else:
        U = None
    return float(score_matrix(scorer, p[None, :], U)[0, y])


def quantile_rank(n: int, alpha: float) -> int:
    """k = ceil((n + 1)(1 - alpha)), evaluated on the decimal value of ``alpha``."""
    a = Fraction(repr(float(alpha)))
    return math.ceil((n + 1) * (1 - a))


def conformal_quantile(scores, alpha: float) -> float:
    """The k-th smallest score with k = ceil((N+1)(1-alpha)); +inf when k > N."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("need at least one calibration score")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not np.isfinite(s).all():
        raise ValueError("calibration scores must be finite")
    k = quantile_rank(s.size, alpha)
    if k > s.size:
        return math.inf
    return float(np.sort(s)[max(k, 1) - 1])


@dataclass(frozen=True)
class ConformalPredictor:
    scorer: NonconformityScorer
    threshold: float
    alpha: float
    calibration_size: int


def _uniforms(seed, shape) -> np.ndarray:
    return np.random.default_rng(seed).random(shape)


def fit_conformal(
    scorer: NonconformityScorer, probs_cal, labels_cal, alpha: float, seed=None
) -> ConformalPredictor:
    P = _check_probs(probs_cal)
    y = np.asarray(labels_cal, dtype=np.int64)
    if y.shape != (P.shape[0],) or np.any((y < 0) | (y >= P.shape[1])):
        raise ValueError("calibration labels missing or out of range")
    U = _uniforms(seed, P.shape) if scorer.randomized else None
    s = score_matrix(scorer, P, U)[np.arange(y.size), y]
    return ConformalPredictor(scorer, conformal_quantile(s, alpha), alpha, int(y.size))


def build_sets(pred: ConformalPredictor, probs, rng_seed=None) -> np.ndarray:
    """Boolean N x C membership matrix; row i is the prediction set of sample i."""
    P = _check_probs(probs)
    if math.isinf(pred.threshold):
        return np.ones(P.shape, dtype=bool)
    U = _uniforms(rng_seed, P.shape) if pred.scorer.randomized else None
    return score_matrix(pred.scorer, P, U) <= pred.threshold


def to_label_sets(mask: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(c) for c in np.flatnonzero(row)) for row in np.asarray(mask, dtype=bool)]


def as_mask(sets: np.ndarray | Sequence[Iterable[int]], num_classes: int | None = None) -> np.ndarray:
    """Accept a boolean matrix or a list of label collections."""
    if isinstance(sets, np.ndarray) and sets.dtype == bool:
        return sets
    sets = [list(s) for s in sets]
    if num_classes is None:
        num_classes = 1 + max((max(s) for s in sets if s), default=0)
    mask = np.zeros((len(sets), num_classes), dtype=bool)
    for i, s in enumerate(sets):
        mask[i, s] = True
    return mask
