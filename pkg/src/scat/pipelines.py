"""End-to-end conformal strategies on embeddings.

* ``SCP``        zero-shot probabilities, split conformal on top.
* ``ADAPT_SCP``  cross-entropy linear probe fitted on the calibration set, then
                 split conformal with that same calibration set.  This breaks
                 exchangeability with the test data and exists as a negative
                 control.
* ``SCA_T``      label-free transductive refinement on calibration + test
                 features (KL prior toward the calibration label marginal),
                 then split conformal with the refined classifier.
* ``SCA_T_TIM``  as SCA_T but with the uniform-marginal TIM objective.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .classifier import PrototypeClassifier, log_softmax
from .conformal import NonconformityScorer, build_sets, fit_conformal
from .embeddings import EmbeddingSet, empirical_marginal, split_concat
from .transduction import SolverConfig, SolverTrace, adam_cosine, solve

STRATEGIES = ("SCP", "ADAPT_SCP", "SCA_T", "SCA_T_TIM")


@dataclass(frozen=True)
class ProbeConfig:
    loss: str = "cross_entropy"
    iterations: int = 100
    base_lr: float = 0.01
    schedule: str = "cosine"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported probe loss {self.loss!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "SCP"
    scorer: NonconformityScorer = field(default_factory=NonconformityScorer)
    alpha: float = 0.1
    solver: SolverConfig = field(default_factory=SolverConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.strategy == "SCA_T_TIM" and self.solver.objective != "TIM":
            object.__setattr__(self, "solver", replace(self.solver, objective="TIM"))
        if self.strategy == "SCA_T" and self.solver.objective != "KL_PRIOR":
            raise ValueError("SCA_T uses the KL_PRIOR objective; use SCA_T_TIM for TIM")

    @property
    def adaptation_key(self) -> tuple:
        """Strategies with equal keys produce identical probabilities."""
        if self.strategy == "SCP":
            return ("SCP",)
        if self.strategy == "ADAPT_SCP":
            return ("ADAPT_SCP", self.probe)
        return (self.strategy, self.solver)

    def to_dict(self) -> dict:
        d = {"strategy": self.strategy, "scorer": self.scorer.to_dict(), "alpha": self.alpha}
        if self.strategy == "ADAPT_SCP":
            d["probe"] = self.probe.to_dict()
        elif self.strategy != "SCP":
            d["solver"] = self.solver.to_dict()
        return d


def fit_linear_probe(clf: PrototypeClassifier, cal: EmbeddingSet, cfg: ProbeConfig = ProbeConfig()):
    """Minimize mean cross-entropy on the labeled calibration rows, starting from ``clf``."""
    if not cal.has_labels:
        raise ValueError("the linear probe needs a labeled calibration set")
    X, y = cal.features, cal.labels
    n, tau = X.shape[0], clf.temperature
    Y = np.zeros((n, clf.num_classes))
    Y[np.arange(n), y] = 1.0

    def vg(W):
        logp = log_softmax(X @ W.T / tau)
        loss = -logp[np.arange(n), y].mean()
        G = (np.exp(logp) - Y) / n
        return loss, G.T @ X / tau

    W, values, lrs = adam_cosine(
        clf.W, vg, cfg.iterations, cfg.base_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    trace = SolverTrace(values, lrs, np.array(clf.W), W.copy(), True)
    return clf.with_weights(W), trace


def conformalize(probs_cal, labels_cal, probs_test, scorer, alpha, seed=None):
    """Fit the threshold on calibration probabilities and build test sets."""
    base = [] if seed is None else list(np.atleast_1d(seed))
    cal_seed = None if seed is None else base + [0]
    test_seed = None if seed is None else base + [1]
    pred = fit_conformal(scorer, probs_cal, labels_cal, alpha, seed=cal_seed)
    return build_sets(pred, probs_test, rng_seed=test_seed), pred


def _require(cal: EmbeddingSet, test: EmbeddingSet):
    if not cal.has_labels:
        raise ValueError("calibration set must be fully labeled")
    if cal.dim != test.dim or cal.num_classes != test.num_classes:
        raise ValueError("calibration and test sets disagree on D or C")


def transductive_classifier(clf_init, cal: EmbeddingSet, test: EmbeddingSet, cfg: SolverConfig):
    """Solve on the joint features; the solver only sees the calibration label marginal."""
    q = empirical_marginal(cal.labels, cal.num_classes)
    joint, _, _ = split_concat(cal, test)
    return solve(clf_init, joint.features, q, cfg)


def run_scp(clf, cal: EmbeddingSet, test: EmbeddingSet, scorer, alpha, seed=None):
    _require(cal, test)
    probs_test = clf.predict_proba(test)
    sets, pred = conformalize(clf.predict_proba(cal), cal.labels, probs_test, scorer, alpha, seed)
    return sets, probs_test, pred


def run_adapt_scp(clf_init, cal, test, probe_cfg, scorer, alpha, seed=None):
    _require(cal, test)
    clf, _ = fit_linear_probe(clf_init, cal, probe_cfg)
    return run_scp(clf, cal, test, scorer, alpha, seed)


def run_sca_t(clf_init, cal, test, solver_cfg, scorer, alpha, seed=None):
    _require(cal, test)
    clf, trace = transductive_classifier(clf_init, cal, test, solver_cfg)
    sets, probs_test, pred = run_scp(clf, cal, test, scorer, alpha, seed)
    return sets, probs_test, pred, trace


def adapted_blocks(cfg: StrategyConfig, clf, cal: EmbeddingSet, test: EmbeddingSet, batch_size=None):
    """Probabilities per test block as a list of ``(probs_cal, probs_test)`` pairs.

    With ``batch_size`` set, transductive strategies re-solve on the
    calibration set plus each sequential test batch; the other strategies
    never look at the test rows, so batching leaves them unchanged.
    """
    _require(cal, test)
    if cfg.strategy == "ADAPT_SCP":
        clf, _ = fit_linear_probe(clf, cal, cfg.probe)
    if cfg.strategy in ("SCP", "ADAPT_SCP"):
        return [(clf.predict_proba(cal), clf.predict_proba(test))]
    if batch_size is None or batch_size >= test.n:
        bounds = [(0, test.n)]
    else:
        bounds = [(a, min(a + batch_size, test.n)) for a in range(0, test.n, batch_size)]
    blocks = []
    for a, b in bounds:
        batch = test.subset(np.arange(a, b))
        adapted, _ = transductive_classifier(clf, cal, batch, cfg.solver)
        blocks.append((adapted.predict_proba(cal), adapted.predict_proba(batch)))
    return blocks


def sets_from_blocks(blocks, labels_cal, scorer, alpha, seed=None):
    """Conformalize every block with its own threshold and stack the test sets."""
    masks, preds = [], []
    for b, (pc, pt) in enumerate(blocks):
        block_seed = seed if seed is None or len(blocks) == 1 else [*np.atleast_1d(seed), 2, b]
        mask, pred = conformalize(pc, labels_cal, pt, scorer, alpha, block_seed)
        masks.append(mask)
        preds.append(pred)
    return np.vstack(masks), np.vstack([pt for _, pt in blocks]), preds


def run_strategy(cfg: StrategyConfig, clf, cal, test, seed=None, batch_size=None):
    """Dispatch by ``cfg.strategy``; returns ``(sets, probs_test, predictors)``."""
    blocks = adapted_blocks(cfg, clf, cal, test, batch_size)
    return sets_from_blocks(blocks, cal.labels, cfg.scorer, cfg.alpha, seed)

