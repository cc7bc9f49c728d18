"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line; the lines are repeated in a summary
section at the end of the pytest run.  Run on its own with

    python3 -m pytest tests/test_acceptance.py -v
"""
import json
import math
import time

import numpy as np
import pytest

from oracles import brute_force_quantile, central_difference, max_relative_error
from scat.cli import main
from scat.conformal import NonconformityScorer, conformal_quantile, score, score_matrix
from scat.embeddings import LabelMarginal, empirical_marginal, split_concat
from scat.evaluation import aca, ccv, coverage, mean_set_size, run_trials, sample_calibration
from scat.pipelines import StrategyConfig
from scat.synth import SynthSpec, SynthWorld
from scat.transduction import SolverConfig, gradient, objective_kl, objective_tim, solve

LAC = NonconformityScorer("LAC")
APS = NonconformityScorer("APS")
TRIALS = 200
M = 1000


def _band(alpha, N):
    return 1 - alpha - 0.01, 1 - alpha + 1 / (N + 1) + 0.01


def _world(**kw):
    base = dict(num_classes=5, dim=64, concentration=5.0, n_samples=2000, seed=0)
    base.update(kw)
    return SynthWorld(SynthSpec(**base))


def _trials(world, strategies, K=16, n_trials=TRIALS, n_pool=2000):
    return run_trials(world.source(n_pool), world.source(M), world.zero_shot, strategies,
                      K=K, n_trials=n_trials, marginal=world.spec.marginal)


# ------------------------------------------------------------------------ 1


@pytest.mark.parametrize("alpha, lo, hi", [(0.1, 0.89, 0.925), (0.05, 0.94, 0.9725)])
def test_c1_coverage_guarantee(verdict, alpha, lo, hi):
    start = time.perf_counter()
    rep = _trials(_world(), [StrategyConfig("SCP", LAC, alpha)])
    elapsed = time.perf_counter() - start
    cov = rep.row("SCP", "LAC", alpha)["coverage"]["mean"]
    ok = lo <= cov <= hi and elapsed < 60
    assert verdict(f"1  coverage guarantee a={alpha}", ok,
                   f"mean SCP coverage {cov:.4f} in [{lo}, {hi}], {elapsed:.1f}s")


# ------------------------------------------------------------------------ 2


def test_c2_quantile_oracle(verdict):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        alpha = float(rng.choice([0.05, 0.1, 0.2]))
        # coarse grid so ties are common
        scores = rng.integers(0, 20, n) / 20 if rng.random() < 0.3 else rng.random(n)
        mismatches += conformal_quantile(scores, alpha) != brute_force_quantile(scores, alpha)
    assert verdict("2  quantile oracle", mismatches == 0, f"{mismatches}/1000 mismatches")


# ------------------------------------------------------------------------ 3


def test_c3_gradient_correctness(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 21))
        C = int(rng.integers(2, 6))
        D = int(rng.integers(2, 9))
        X = rng.standard_normal((n, D))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        W = rng.standard_normal((C, D)) * 0.5
        tau = float(rng.uniform(0.2, 1.0))
        q = rng.dirichlet(np.ones(C))
        for kind, f in (
            ("TIM", lambda V: objective_tim(V, X, tau, 1.0)),
            ("KL_PRIOR", lambda V: objective_kl(V, X, tau, 1.0, q)),
        ):
            err = max_relative_error(gradient(kind, W, X, tau, 1.0, q), central_difference(f, W))
            worst = max(worst, err)
    assert verdict("3  gradient correctness", worst < 1e-4, f"max relative error {worst:.2e}")


# ------------------------------------------------------------------------ 4


def test_c4_permutation_invariance(verdict):
    world = _world(prototype_perturbation=0.6)
    pool = world.sample(2000, (4, 1))
    cal, _ = sample_calibration(pool, 16, (4, 3))
    test = world.sample(M, (4, 2)).unlabeled()
    joint, _, _ = split_concat(cal, test)
    q = empirical_marginal(cal.labels, 5)
    perm = np.random.default_rng(4).permutation(joint.n)
    a, _ = solve(world.zero_shot, joint.features, q, SolverConfig())
    b, _ = solve(world.zero_shot, joint.features[perm], q, SolverConfig())
    dW = float(np.linalg.norm(a.W - b.W) / np.linalg.norm(a.W))
    idx = np.arange(cal.n)
    thr = [conformal_quantile(score_matrix(LAC, c.predict_proba(cal))[idx, cal.labels], 0.1) for c in (a, b)]
    dT = abs(thr[0] - thr[1])
    assert verdict("4  permutation invariance", dW < 1e-6 and dT < 1e-9,
                   f"relative dW {dW:.2e}, threshold diff {dT:.2e}")


# ------------------------------------------------------------------------ 5


def test_c5_negative_control(verdict):
    world = _world(dim=256)
    strategies = [StrategyConfig(s, LAC, 0.1) for s in ("SCP", "ADAPT_SCP", "SCA_T")]
    rep = _trials(world, strategies, K=8)
    cov = {s.strategy: rep.row(s.strategy)["coverage"]["mean"] for s in strategies}
    lo, hi = 0.89, 0.925
    ok = cov["ADAPT_SCP"] < 0.88 and all(lo <= cov[s] <= hi for s in ("SCP", "SCA_T"))
    assert verdict("5  negative control", ok,
                   ", ".join(f"{k} {v:.4f}" for k, v in cov.items()))


# ------------------------------------------------------------------------ 6


def test_c6_efficiency_gain(verdict):
    world = _world(num_classes=10, prototype_perturbation=0.6, n_samples=3000)
    rep = _trials(world, [StrategyConfig(s, APS, 0.1) for s in ("SCP", "SCA_T")], n_pool=3000)
    scp, sca = rep.row("SCP", "APS"), rep.row("SCA_T", "APS")
    lo, hi = _band(0.1, 160)
    size_scp, size_sca = scp["mean_set_size"]["mean"], sca["mean_set_size"]["mean"]
    cov_scp, cov_sca = scp["coverage"]["mean"], sca["coverage"]["mean"]
    reduction = 100 * (size_scp - size_sca) / size_scp
    ok = size_sca < size_scp and lo <= cov_scp <= hi and lo <= cov_sca <= hi
    assert verdict("6  efficiency gain", ok,
                   f"size SCP {size_scp:.3f} -> SCA-T {size_sca:.3f} ({reduction:.1f}% smaller), "
                   f"coverage {cov_scp:.4f}/{cov_sca:.4f} in [{lo:.3f}, {hi:.4f}]")


# ------------------------------------------------------------------------ 7


def test_c7_tim_kl_relation(verdict):
    # Holds for the reverse divergence KL(q_hat || u); the forward
    # KL(u || q_hat) used by the prior objective does not satisfy it.
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, C, D = int(rng.integers(2, 21)), int(rng.integers(2, 6)), int(rng.integers(2, 9))
        X = rng.standard_normal((n, D))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        W = rng.standard_normal((C, D))
        tau = float(rng.uniform(0.2, 1.0))
        diff = objective_kl(W, X, tau, 1.0, LabelMarginal.uniform(C)) - objective_tim(W, X, tau, 1.0)
        worst = max(worst, abs(diff - math.log(C)))
    assert verdict("7  TIM-vs-KL log C relation", worst < 1e-9, f"max |diff - log C| = {worst:.3e}")


# ------------------------------------------------------------------------ 8


def test_c8_score_hand_examples(verdict):
    raps = NonconformityScorer("RAPS", raps_k_reg=1, raps_penalty=0.001)
    got = (score(LAC, [0.25] * 4, 0), score(APS, [0.5, 0.3, 0.2], 1), score(raps, [0.5, 0.3, 0.2], 1))
    want = (0.75, 0.8, 0.801)
    ok = got == want
    assert verdict("8  score hand examples", ok, f"LAC/APS/RAPS = {got}")


# ------------------------------------------------------------------------ 9


def test_c9_metric_hand_examples(verdict):
    y = np.repeat([0, 1], 5)
    mask = np.zeros((10, 2), bool)
    mask[np.arange(10), y] = True
    mask[5, 1] = False
    ccv_two = ccv(mask, y, 0.1, 2)
    ccv_one = ccv(np.ones((4, 3), bool), np.zeros(4, int), 0.1, 3)
    P = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
    aca_val = aca(P, [0, 0, 1, 1])
    yt = np.array([0, 1, 2, 1])
    trivial = (
        coverage(np.ones((4, 3), bool), yt) == 1.0
        and coverage(np.zeros((4, 3), bool), yt) == 0.0
        and coverage([(0,), (1, 2), (0, 2), (0,)], yt) == 0.75
        and mean_set_size([(0,), (1,), (2,)]) == 1.0
        and mean_set_size([(0,), (0, 1), (0, 1, 2)]) == 2.0
        and mean_set_size(np.ones((3, 10), bool)) == 10.0
    )
    ok = ccv_two == 10.0 and ccv_one == 10.0 and aca_val == 75.0 and trivial
    assert verdict("9  metric hand examples", ok, f"CCV {ccv_two}/{ccv_one}, ACA {aca_val}")


# ----------------------------------------------------------------------- 10


def test_c10_determinism(verdict, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "data": {"synth": {"num_classes": 5, "dim": 64, "concentration": 5.0, "n_samples": 2000,
                           "seed": 0, "prototype_perturbation": 0.6, "n_test": M}},
        "strategies": ["SCP", "ADAPT_SCP", "SCA_T", "SCA_T_TIM"],
        "scorers": ["LAC", "APS"],
        "K": 16,
        "n_trials": 5,
    }))
    codes = [main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--threads", t])
             for d, t in (("a", "1"), ("b", "4"))]
    same = (tmp_path / "a" / "trials.csv").read_bytes() == (tmp_path / "b" / "trials.csv").read_bytes()
    assert verdict("10 determinism", codes == [0, 0] and same, "trials.csv byte-identical across reruns")


# ----------------------------------------------------------------------- 11

IMBALANCED = (0.5, 0.2, 0.15, 0.1, 0.05)


@pytest.fixture(scope="module")
def imbalance_report():
    world = _world(prototype_perturbation=0.6, class_marginal=IMBALANCED)
    strategies = [StrategyConfig(s, sc, 0.1) for s in ("SCA_T", "SCA_T_TIM") for sc in (LAC, APS)]
    return _trials(world, strategies)


@pytest.mark.parametrize("scorer", ["LAC", "APS"])
def test_c11_imbalance_robustness(verdict, imbalance_report, scorer):
    kl, tim = imbalance_report.row("SCA_T", scorer), imbalance_report.row("SCA_T_TIM", scorer)
    lo, hi = 0.89, 0.925
    kl_cov, tim_cov = kl["coverage"]["mean"], tim["coverage"]["mean"]
    ok = kl["ccv"]["mean"] <= tim["ccv"]["mean"] and lo <= kl_cov <= hi
    assert verdict(
        f"11 imbalance robustness ({scorer})", ok,
        f"CCV KL {kl['ccv']['mean']:.2f} vs TIM {tim['ccv']['mean']:.2f}; coverage KL {kl_cov:.4f}, "
        f"TIM {tim_cov:.4f}; ACA KL {kl['aca']['mean']:.1f} vs TIM {tim['aca']['mean']:.1f}",
    )
