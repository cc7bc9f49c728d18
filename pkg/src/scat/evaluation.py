"""Metrics, stratified calibration sampling and the repeated-trial harness."""
from __future__ import annotations

import csv
import io
import json
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence, Union

import numpy as np

from .classifier import PrototypeClassifier
from .conformal import as_mask
from .embeddings import EmbeddingSet, LabelMarginal, empirical_marginal
from .pipelines import StrategyConfig, adapted_blocks, sets_from_blocks

REPORT_SCHEMA_VERSION = 1
METRICS = ("coverage", "mean_set_size", "ccv", "aca")

Source = Union[EmbeddingSet, Callable[[int], EmbeddingSet]]


# ------------------------------------------------------------------ metrics


def coverage(sets, labels) -> float:
    y = np.asarray(labels, dtype=np.int64)
    mask = as_mask(sets)
    if mask.shape[1] <= y.max():
        mask = np.pad(mask, ((0, 0), (0, int(y.max()) + 1 - mask.shape[1])))
    return float(mask[np.arange(y.size), y].mean())


def mean_set_size(sets) -> float:
    return float(as_mask(sets).sum(axis=1).mean())


def class_coverages(sets, labels, num_classes: int) -> dict[int, float]:
    y = np.asarray(labels, dtype=np.int64)
    mask = as_mask(sets, num_classes)
    hits = mask[np.arange(y.size), y]
    return {c: float(hits[y == c].mean()) for c in range(num_classes) if np.any(y == c)}


def ccv(sets, labels, alpha: float, num_classes: int) -> float:
    """Mean absolute gap between per-class coverage and 1 - alpha, in percent.

    Classes with no test point are left out of the average.
    """
    y = np.asarray(labels, dtype=np.int64)
    hits = as_mask(sets, num_classes)[np.arange(y.size), y]
    target = 1 - Fraction(repr(float(alpha)))
    # exact rationals so hand-checkable cases come out exact
    gaps = [abs(Fraction(int(hits[y == c].sum()), int((y == c).sum())) - target)
            for c in range(num_classes) if np.any(y == c)]
    return float(100 * sum(gaps) / len(gaps))


def aca(probs, labels) -> float:
    """Balanced (macro-averaged) top-1 accuracy in percent over classes present in ``labels``."""
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pred = P.argmax(axis=1)  # first maximal index on ties
    return 100.0 * float(np.mean([np.mean(pred[y == c] == c) for c in np.unique(y)]))


# ------------------------------------------------------------ calibration


def class_quotas(marginal: LabelMarginal, n: int) -> np.ndarray:
    """Largest-remainder rounding of ``n * marginal`` to integer counts summing to ``n``."""
    exact = n * marginal.probs
    counts = np.floor(exact + 1e-9).astype(np.int64)
    frac = np.round(exact - counts, 9)
    short = n - int(counts.sum())
    if short > 0:
        counts[np.argsort(-frac, kind="stable")[:short]] += 1
    return counts


def sample_calibration(pool: EmbeddingSet, K: int, seed, marginal: LabelMarginal | None = None):
    """Draw N = C*K labeled points whose class counts follow ``marginal``.

    ``marginal`` defaults to the pool's own label frequencies.  Returns
    ``(cal, remainder)``; both keep the pool's row order.
    """
    if not pool.has_labels:
        raise ValueError("calibration pool must be labeled")
    if K < 1:
        raise ValueError("K must be >= 1")
    C = pool.num_classes
    if marginal is None:
        marginal = empirical_marginal(pool.labels, C)
    quotas = class_quotas(marginal, C * K)
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(C):
        idx = np.flatnonzero(pool.labels == c)
        if idx.size < quotas[c]:
            raise ValueError(f"class {c} has {idx.size} pool points but needs {quotas[c]}")
        picked.append(rng.choice(idx, size=quotas[c], replace=False))
    cal_idx = np.sort(np.concatenate(picked))
    rest = np.setdiff1d(np.arange(pool.n), cal_idx, assume_unique=True)
    remainder = pool.subset(rest) if rest.size else None
    return pool.subset(cal_idx), remainder


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class TrialReport:
    trial: int
    seed: int
    strategy: str
    scorer: str
    alpha: float
    coverage: float
    mean_set_size: float
    ccv: float
    aca: float
    threshold: float
    timing_s: float = field(default=0.0, compare=False)
    peak_mem_note: str | None = field(default=None, compare=False)

    @property
    def key(self) -> tuple:
        return (self.strategy, self.scorer, self.alpha)


@dataclass
class AggregateReport:
    rows: list[dict]
    n_trials: int
    trials: list[TrialReport] = field(repr=False, default_factory=list)

    def row(self, strategy: str, scorer: str = "LAC", alpha: float = 0.1) -> dict:
        for r in self.rows:
            if (r["strategy"], r["scorer"], r["alpha"]) == (strategy, scorer, alpha):
                return r
        raise KeyError((strategy, scorer, alpha))

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "n_trials": self.n_trials, "rows": self.rows}


def aggregate(trials: Sequence[TrialReport]) -> AggregateReport:
    keys: list[tuple] = []
    groups: dict[tuple, list[TrialReport]] = {}
    for t in trials:
        if t.key not in groups:
            keys.append(t.key)
            groups[t.key] = []
        groups[t.key].append(t)
    rows = []
    for k in keys:
        g = groups[k]
        row = {"strategy": k[0], "scorer": k[1], "alpha": k[2], "n_trials": len(g)}
        for m in METRICS + ("timing_s",):
            v = np.array([getattr(t, m) for t in g], dtype=np.float64)
            row[m] = {"mean": float(v.mean()), "std": float(v.std())}
        rows.append(row)
    n = len({t.trial for t in trials})
    if n < 1:
        raise ValueError("no trials to aggregate")
    return AggregateReport(rows, n, list(trials))


# ------------------------------------------------------------------ harness


def _draw(source: Source, seed) -> EmbeddingSet:
    return source(seed) if callable(source) else source


def run_trial(
    t: int,
    cal_source: Source,
    test_source: Source,
    clf: PrototypeClassifier,
    strategies: Sequence[StrategyConfig],
    K: int,
    base_seed: int = 0,
    marginal: LabelMarginal | None = None,
    test_batch_size: int | None = None,
) -> list[TrialReport]:
    seed = base_seed + t
    pool = _draw(cal_source, (seed, 1))
    test = _draw(test_source, (seed, 2))
    if not test.has_labels:
        raise ValueError("evaluation needs labeled test rows (labels are used only for metrics)")
    cal, _ = sample_calibration(pool, K, (seed, 3), marginal)
    y = test.labels
    C = test.num_classes
    cache: dict[tuple, tuple] = {}
    reports = []
    for cfg in strategies:
        start = time.perf_counter()
        key = cfg.adaptation_key
        if key not in cache:
            t0 = time.perf_counter()
            # the test view passed to strategies carries no labels
            blocks = adapted_blocks(cfg, clf, cal, test.unlabeled(), test_batch_size)
            cache[key] = (blocks, time.perf_counter() - t0)
            adapt_time = 0.0
        else:
            adapt_time = cache[key][1]
        blocks = cache[key][0]
        sets, probs, preds = sets_from_blocks(blocks, cal.labels, cfg.scorer, cfg.alpha, (seed, 4))
        elapsed = time.perf_counter() - start + adapt_time
        reports.append(
            TrialReport(
                trial=t,
                seed=seed,
                strategy=cfg.strategy,
                scorer=cfg.scorer.kind,
                alpha=cfg.alpha,
                coverage=coverage(sets, y),
                mean_set_size=mean_set_size(sets),
                ccv=ccv(sets, y, cfg.alpha, C),
                aca=aca(probs, y),
                threshold=float(np.mean([p.threshold for p in preds])),
                timing_s=elapsed,
                peak_mem_note=f"maxrss_kb={resource.getrusage(resource.RUSAGE_SELF).ru_maxrss}",
            )
        )
    return reports


def expand_alphas(strategies: Sequence[StrategyConfig], alphas: Sequence[float] | None):
    if not alphas:
        return list(strategies)
    return [replace(s, alpha=a) for a in alphas for s in strategies]


def run_trials(
    cal_source: Source,
    test_source: Source,
    clf: PrototypeClassifier,
    strategies: Sequence[StrategyConfig],
    K: int = 16,
    alphas: Sequence[float] | None = None,
    n_trials: int = 100,
    base_seed: int = 0,
    marginal: LabelMarginal | None = None,
    test_batch_size: int | None = None,
    n_jobs: int = 1,
) -> AggregateReport:
    """Repeat the protocol ``n_trials`` times; trial t uses seed ``base_seed + t``.

    A source is either a fixed EmbeddingSet or a callable ``seed -> EmbeddingSet``
    drawing fresh data for each trial.  Every strategy in a trial sees the
    same calibration/test split.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    strategies = expand_alphas(strategies, alphas)

    def one(t):
        try:
            return run_trial(t, cal_source, test_source, clf, strategies, K, base_seed, marginal, test_batch_size)
        except Exception as exc:
            raise RuntimeError(f"trial {t} (seed {base_seed + t}): {exc}") from exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            per_trial = list(ex.map(one, range(n_trials)))
    else:
        per_trial = [one(t) for t in range(n_trials)]
    return aggregate([r for rs in per_trial for r in rs])


# ------------------------------------------------------------------ writers

TRIAL_COLUMNS = (
    "trial", "seed", "strategy", "scorer", "alpha",
    "coverage", "mean_set_size", "ccv", "aca", "threshold",
)
TIMING_COLUMNS = ("trial", "seed", "strategy", "scorer", "alpha", "timing_s", "peak_mem_note")


def _header(provenance: dict | None) -> str:
    if not provenance:
        return ""
    return f"# schema_version: {REPORT_SCHEMA_VERSION}\n# provenance: {json.dumps(provenance, sort_keys=True)}\n"


def _csv(rows, columns, provenance) -> str:
    buf = io.StringIO()
    buf.write(_header(provenance))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def trials_csv(report: AggregateReport, provenance: dict | None = None) -> str:
    """Deterministic per-trial metrics (no wall-clock fields)."""
    return _csv([asdict(t) for t in report.trials], TRIAL_COLUMNS, provenance)


def timing_csv(report: AggregateReport, provenance: dict | None = None) -> str:
    return _csv([asdict(t) for t in report.trials], TIMING_COLUMNS, provenance)


def coverage_by_trial_csv(report: AggregateReport, provenance: dict | None = None) -> str:
    """Wide table: one row per trial, one coverage column per strategy/scorer/alpha."""
    keys = [(r["strategy"], r["scorer"], r["alpha"]) for r in report.rows]
    names = [f"{s}|{k}|{a!r}" for s, k, a in keys]
    table: dict[int, dict] = {}
    for t in report.trials:
        table.setdefault(t.trial, {"trial": t.trial, "seed": t.seed})[f"{t.strategy}|{t.scorer}|{t.alpha!r}"] = t.coverage
    return _csv([table[k] for k in sorted(table)], ("trial", "seed", *names), provenance)


def aggregate_json(report: AggregateReport, provenance: dict | None = None) -> str:
    d = report.to_dict()
    if provenance:
        d["provenance"] = provenance
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def format_table(agg: dict) -> str:
    """Text table shaped like a results table: one block per scorer, columns per alpha."""
    rows = agg["rows"]
    alphas = sorted({r["alpha"] for r in rows}, reverse=True)
    scorers = list(dict.fromkeys(r["scorer"] for r in rows))
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    head = f"{'Score':<6} {'Method':<11} {'ACA':>6}"
    for a in alphas:
        head += f" | a={a:<5} {'Cov.':>6} {'Size':>6} {'CCV':>6}"
    lines = [head, "-" * len(head)]
    for sc in scorers:
        for st in strategies:
            sel = {r["alpha"]: r for r in rows if r["scorer"] == sc and r["strategy"] == st}
            if not sel:
                continue
            first = next(iter(sel.values()))
            line = f"{sc:<6} {st:<11} {first['aca']['mean']:>6.1f}"
            for a in alphas:
                r = sel.get(a)
                if r is None:
                    line += " | " + " " * 7 + f"{'-':>6} {'-':>6} {'-':>6}"
                else:
                    line += (
                        " | " + " " * 7
                        + f"{r['coverage']['mean']:>6.3f} {r['mean_set_size']['mean']:>6.2f} {r['ccv']['mean']:>6.2f}"
                    )
            lines.append(line)
        lines.append("")
    lines.append(f"trials: {agg['n_trials']}")
    return "\n".join(lines)
