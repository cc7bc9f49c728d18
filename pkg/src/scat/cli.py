"""Command-line entry point.

    scat synth  --config spec.json --out DIR    (pool.emb, test.emb, zero_shot.emb)
    scat run    --config run.json  [--out DIR] [--threads N]
    scat sweep  --config run.json  [--out DIR] [--threads N]
    scat report DIR/aggregate.json

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .classifier import load_classifier, save_classifier
from .conformal import NonconformityScorer
from .embeddings import LabelMarginal, load_embeddings, save_embeddings
from .evaluation import (
    AggregateReport,
    aggregate_json,
    coverage_by_trial_csv,
    format_table,
    run_trials,
    timing_csv,
    trials_csv,
)
from .pipelines import ProbeConfig, StrategyConfig
from .synth import SynthSpec, SynthWorld, generate
from .transduction import SolverConfig

log = logging.getLogger("scat")

CONFIG_SCHEMA_VERSION = 1
RUN_KEYS = {
    "schema_version", "data", "strategies", "scorers", "alphas", "K", "n_trials",
    "base_seed", "solver", "probe", "output_dir", "sweep", "test_batch_size",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: dict
    strategies: list[StrategyConfig]
    K: int = 16
    alphas: list[float] = field(default_factory=lambda: [0.1])
    n_trials: int = 100
    base_seed: int = 0
    output_dir: str | None = None
    test_batch_size: int | None = None
    sweep: dict | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def provenance(self) -> dict:
        resolved = {k: v for k, v in self.raw.items() if k != "output_dir"}
        resolved["strategies"] = [s.to_dict() for s in self.strategies]
        return {"config": resolved, "version": __version__}


def _sub(cls, d: dict | None, what: str):
    try:
        return cls(**(d or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _scorer(entry) -> NonconformityScorer:
    if isinstance(entry, str):
        entry = {"kind": entry}
    return _sub(NonconformityScorer, entry, "scorer")


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    data = raw.get("data")
    if not isinstance(data, dict) or len({"synth", "files"} & set(data)) != 1 or len(data) != 1:
        raise ConfigError("data must contain exactly one of 'synth' or 'files'")

    solver = _sub(SolverConfig, raw.get("solver"), "solver")
    probe = _sub(ProbeConfig, raw.get("probe"), "probe")
    scorers = [_scorer(s) for s in raw.get("scorers", ["LAC"])]
    alphas = [float(a) for a in raw.get("alphas", [0.1])]
    if not scorers or not alphas:
        raise ConfigError("scorers and alphas must be non-empty")
    entries = raw.get("strategies")
    if not entries:
        raise ConfigError("strategies must be a non-empty list")
    strategies = []
    for entry in entries:
        if isinstance(entry, str):
            entry = {"strategy": entry}
        name = entry.get("strategy")
        s_solver = _sub(SolverConfig, {**solver.to_dict(), **entry.get("solver", {})}, f"{name} solver")
        if name == "SCA_T_TIM":
            s_solver = _sub(SolverConfig, {**s_solver.to_dict(), "objective": "TIM"}, f"{name} solver")
        s_probe = _sub(ProbeConfig, {**probe.to_dict(), **entry.get("probe", {})}, f"{name} probe")
        for sc in scorers:
            try:
                strategies.append(StrategyConfig(name, sc, alphas[0], s_solver, s_probe))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    def positive_int(key, default):
        v = raw.get(key, default)
        if v is None:
            return None
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        return v

    return RunConfig(
        data=data,
        strategies=strategies,
        K=positive_int("K", 16),
        alphas=alphas,
        n_trials=positive_int("n_trials", 100),
        base_seed=int(raw.get("base_seed", 0)),
        output_dir=raw.get("output_dir"),
        test_batch_size=positive_int("test_batch_size", None),
        sweep=raw.get("sweep"),
        raw=raw,
    )


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def build_sources(cfg: RunConfig, base: Path):
    """Returns ``(cal_source, test_source, classifier, marginal)``."""
    if "synth" in cfg.data:
        d = dict(cfg.data["synth"])
        n_test = d.pop("n_test", 1000)
        resample = d.pop("resample", True)
        spec = _synth_spec(d)
        world = SynthWorld(spec)
        if resample:
            return world.source(spec.n_samples), world.source(n_test), world.zero_shot, spec.marginal
        return (
            world.sample(spec.n_samples, [spec.seed, 1]),
            world.sample(n_test, [spec.seed, 2]),
            world.zero_shot,
            spec.marginal,
        )
    f = cfg.data["files"]
    missing = [k for k in ("cal_pool", "test", "classifier") if k not in f]
    if missing:
        raise ConfigError(f"files source is missing: {', '.join(missing)}")
    fmt = f.get("format", "binary")

    def path(key):
        p = Path(f[key])
        return p if p.is_absolute() else base / p

    pool = load_embeddings(path("cal_pool"), fmt, f.get("num_classes"))
    test = load_embeddings(path("test"), fmt, f.get("num_classes", pool.num_classes))
    clf = load_classifier(path("classifier"), f.get("temperature"))
    marginal = LabelMarginal(f["marginal"]) if "marginal" in f else None
    return pool, test, clf, marginal


def _synth_spec(d: dict) -> SynthSpec:
    try:
        return SynthSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None


def execute(cfg: RunConfig, base: Path, threads: int = 1, K=None, test_batch_size=None) -> AggregateReport:
    cal_source, test_source, clf, marginal = build_sources(cfg, base)
    return run_trials(
        cal_source,
        test_source,
        clf,
        cfg.strategies,
        K=K or cfg.K,
        alphas=cfg.alphas,
        n_trials=cfg.n_trials,
        base_seed=cfg.base_seed,
        marginal=marginal,
        test_batch_size=test_batch_size or cfg.test_batch_size,
        n_jobs=threads,
    )


def render_outputs(report: AggregateReport, provenance: dict) -> dict[str, str]:
    return {
        "trials.csv": trials_csv(report, provenance),
        "aggregate.json": aggregate_json(report, provenance),
        "coverage_by_trial.csv": coverage_by_trial_csv(report, provenance),
        "timing.csv": timing_csv(report, provenance),
    }


def write_outputs(out: Path, files: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = args.out or (cfg.output_dir if cfg else None)
    if not out:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return Path(out)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if not args.config:
        raise ConfigError("synth needs --config")
    spec = _synth_spec(load_json(args.config))
    out = _out_dir(args, None)
    pool, clf, _ = generate(spec)
    # held-out draw from the same class geometry
    test = SynthWorld(spec).sample(spec.n_samples, [spec.seed, 2])
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(pool, out / "pool.emb")
    save_embeddings(test, out / "test.emb")
    save_classifier(clf, out / "zero_shot.emb")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wrote {pool.n} pool + {test.n} test samples (D={pool.dim}, C={pool.num_classes}) "
          f"and zero-shot prototypes to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = parse_run_config(load_json(args.config))
    out = _out_dir(args, cfg)
    report = execute(cfg, Path(args.config).parent, args.threads)
    write_outputs(out, render_outputs(report, cfg.provenance()))
    print(format_table(report.to_dict()))
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_run_config(load_json(args.config))
    out = _out_dir(args, cfg)
    sweep = cfg.sweep or {}
    if len(sweep) != 1 or next(iter(sweep)) not in ("K", "test_batch_size"):
        raise ConfigError("sweep must have exactly one key: 'K' or 'test_batch_size'")
    param, values = next(iter(sweep.items()))
    if not isinstance(values, list) or not values:
        raise ConfigError(f"sweep over {param} needs a non-empty list")
    if any(not isinstance(v, int) or v < 1 for v in values):
        raise ConfigError(f"sweep values for {param} must be positive integers")
    results = {}
    for v in values:
        log.info("sweep %s=%s", param, v)
        kw = {"K": v} if param == "K" else {"test_batch_size": v}
        report = execute(cfg, Path(args.config).parent, args.threads, **kw)
        prov = cfg.provenance()
        prov["sweep"] = {param: v}
        results[v] = (report, prov)
    summary = ["param,value,strategy,scorer,alpha,coverage,mean_set_size,ccv,aca"]
    for v, (report, prov) in results.items():
        write_outputs(out / f"{param}={v}", render_outputs(report, prov))
        for r in report.rows:
            summary.append(
                f"{param},{v},{r['strategy']},{r['scorer']},{r['alpha']!r},"
                + ",".join(repr(r[m]["mean"]) for m in ("coverage", "mean_set_size", "ccv", "aca"))
            )
    (out / "sweep.csv").write_text("\n".join(summary) + "\n")
    print(f"wrote {len(values)} result blocks to {out}")
    return 0


def cmd_report(args) -> int:
    path = args.path or (Path(args.out) / "aggregate.json" if args.out else None)
    if path is None:
        raise ConfigError("report needs the path of an aggregate.json")
    print(format_table(load_json(path)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scat", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("synth", cmd_synth), ("run", cmd_run), ("sweep", cmd_sweep), ("report", cmd_report)):
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("path", nargs="?", help="aggregate.json to pretty-print")
        p.add_argument("--config", required=name in ("run", "sweep", "synth"))
        p.add_argument("--out")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--verbose", "-v", action="store_true")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        if args.verbose:
            log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
