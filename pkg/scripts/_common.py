"""Shared plumbing for the experiment scripts."""
import argparse
from pathlib import Path

from scat.cli import render_outputs, write_outputs
from scat.evaluation import run_trials
from scat.synth import SynthSpec, SynthWorld


def parser(description: str, trials: int = 100) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--trials", type=int, default=trials)
    p.add_argument("--seed", type=int, default=0, help="synthetic world seed")
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--out", type=Path, default=None, help="directory for CSV/JSON outputs")
    return p


def world(seed=0, **kw) -> SynthWorld:
    base = dict(num_classes=5, dim=64, concentration=5.0, n_samples=2000, seed=seed)
    base.update(kw)
    return SynthWorld(SynthSpec(**base))


def trials(w: SynthWorld, strategies, args, K=16, n_test=1000, **kw):
    return run_trials(w.source(w.spec.n_samples), w.source(n_test), w.zero_shot, strategies, K=K,
                      n_trials=args.trials, marginal=w.spec.marginal, n_jobs=args.threads, **kw)


def save(report, out, provenance):
    if out is not None:
        write_outputs(Path(out), render_outputs(report, provenance))
        print(f"wrote {out}")
