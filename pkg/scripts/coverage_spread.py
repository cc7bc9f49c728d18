"""Per-trial coverage spread of SCP, Adapt+SCP and SCA-T in a low-shot, high-dimension regime.

    python3 scripts/coverage_spread.py --trials 200 --out results/spread
"""
import numpy as np
from _common import parser, save, trials, world

from scat.conformal import NonconformityScorer
from scat.pipelines import StrategyConfig


def main():
    p = parser(__doc__.splitlines()[0], trials=200)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--K", type=int, default=8)
    args = p.parse_args()
    w = world(args.seed, dim=args.dim)
    cfgs = [StrategyConfig(s, NonconformityScorer("LAC"), 0.1) for s in ("SCP", "ADAPT_SCP", "SCA_T")]
    rep = trials(w, cfgs, args, K=args.K)
    print(f"{'strategy':<10} {'mean':>6} {'p05':>6} {'p50':>6} {'p95':>6}")
    for cfg in cfgs:
        cov = np.array([t.coverage for t in rep.trials if t.strategy == cfg.strategy])
        q = np.quantile(cov, [0.05, 0.5, 0.95])
        print(f"{cfg.strategy:<10} {cov.mean():6.3f} {q[0]:6.3f} {q[1]:6.3f} {q[2]:6.3f}")
    save(rep, args.out, {"script": "coverage_spread", "spec": w.spec.to_dict(), "K": args.K})


if __name__ == "__main__":
    main()
