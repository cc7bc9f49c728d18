"""Strategy x score x alpha grid on the perturbed-prototype benchmark.

    python3 scripts/strategy_grid.py --trials 100 --out results/grid
"""
from _common import parser, save, trials, world

from scat.conformal import NonconformityScorer
from scat.evaluation import format_table
from scat.pipelines import StrategyConfig

STRATEGIES = ("SCP", "ADAPT_SCP", "SCA_T", "SCA_T_TIM")
SCORES = ("LAC", "APS", "RAPS")


def main():
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--sigma", type=float, default=0.6)
    args = p.parse_args()
    w = world(args.seed, num_classes=args.classes, prototype_perturbation=args.sigma, n_samples=3000)
    cfgs = [StrategyConfig(s, NonconformityScorer(k)) for k in SCORES for s in STRATEGIES]
    rep = trials(w, cfgs, args, alphas=[0.1, 0.05])
    print(format_table(rep.to_dict()))
    save(rep, args.out, {"script": "strategy_grid", "spec": w.spec.to_dict(), "trials": args.trials})


if __name__ == "__main__":
    main()
