"""KL-prior vs TIM objective under an imbalanced label marginal, across synthetic worlds.

    python3 scripts/imbalance_worlds.py --worlds 5 --trials 60
"""
from _common import parser, trials, world

from scat.conformal import NonconformityScorer
from scat.pipelines import StrategyConfig

MARGINAL = (0.5, 0.2, 0.15, 0.1, 0.05)


def main():
    p = parser(__doc__.splitlines()[0], trials=60)
    p.add_argument("--worlds", type=int, default=5)
    args = p.parse_args()
    print(f"{'world':>5} {'score':<5} {'CCV KL':>7} {'CCV TIM':>7} {'cov KL':>7} {'cov TIM':>7} {'ACA KL':>7} {'ACA TIM':>7}")
    for seed in range(args.seed, args.seed + args.worlds):
        w = world(seed, prototype_perturbation=0.6, class_marginal=MARGINAL)
        cfgs = [StrategyConfig(s, NonconformityScorer(k), 0.1) for s in ("SCA_T", "SCA_T_TIM") for k in ("LAC", "APS")]
        rep = trials(w, cfgs, args)
        for k in ("LAC", "APS"):
            kl, tim = rep.row("SCA_T", k), rep.row("SCA_T_TIM", k)
            print(f"{seed:>5} {k:<5} {kl['ccv']['mean']:7.2f} {tim['ccv']['mean']:7.2f} "
                  f"{kl['coverage']['mean']:7.3f} {tim['coverage']['mean']:7.3f} "
                  f"{kl['aca']['mean']:7.1f} {tim['aca']['mean']:7.1f}")


if __name__ == "__main__":
    main()
