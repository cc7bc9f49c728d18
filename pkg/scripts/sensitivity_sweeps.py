"""Sensitivity of SCP vs SCA-T to calibration shots K and to test batch size.

    python3 scripts/sensitivity_sweeps.py --trials 50
"""
from _common import parser, trials, world

from scat.conformal import NonconformityScorer
from scat.pipelines import StrategyConfig


def _line(tag, rep):
    cells = []
    for r in rep.rows:
        cells.append(f"{r['strategy']}: cov {r['coverage']['mean']:.3f} size {r['mean_set_size']['mean']:.2f}")
    print(f"{tag:<12} " + " | ".join(cells))


def main():
    p = parser(__doc__.splitlines()[0], trials=50)
    p.add_argument("--shots", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    p.add_argument("--batches", type=int, nargs="+", default=[1000, 500, 250, 100, 50])
    args = p.parse_args()
    w = world(args.seed, num_classes=10, prototype_perturbation=0.6, n_samples=3000)
    cfgs = [StrategyConfig(s, NonconformityScorer("APS"), 0.1) for s in ("SCP", "SCA_T")]
    print("calibration shots")
    for K in args.shots:
        _line(f"K={K}", trials(w, cfgs, args, K=K))
    print("test batch size (K=16)")
    for b in args.batches:
        _line(f"batch={b}", trials(w, cfgs, args, test_batch_size=b))


if __name__ == "__main__":
    main()
