"""lambda_1 / lambda_10 of the training-loss Hessian after SGD training.

    python scripts/hessian_outliers.py --seeds 5
"""

import argparse

from normlab import experiments as E


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--norms", nargs="+", default=["layer", "batch", "prelayernorm"])
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    setup = E.DynamicsSetup(depth=args.depth, steps=args.steps)
    for seed in range(args.seeds):
        cells = []
        for n in args.norms:
            ratio, acc = E.outlier_ratio_after_training(n, seed, setup)
            cells.append(f"{n} {ratio:.3g} (acc {acc:.3f})")
        print(f"seed {seed}: " + ", ".join(cells))


if __name__ == "__main__":
    main()
