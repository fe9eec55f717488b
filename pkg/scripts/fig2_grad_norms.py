"""First/last layer gradient-norm ratio of a no-skip conv net at init.

    python scripts/fig2_grad_norms.py --depth 26 --seeds 10
"""

import argparse

import numpy as np

from normlab import experiments as E

NORMS = ["none", "batch", "bmlv", "lmbv", "prelayernorm", "layer", "regnorm"]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--depth", type=int, default=26)
    p.add_argument("--seeds", type=int, default=10)
    args = p.parse_args()
    setup = E.InitSetup(kind="wideresnet", depth=args.depth, width=1, batch_size=32)
    ratios = E.grad_norm_ratios(NORMS, range(args.seeds), setup)
    print(f"first/last gradient-norm ratio, depth {args.depth}, geometric mean over {args.seeds} seeds")
    for n in NORMS:
        r = ratios[n]
        print(f"  {n:13s}{np.exp(np.log(r).mean()):10.4g}   min {r.min():.4g}  max {r.max():.4g}")


if __name__ == "__main__":
    main()
