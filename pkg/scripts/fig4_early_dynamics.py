"""Last pre-activation correlation through the first training steps of a no-skip conv net.

    python scripts/fig4_early_dynamics.py --norms batch none --lr 0.1
"""

import argparse

from normlab import experiments as E


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--norms", nargs="+", default=["batch", "none"])
    p.add_argument("--dataset", default="digits", choices=["digits", "synthetic", "mnist", "cifar10"])
    p.add_argument("--depth", type=int, default=26)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    setup = E.DynamicsSetup(dataset={"id": args.dataset}, depth=args.depth, lr=args.lr, steps=args.steps)
    for n in args.norms:
        steps, corr, acc = E.output_correlation_trace(n, args.seed, setup)
        rise, fall = E.rise_then_fall(corr)
        print(f"{n}: test accuracy {acc:.4f}, rise {rise:.3f}, fall after peak {fall:.3f}")
        print("  " + " ".join(f"{s}:{c:.3f}" for s, c in zip(steps, corr)))


if __name__ == "__main__":
    main()
