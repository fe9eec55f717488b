"""Learning-rate grid search for a small MLP under every normalizer.

    python scripts/train_smoke.py
"""

import argparse

from normlab import experiments as E
from normlab.normalizers import NormKind


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--depth", type=int, default=2)
    args = p.parse_args()
    for n in NormKind:
        lr, acc = E.train_smoke(n.value, steps=args.steps, depth=args.depth)
        print(f"{n.value:13s} best lr {lr}  test accuracy {acc:.4f}")


if __name__ == "__main__":
    main()
