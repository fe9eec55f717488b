"""Test accuracy of a trained MLP across evaluation batch sizes.

    python scripts/fig6_batch_size.py
"""

import argparse

from normlab import experiments as E


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--norms", nargs="+", default=["batch_train", "batch", "layer", "prelayernorm"])
    p.add_argument("--eval-sizes", type=int, nargs="+", default=[2, 4, 8, 32, 256])
    p.add_argument("--train-size", type=int, default=32)
    args = p.parse_args()
    print("eval batch size " + " ".join(f"{s:>7d}" for s in args.eval_sizes))
    for n in args.norms:
        acc, _ = E.batch_dependence(n, args.eval_sizes, train_size=args.train_size)
        print(f"  {n:13s}" + " ".join(f"{acc[s, 'eval']:7.4f}" for s in args.eval_sizes))


if __name__ == "__main__":
    main()
