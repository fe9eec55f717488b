"""Representation and gradient correlation through a depth-20 ReLU MLP at init.

    python scripts/fig1_infoprop.py --seeds 10
"""

import argparse

import numpy as np

from normlab import experiments as E

NORMS = ["none", "batch", "bmlv", "lmbv", "prelayernorm", "layer", "regnorm"]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.1, help="noise std as a fraction of the per-feature std")
    args = p.parse_args()
    setup = E.InitSetup(noise_fraction=args.noise)
    reps = E.infoprop_at_init(NORMS, range(args.seeds), setup)
    grads = E.grad_corr_at_init(NORMS, range(args.seeds), setup)
    layers = [0, 4, 9, 14, 19]
    print("representation correlation, layers " + " ".join(str(i + 1) for i in layers))
    for n in NORMS:
        m = reps[n].mean(axis=0)
        print(f"  {n:13s}" + " ".join(f"{m[i]:6.3f}" for i in layers))
    print("gradient correlation, layers " + " ".join(str(i + 1) for i in layers))
    for n in NORMS:
        m = np.nanmean(grads[n], axis=0)
        print(f"  {n:13s}" + " ".join(f"{m[i]:6.3f}" for i in layers))


if __name__ == "__main__":
    main()
