"""Sweep noise level and mixture size on the synthetic run, several seeds each.

Prints one line per run and a mean-PRO table at the end.

    python scripts/ablation.py --seeds 0 1 2 --noise 0 0.2 --components 16
    python scripts/ablation.py --seeds 0 1 2 --noise 0.2 --components 2 16 32
"""

import argparse
import itertools

import numpy as np

from vtadl.experiments import synthetic_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.2])
    ap.add_argument("--components", type=int, nargs="+", default=[16])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-train", type=int, default=200)
    args = ap.parse_args()

    table = {}
    for k, noise, seed in itertools.product(args.components, args.noise, args.seeds):
        r = synthetic_run(seed, k, noise, args.epochs, args.n_train)
        table.setdefault((k, noise), []).append(r.metrics["pro"])
        print(f"K={k:<3d} noise={noise:<5g} seed={seed} PRO={r.metrics['pro']:.4f} ({r.seconds:.0f}s)", flush=True)
    print("\n  K  noise  mean PRO")
    for (k, noise), v in table.items():
        print(f"{k:3d}  {noise:5g}  {np.mean(v):.4f}")


if __name__ == "__main__":
    main()
