"""One-class MNIST: train on a single digit, report image-level ROC-AUC.

    python scripts/prepare_mnist.py --out data/mnist
    python scripts/mnist_run.py --data data/mnist --digit 1 --epochs 5
"""

import argparse
import json
from pathlib import Path

from vtadl.experiments import mnist_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", type=Path, default=Path("data/mnist"))
    ap.add_argument("--digit", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--max-train", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    r = mnist_run(args.data, digit=args.digit, epochs=args.epochs, max_train=args.max_train, seed=args.seed,
                  lr=args.lr, log_every=1)
    print(json.dumps({**r.metrics, "seconds": round(r.seconds, 1)}, indent=1))


if __name__ == "__main__":
    main()
