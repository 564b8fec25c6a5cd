"""Build IDX files from the MNIST digits bundled in the npm ``mnist`` package.

The package ships about 10k real MNIST digits as JSON float arrays in [0, 1]
(one file per digit). The last ``--test-per-digit`` samples of every digit
go to the test files, the rest to the train files.

    python scripts/prepare_mnist.py --out data/mnist
    python scripts/prepare_mnist.py --source /path/to/unpacked/package --out data/mnist
"""

import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from vtadl.data import write_idx

NPM_SPEC = "mnist@1.1.0"


def fetch_package(workdir: Path) -> Path:
    subprocess.run(["npm", "pack", NPM_SPEC, "--silent"], cwd=workdir, check=True, capture_output=True)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tf:
        tf.extractall(workdir)
    return workdir / "package"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source", type=Path, help="unpacked npm package directory (fetched with npm if absent)")
    ap.add_argument("--out", type=Path, default=Path("data/mnist"))
    ap.add_argument("--test-per-digit", type=int, default=500)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        src = args.source or fetch_package(Path(tmp))
        splits = {"train": ([], []), "test": ([], [])}
        for digit in range(10):
            raw = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
            imgs = np.rint(np.asarray(raw, dtype=np.float64).reshape(-1, 28, 28) * 255).astype(np.uint8)
            n_test = min(args.test_per_digit, len(imgs) // 2)
            for name, part in (("train", imgs[:-n_test]), ("test", imgs[-n_test:])):
                splits[name][0].append(part)
                splits[name][1].append(np.full(len(part), digit, np.uint8))
            print(f"digit {digit}: {len(imgs) - n_test} train, {n_test} test")

    args.out.mkdir(parents=True, exist_ok=True)
    for name, (imgs, labels) in splits.items():
        prefix = "t10k" if name == "test" else "train"
        write_idx(args.out / f"{prefix}-images-idx3-ubyte.gz", np.concatenate(imgs))
        write_idx(args.out / f"{prefix}-labels-idx1-ubyte.gz", np.concatenate(labels))
    print(f"wrote IDX files to {args.out}")


if __name__ == "__main__":
    main()
