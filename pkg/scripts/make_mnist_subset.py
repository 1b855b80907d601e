"""Write a small MNIST train/test pair in IDX format.

Uses the 5000 real MNIST digits bundled with mlxtend (500 per class) when the
canonical IDX files are not available. The digits are shuffled once with a
fixed seed and split 4000 / 1000.

    python scripts/make_mnist_subset.py --out data/mnist
"""

import argparse
from pathlib import Path

import numpy as np

from dplis.data import write_idx


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--n-train", type=int, default=4000)
    ap.add_argument("--gzip", action="store_true")
    args = ap.parse_args(argv)

    from mlxtend.data import mnist_data

    X, y = mnist_data()
    order = np.random.default_rng(20210101).permutation(len(y))
    X = X[order].astype(np.uint8).reshape(-1, 28, 28)
    y = y[order].astype(np.uint8)
    n = args.n_train
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".gz" if args.gzip else ""
    write_idx(out / f"train-images-idx3-ubyte{ext}", X[:n], args.gzip)
    write_idx(out / f"train-labels-idx1-ubyte{ext}", y[:n], args.gzip)
    write_idx(out / f"t10k-images-idx3-ubyte{ext}", X[n:], args.gzip)
    write_idx(out / f"t10k-labels-idx1-ubyte{ext}", y[n:], args.gzip)
    print(f"wrote {n} train / {len(y) - n} test images to {out}")


if __name__ == "__main__":
    main()
