"""Build data/mnist5k from the 5000-digit MNIST sample bundled with mlxtend.

The full MNIST distribution is not reachable from every machine this project
runs on. mlxtend ships a 500-per-class sample of the original digits as CSV
(784 pixel columns then the label). This script writes it out as standard
IDX files: 300 per class into train-*, the remaining 200 per class into t10k-*.

    pip download --no-deps mlxtend==0.23.4
    python scripts/make_mnist5k.py mlxtend-0.23.4-py3-none-any.whl data/mnist5k
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from liftnet.data import write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help="mlxtend wheel or the extracted mnist_5k.csv.gz")
    ap.add_argument("out", help="output directory")
    ap.add_argument("--train-per-class", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    src = Path(args.source)
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as zf:
            raw = zf.read(CSV_MEMBER)
    else:
        raw = src.read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    rng = np.random.default_rng(args.seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train.append(idx[: args.train_per_class])
        test.append(idx[args.train_per_class:])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, parts in (("train", train), ("t10k", test)):
        index = rng.permutation(np.concatenate(parts))
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", pixels[index].reshape(-1, 28, 28))
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", labels[index])
        print(f"{prefix}: {len(index)} samples")


if __name__ == "__main__":
    main()
