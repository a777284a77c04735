"""Convert the digit JSON files shipped in the npm ``mnist`` package into IDX files.

Usage: python scripts/build_mnist_subset.py <digits_dir> <out_dir> [n_train n_test seed]

``digits_dir`` holds ``0.json`` .. ``9.json``, each ``{"data": [...]}`` with 784
grey levels per image scaled to [0, 1] and rounded to three decimals. Pixels are
mapped back to bytes with round(v * 255). The class-balanced subset is shuffled
with a fixed seed and written as gzipped IDX images and labels.
"""

import json
import sys
from pathlib import Path

import numpy as np

from stobatch.data import write_idx
from stobatch.rng import make_rng


def main(argv):
    digits_dir, out_dir = Path(argv[1]), Path(argv[2])
    n_train = int(argv[3]) if len(argv) > 3 else 5000
    n_test = int(argv[4]) if len(argv) > 4 else 1000
    seed = int(argv[5]) if len(argv) > 5 else 0
    per_class = (n_train + n_test) // 10
    images, labels = [], []
    for k in range(10):
        flat = np.asarray(json.loads((digits_dir / f"{k}.json").read_text())["data"], dtype=np.float64)
        imgs = flat.reshape(-1, 28, 28)
        if len(imgs) < per_class:
            raise SystemExit(f"digit {k}: only {len(imgs)} images, need {per_class}")
        pick = make_rng(seed, "mnist-subset", k).permutation(len(imgs))[:per_class]
        images.append(np.rint(imgs[pick] * 255).astype(np.uint8))
        labels.append(np.full(per_class, k, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    order = make_rng(seed, "mnist-order").permutation(len(labels))
    images, labels = images[order], labels[order]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(out_dir / "train-images-idx3-ubyte.gz", images[:n_train])
    write_idx(out_dir / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_idx(out_dir / "t10k-images-idx3-ubyte.gz", images[n_train:n_train + n_test])
    write_idx(out_dir / "t10k-labels-idx1-ubyte.gz", labels[n_train:n_train + n_test])


if __name__ == "__main__":
    main(sys.argv)
