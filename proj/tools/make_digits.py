#!/usr/bin/env python3
"""Build the desk-scale IDX digit set used by the vgg-mini acceptance check.

Source: the 5000-sample MNIST excerpt bundled in the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per class). Per class, the
first 400 images go to the training split and the last 100 to the test
split. The training split is grown to 10000 images with 1- and 2-pixel
translated copies; the test split is left untouched.

usage: make_digits.py <mnist_5k.csv.gz or mlxtend wheel> <out_dir>
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

SEED = 20240917


def read_rows(src: Path) -> np.ndarray:
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    return np.array([[int(v) for v in line.split(",")] for line in text.splitlines()],
                    dtype=np.int64)


def shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def write_idx(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    n, h, w = images.shape
    img = struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    # mtime=0 keeps the archives byte-reproducible
    with open(path.with_name(path.name + "-images-idx3-ubyte.gz"), "wb") as f:
        f.write(gzip.compress(img, mtime=0))
    with open(path.with_name(path.name + "-labels-idx1-ubyte.gz"), "wb") as f:
        f.write(gzip.compress(lab, mtime=0))


def main() -> None:
    rows = read_rows(Path(sys.argv[1]))
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    images = rows[:, :-1].reshape(-1, 28, 28)
    labels = rows[:, -1]

    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:])
    train_idx = np.array(train_idx)
    test_idx = np.array(test_idx)

    rng = np.random.default_rng(SEED)
    one_px = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    two_px = [(-2, 0), (2, 0), (0, -2), (0, 2)]
    tr_img = [images[i] for i in train_idx]
    tr_lab = [labels[i] for i in train_idx]
    for i in train_idx:
        dy, dx = one_px[rng.integers(len(one_px))]
        tr_img.append(shift(images[i], dy, dx))
        tr_lab.append(labels[i])
    for i in rng.permutation(train_idx)[:2000]:
        dy, dx = two_px[rng.integers(len(two_px))]
        tr_img.append(shift(images[i], dy, dx))
        tr_lab.append(labels[i])

    order = rng.permutation(len(tr_img))
    write_idx(out / "train", np.array(tr_img)[order], np.array(tr_lab)[order])
    write_idx(out / "test", images[test_idx], labels[test_idx])


if __name__ == "__main__":
    main()
