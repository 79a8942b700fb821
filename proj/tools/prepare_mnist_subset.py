#!/usr/bin/env python3
"""Build a desk-scale MNIST subset in IDX format.

The `mnist` npm package ships 10,000 real MNIST digits as JSON (pixel values
rounded to three decimals). Multiplying by 255 and rounding recovers the
original 8-bit levels exactly, so the output is a faithful IDX copy of those
digits, shuffled with a fixed seed and split into train/test files that use
the standard MNIST file names.

Usage:
    tools/prepare_mnist_subset.py --out data/mnist-desk
    tools/prepare_mnist_subset.py --package-dir /path/to/unpacked/package --out ...
"""

import argparse
import json
import pathlib
import struct
import subprocess
import sys
import tarfile
import tempfile

import numpy as np


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    path.write_bytes(header + array.tobytes())


def fetch_package(workdir):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    tarball = next(pathlib.Path(workdir).glob("mnist-*.tgz"))
    with tarfile.open(tarball) as tar:
        tar.extractall(workdir)
    return pathlib.Path(workdir) / "package"


def load_digits(package_dir):
    images, labels = [], []
    for digit in range(10):
        path = package_dir / "src" / "digits" / f"{digit}.json"
        data = np.asarray(json.loads(path.read_text())["data"], dtype=np.float64)
        data = data.reshape(-1, 784)
        levels = np.rint(data * 255.0)
        if np.abs(levels / 255.0 - data).max() >= 0.5 / 255.0:
            sys.exit(f"{path}: values do not map back onto 8-bit levels")
        images.append(levels.astype(np.uint8))
        labels.append(np.full(len(levels), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, type=pathlib.Path)
    parser.add_argument("--package-dir", type=pathlib.Path)
    parser.add_argument("--train-size", type=int, default=6000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        package_dir = args.package_dir or fetch_package(tmp)
        images, labels = load_digits(package_dir)

    order = np.random.RandomState(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]
    n = args.train_size
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte", images[:n].reshape(-1, 28, 28))
    write_idx(args.out / "train-labels-idx1-ubyte", labels[:n])
    write_idx(args.out / "t10k-images-idx3-ubyte", images[n:].reshape(-1, 28, 28))
    write_idx(args.out / "t10k-labels-idx1-ubyte", labels[n:])
    print(f"wrote {n} train and {len(images) - n} test images to {args.out}")


if __name__ == "__main__":
    main()
