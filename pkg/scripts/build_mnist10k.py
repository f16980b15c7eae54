"""Rebuild data/mnist10k from the 10,000 MNIST digits bundled in the npm ``mnist`` package.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist10k.py package/src/digits data/mnist10k

Pixels are stored there as x/255 rounded to three decimals; they are mapped
back to bytes and written as gzipped IDX files (images magic 2051, labels
magic 2049). Samples are ordered by class, as in the source.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src, dst):
    src, dst = Path(src), Path(dst)
    images, labels = [], []
    for digit in range(10):
        data = np.array(json.loads((src / f"{digit}.json").read_text())["data"], dtype=float)
        px = np.rint(data * 255).clip(0, 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.tobytes())
    print(f"wrote {len(images)} samples to {dst}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
