#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the 5000-digit sample that
ships inside the mlxtend wheel (500 training-set digits per class).

    python3 scripts/mnist_subset.py [--wheel PATH] [--out data/mnist-subset]

Per class, the first 400 digits go to the training files and the last 100 to
the test files. Both files interleave classes round-robin.
"""
import argparse
import glob
import gzip
import os
import struct
import subprocess
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def find_wheel(path):
    if path:
        return path
    tmp = tempfile.mkdtemp()
    subprocess.check_call(
        ["pip", "download", "--no-deps", "-q", "mlxtend==0.24.0", "-d", tmp]
    )
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def write_idx(path, images, labels):
    img = struct.pack(">IIII", 0x803, len(images), 28, 28) + b"".join(images)
    lab = struct.pack(">II", 0x801, len(labels)) + bytes(labels)
    # mtime=0 keeps the gzip output byte-stable.
    for name, payload in ((path[0], img), (path[1], lab)):
        with open(name, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
                f.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default="data/mnist-subset")
    args = ap.parse_args()

    with zipfile.ZipFile(find_wheel(args.wheel)) as z:
        rows = gzip.decompress(z.read(MEMBER)).decode().splitlines()

    by_class = {c: [] for c in range(10)}
    for row in rows:
        vals = [int(v) for v in row.split(",")]
        by_class[vals[-1]].append(bytes(vals[:-1]))

    def interleave(lo, hi):
        imgs, labs = [], []
        for i in range(lo, hi):
            for c in range(10):
                imgs.append(by_class[c][i])
                labs.append(c)
        return imgs, labs

    os.makedirs(args.out, exist_ok=True)
    j = lambda n: os.path.join(args.out, n)
    write_idx((j("train-images-idx3-ubyte.gz"), j("train-labels-idx1-ubyte.gz")), *interleave(0, 400))
    write_idx((j("t10k-images-idx3-ubyte.gz"), j("t10k-labels-idx1-ubyte.gz")), *interleave(400, 500))


if __name__ == "__main__":
    main()
