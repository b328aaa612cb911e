#!/usr/bin/env python3
"""Convert mlxtend's bundled mnist_5k.csv.gz into gzipped MNIST IDX files.

Usage: make_mnist5k.py <mlxtend wheel or mnist_5k.csv.gz> <out_dir>
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def read_rows(src: Path):
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = src.read_bytes()
    for line in gzip.decompress(raw).decode().splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        yield vals[:-1], vals[-1]


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rows = list(read_rows(src))
    images = struct.pack(">IIII", 0x803, len(rows), 28, 28)
    images += bytes(p for px, _ in rows for p in px)
    labels = struct.pack(">II", 0x801, len(rows)) + bytes(l for _, l in rows)
    # mtime=0 keeps the archives reproducible
    for name, payload in (("mnist5k-images-idx3-ubyte.gz", images),
                          ("mnist5k-labels-idx1-ubyte.gz", labels)):
        with open(out / name, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0, filename="") as g:
                g.write(payload)


if __name__ == "__main__":
    main()
