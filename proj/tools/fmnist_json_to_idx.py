#!/usr/bin/env python3
"""Convert the per-class JSON dump shipped in the `fashion-mnist` npm package
into the four standard IDX files.

The package stores 7000 images per class (28x28, uint8) without a train/test
marker. The first 6000 images of each class become the training split and the
remaining 1000 the test split; samples are interleaved class-by-class so both
splits stay balanced.
"""
import argparse
import json
import pathlib
import struct

ROWS = COLS = 28
TRAIN_PER_CLASS = 6000
TEST_PER_CLASS = 1000


def write_idx(path, images, labels, kind):
    n = len(labels)
    with open(path / f"{kind}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, ROWS, COLS))
        for img in images:
            f.write(bytes(img))
    with open(path / f"{kind}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir", help="extracted npm package root (contains src/clothes)")
    ap.add_argument("out_dir")
    args = ap.parse_args()
    src = pathlib.Path(args.package_dir) / "src" / "clothes"
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    per_class = []
    for c in range(10):
        rows = json.loads((src / f"{c}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == ROWS * COLS]
        if len(rows) < TRAIN_PER_CLASS + TEST_PER_CLASS:
            raise SystemExit(f"class {c}: only {len(rows)} images")
        per_class.append(rows)

    for kind, lo, hi in (("train", 0, TRAIN_PER_CLASS),
                         ("t10k", TRAIN_PER_CLASS, TRAIN_PER_CLASS + TEST_PER_CLASS)):
        images, labels = [], []
        for i in range(lo, hi):
            for c in range(10):
                images.append(per_class[c][i])
                labels.append(c)
        write_idx(out, images, labels, kind)
        print(f"{kind}: {len(labels)} samples")


if __name__ == "__main__":
    main()
