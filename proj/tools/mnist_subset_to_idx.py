#!/usr/bin/env python3
"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

The full MNIST archive is not always reachable from build machines; the
subset shipped inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz,
784 pixel columns followed by the label) is enough for desk-scale runs.

Usage:
    pip download --no-deps -d /tmp/wheels mlxtend
    python3 tools/mnist_subset_to_idx.py /tmp/wheels/mlxtend-*.whl data/mnist-5k

Rows are sorted by class; the first 400 images of every class become the
train split and the remaining 100 per class the t10k split.
"""

import argparse
import gzip
import io
import pathlib
import struct
import zipfile

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN_PER_CLASS = 400


def read_rows(wheel):
    with zipfile.ZipFile(wheel) as zf:
        raw = zf.read(CSV_MEMBER)
    text = gzip.GzipFile(fileobj=io.BytesIO(raw)).read().decode()
    rows = []
    for line in text.splitlines():
        values = [int(v) for v in line.split(",")]
        if len(values) != 785:
            raise ValueError(f"unexpected row width {len(values)}")
        rows.append((bytes(values[:784]), values[784]))
    return rows


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(pixels)


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel")
    parser.add_argument("out_dir")
    args = parser.parse_args()

    rows = read_rows(args.wheel)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, seen = [], [], {}
    for pixels, label in rows:
        seen[label] = seen.get(label, 0) + 1
        (train if seen[label] <= TRAIN_PER_CLASS else test).append((pixels, label))
    write_images(out / "train-images-idx3-ubyte", train)
    write_labels(out / "train-labels-idx1-ubyte", train)
    write_images(out / "t10k-images-idx3-ubyte", test)
    write_labels(out / "t10k-labels-idx1-ubyte", test)
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
