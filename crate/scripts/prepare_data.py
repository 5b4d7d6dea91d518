#!/usr/bin/env python3
"""Build the desk-scale datasets under data/ from pip-distributed copies.

MNIST: the 5,000-image subset bundled with `mlxtend` (500 per digit), written
as gzip-compressed IDX files.

Adult: the UCI Adult census files bundled with `responsibly`. Categorical
columns are one-hot encoded into binary features, continuous columns are
min-max scaled to [0, 1], rows with missing values are dropped, and the
result is written as a gzip-compressed CSV plus a JSON schema sidecar.

Usage: python3 scripts/prepare_data.py [--wheels DIR] [--out data]
"""

import argparse
import csv
import glob
import gzip
import io
import json
import os
import struct
import subprocess
import zipfile

ADULT_COLUMNS = [
    ("age", "continuous"),
    ("workclass", "categorical"),
    ("fnlwgt", "continuous"),
    ("education", "categorical"),
    ("education-num", "continuous"),
    ("marital-status", "categorical"),
    ("occupation", "categorical"),
    ("relationship", "categorical"),
    ("race", "categorical"),
    ("sex", "categorical"),
    ("capital-gain", "continuous"),
    ("capital-loss", "continuous"),
    ("hours-per-week", "continuous"),
    ("native-country", "categorical"),
]


def wheel(wheels, name):
    found = glob.glob(os.path.join(wheels, f"{name}-*.whl"))
    if not found:
        subprocess.check_call(
            ["pip", "download", "--no-deps", name, "-d", wheels]
        )
        found = glob.glob(os.path.join(wheels, f"{name}-*.whl"))
    return zipfile.ZipFile(sorted(found)[-1])


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def prepare_mnist(wheels, out):
    z = wheel(wheels, "mlxtend")
    text = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    pixels = bytearray()
    labels = bytearray()
    for line in text.splitlines():
        vals = line.split(",")
        pixels.extend(int(float(v)) for v in vals[:-1])
        labels.append(int(float(vals[-1])))
    n = len(labels)
    os.makedirs(out, exist_ok=True)
    write_idx(os.path.join(out, "images-idx3-ubyte.gz"), 0x00000803, [n, 28, 28], bytes(pixels))
    write_idx(os.path.join(out, "labels-idx1-ubyte.gz"), 0x00000801, [n], bytes(labels))
    print(f"mnist: {n} images")


def prepare_adult(wheels, out):
    z = wheel(wheels, "responsibly")
    rows = []
    for member in ("adult.data", "adult.test"):
        text = z.read(f"responsibly/dataset/adult/{member}").decode()
        for line in text.splitlines():
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 15 or "?" in parts:
                continue
            label = 1 if parts[14].rstrip(".") == ">50K" else 0
            rows.append((parts[:14], label))

    header = []
    kinds = []
    encoders = []
    for idx, (name, kind) in enumerate(ADULT_COLUMNS):
        if kind == "continuous":
            vals = [float(r[0][idx]) for r in rows]
            lo, hi = min(vals), max(vals)
            header.append(name)
            kinds.append("continuous")
            encoders.append(("c", lo, hi))
        else:
            cats = sorted({r[0][idx] for r in rows})
            header.extend(f"{name}={c}" for c in cats)
            kinds.extend("binary" for _ in cats)
            encoders.append(("b", cats))

    os.makedirs(out, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header + ["income"])
    for feats, label in rows:
        line = []
        for idx, enc in enumerate(encoders):
            if enc[0] == "c":
                _, lo, hi = enc
                line.append(f"{(float(feats[idx]) - lo) / (hi - lo):.6f}")
            else:
                line.extend("1" if feats[idx] == c else "0" for c in enc[1])
        line.append(str(label))
        w.writerow(line)
    with gzip.GzipFile(os.path.join(out, "adult.csv.gz"), "wb", mtime=0) as f:
        f.write(buf.getvalue().encode())

    schema = {
        "label": "income",
        "num_classes": 2,
        "columns": [{"name": n, "kind": k} for n, k in zip(header, kinds)],
    }
    with open(os.path.join(out, "adult.schema.json"), "w") as f:
        json.dump(schema, f, indent=2)
        f.write("\n")
    print(f"adult: {len(rows)} rows, {len(header)} features")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheels", default="/tmp/dl")
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data"))
    args = ap.parse_args()
    os.makedirs(args.wheels, exist_ok=True)
    prepare_mnist(args.wheels, os.path.join(args.out, "mnist"))
    prepare_adult(args.wheels, os.path.join(args.out, "adult"))


if __name__ == "__main__":
    main()
