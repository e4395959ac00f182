#!/usr/bin/env python3
"""Build the balanced MNIST subset used by the image experiments.

Input is the `src/digits/<d>.json` directory of the `mnist` npm package
(`npm pack mnist`), which stores 28x28 digits as pixel/255 floats rounded to
three decimals. Pixels are restored to bytes with round(v * 255) and written
as standard IDX files.
"""

import argparse
import json
import random
import struct
from pathlib import Path

SIDE = 28


def load_digit(path):
    flat = json.loads(path.read_text())["data"]
    count = len(flat) // (SIDE * SIDE)
    return [
        bytes(round(v * 255) for v in flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE])
        for i in range(count)
    ]


def write_split(out, prefix, samples):
    images = struct.pack(">IIII", 0x803, len(samples), SIDE, SIDE)
    images += b"".join(img for img, _ in samples)
    labels = struct.pack(">II", 0x801, len(samples)) + bytes(lbl for _, lbl in samples)
    (out / f"{prefix}-images-idx3-ubyte").write_bytes(images)
    (out / f"{prefix}-labels-idx1-ubyte").write_bytes(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("digits", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--seed", type=int, default=2021)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    train, test = [], []
    for d in range(10):
        imgs = load_digit(args.digits / f"{d}.json")
        rng.shuffle(imgs)
        need = args.train_per_class + args.test_per_class
        if len(imgs) < need:
            raise SystemExit(f"digit {d}: only {len(imgs)} samples, need {need}")
        train += [(img, d) for img in imgs[:args.train_per_class]]
        test += [(img, d) for img in imgs[args.train_per_class:need]]
    rng.shuffle(train)
    rng.shuffle(test)
    args.out.mkdir(parents=True, exist_ok=True)
    write_split(args.out, "train", train)
    write_split(args.out, "t10k", test)


if __name__ == "__main__":
    main()
