#!/usr/bin/env python3
"""Write a synthetic dataset in the CIFAR-10 binary layout.

Produces the five train batch files plus the test batch (10000 records
each) under --out, deterministically in --seed.  Useful when the real
CIFAR-10 binaries are not available; the loader treats both identically.
"""

import argparse


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="target directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=10)
    parser.add_argument("--noise", type=float, default=0.16)
    args = parser.parse_args()

    from winoprune import data

    data.write_synthetic_cifar10(args.out, seed=args.seed, classes=args.classes,
                                 noise=args.noise)
    print(f"wrote {len(data.TRAIN_FILES) + len(data.TEST_FILES)} batch files "
          f"to {args.out}")


if __name__ == "__main__":
    main()
