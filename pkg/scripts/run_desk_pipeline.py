#!/usr/bin/env python3
"""Full desk-scale experiment: train a 4-conv CNN, run the two-phase
pruning schedule, then produce sensitivity, sparsity, benchmark and
ablation reports.

Uses real CIFAR-10 binaries when --cifar points at them, otherwise writes
a synthetic stand-in in the same format first.  Everything lands under
--out with per-step subdirectories and manifests.
"""

import argparse
import os
import sys


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="desk_run", help="output directory")
    parser.add_argument("--cifar", default=None,
                        help="directory with CIFAR-10 binary batches")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deterministic", action="store_true")
    args = parser.parse_args()

    from winoprune import cli, data

    os.makedirs(args.out, exist_ok=True)
    cifar_dir = args.cifar
    if cifar_dir is None or not os.path.exists(
            os.path.join(cifar_dir, "data_batch_1.bin")):
        cifar_dir = os.path.join(args.out, "cifar_synthetic")
        if not os.path.exists(os.path.join(cifar_dir, "data_batch_1.bin")):
            print(f"no CIFAR-10 batches given; writing synthetic data to {cifar_dir}")
            data.write_synthetic_cifar10(cifar_dir, seed=args.seed)

    cfg_path = os.path.join(args.out, "desk.cfg")
    with open(cfg_path, "w") as fh:
        fh.write(f"""\
model = conv:16,bn,relu,conv:16,bn,relu,pool,conv:32,bn,relu,conv:32,bn,relu,pool,flatten,dense:10
dataset = cifar10
data_dir = {cifar_dir}
train_size = 5000
test_size = 1000
seed = {args.seed}
tile_m = 6
kernel_n = 3
epochs = 3
batch_size = 64
learning_rate = 0.05
momentum = 0.9
weight_decay = 0.0005
winograd_lr = 0.005
schedule = spatial:0.35:1,winograd:0.50:1,winograd:0.58:1
layer_override = layer0=0.20
stop_delta = 0.02
probe_sparsity = 0.6
ablation_sparsities = 0.4,0.5,0.6,0.7
ablation_sparsity = 0.65
ablation_epochs = 2
""")

    det = ["--deterministic"] if args.deterministic else []
    steps = [
        ("train", ["train", "--config", cfg_path,
                   "--out", os.path.join(args.out, "train")] + det),
        ("prune", ["prune", "--config", cfg_path,
                   "--checkpoint", os.path.join(args.out, "train", "model.swpk"),
                   "--out", os.path.join(args.out, "prune")] + det),
        ("sensitivity", ["sensitivity", "--config", cfg_path,
                         "--checkpoint", os.path.join(args.out, "train", "model.swpk"),
                         "--out", os.path.join(args.out, "sensitivity")] + det),
        ("report-sparsity", ["report-sparsity", "--config", cfg_path,
                             "--checkpoint", os.path.join(args.out, "prune", "pruned.swpk"),
                             "--out", os.path.join(args.out, "report")]),
        ("bench", ["bench", "--config", cfg_path,
                   "--out", os.path.join(args.out, "bench")] + det),
        ("ablation", ["ablation", "--config", cfg_path,
                      "--checkpoint", os.path.join(args.out, "train", "model.swpk"),
                      "--out", os.path.join(args.out, "ablation")] + det),
    ]
    for name, argv in steps:
        print(f"== {name}")
        rc = cli.main(argv)
        if rc != 0:
            print(f"step {name} failed with exit code {rc}", file=sys.stderr)
            return rc
    print(f"desk pipeline complete; artifacts under {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
