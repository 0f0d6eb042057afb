"""Command-line lifecycle drivers.

Subcommands: train, prune, sensitivity, bench, report-sparsity, ablation,
gen-transforms.  Every command reads a key=value config file, writes its
artifacts under --out, and finishes by writing a manifest.json mapping
artifact names to sha256 hashes.  Exit codes: 0 success, 1 runtime
failure, 2 config error.

--deterministic pins BLAS to one thread (set before numpy loads) and
zeroes wall-clock fields in CSVs so fixed-seed reruns are bit-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="winoprune")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, zeroed wall-clock fields")
        p.add_argument("--out", default="run", help="output directory")

    p = sub.add_parser("train", help="train a dense baseline")
    common(p)
    p = sub.add_parser("prune", help="run the two-phase pruning schedule")
    common(p)
    p.add_argument("--checkpoint", default=None, help="input checkpoint (overrides config)")
    p.add_argument("--phase", choices=["spatial", "winograd", "both"], default="both")
    p = sub.add_parser("sensitivity", help="per-layer pruning sensitivity scan")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("bench", help="multiply counts and wall time, dense vs sparse")
    common(p)
    p = sub.add_parser("report-sparsity", help="sparsity distribution reports")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("ablation", help="importance and retraining ablations")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p = sub.add_parser("gen-transforms", help="dump A, B, G, F matrices as CSV")
    common(p)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv)
    if args.deterministic:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    from .config import ConfigError

    handlers = {
        "train": cmd_train,
        "prune": cmd_prune,
        "sensitivity": cmd_sensitivity,
        "bench": cmd_bench,
        "report-sparsity": cmd_report_sparsity,
        "ablation": cmd_ablation,
        "gen-transforms": cmd_gen_transforms,
    }
    try:
        handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _setup(args):
    from .config import parse_config

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    return cfg


def _write_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_manifest(out_dir):
    entries = {}
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            if name == "manifest.json":
                continue
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            with open(path, "rb") as fh:
                entries[rel] = hashlib.sha256(fh.read()).hexdigest()
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _instance(cfg):
    from .transforms import winograd_instance

    return winograd_instance(cfg.tile_m, cfg.kernel_n, cfg.instance_points())


def _verify_checksums(cfg):
    from .config import ConfigError, parse_checksums

    for name, expected in parse_checksums(cfg).items():
        path = os.path.join(cfg.data_dir, name)
        if not os.path.exists(path):
            raise ConfigError(f"checksum target missing: {path}")
        with open(path, "rb") as fh:
            actual = hashlib.sha256(fh.read()).hexdigest()
        if actual != expected:
            raise ConfigError(f"{name}: sha256 {actual} != expected {expected}")


def _load_data(cfg):
    """(train, test) datasets per the config, deterministically."""
    from . import data as data_mod
    from .config import ConfigError

    mean, std = cfg.norm_mean, cfg.norm_std
    if cfg.dataset == "synthetic":
        total = cfg.train_size + cfg.test_size
        ds = data_mod.synthetic_dataset(cfg.seed, classes=cfg.classes, n=total,
                                        size=cfg.image_size, noise=cfg.noise,
                                        mean=mean, std=std)
        train = data_mod.Dataset(images=ds.images[: cfg.train_size],
                                 labels=ds.labels[: cfg.train_size], split="train",
                                 mean=ds.mean, std=ds.std, num_classes=ds.num_classes)
        test = data_mod.Dataset(images=ds.images[cfg.train_size:],
                                labels=ds.labels[cfg.train_size:], split="test",
                                mean=ds.mean, std=ds.std, num_classes=ds.num_classes)
        return train, test
    if cfg.dataset == "cifar10":
        if not cfg.data_dir:
            raise ConfigError("dataset = cifar10 requires data_dir")
        _verify_checksums(cfg)
        train = data_mod.load_cifar10(cfg.data_dir, "train", mean=mean, std=std,
                                      limit=cfg.train_size or None)
        test = data_mod.load_cifar10(cfg.data_dir, "test", mean=mean, std=std,
                                     limit=cfg.test_size or None)
        return train, test
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def _train_log_rows(rows):
    return [(e, s, f"{l:.9g}", f"{a:.6f}", f"{lr:.9g}", f"{w:.3f}")
            for (e, s, l, a, lr, w) in rows]


TRAIN_LOG_HEADER = ["epoch", "split", "loss", "top1", "learning_rate", "wall_seconds"]


def cmd_train(args):
    import numpy as np

    from . import checkpoint as ckpt
    from . import data as data_mod
    from . import nn

    cfg = _setup(args)
    train, test = _load_data(cfg)
    instance = _instance(cfg)
    rng = np.random.default_rng(cfg.seed)
    in_shape = train.images.shape[1:]
    model = nn.build_model(cfg.model, in_shape=in_shape, rng=rng)
    optimizer = nn.SGD(nn.SgdConfig(learning_rate=cfg.learning_rate,
                                    momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay,
                                    adjust_alpha=cfg.adjust_alpha))
    log_rows = []
    augment_fn = data_mod.augment_batch if cfg.augment else None
    nn.train_model(model, optimizer, train.images, train.labels,
                   epochs=cfg.epochs, batch_size=cfg.batch_size, rng=rng,
                   eval_data=(test.images, test.labels), augment_fn=augment_fn,
                   log_rows=log_rows, zero_wall_clock=args.deterministic)
    _, top1 = nn.evaluate(model, test.images, test.labels, batch_size=cfg.batch_size)
    meta = ckpt.make_metadata(cfg.model, in_shape, instance,
                              ckpt.conv_domains(model), schedule_position=0,
                              rng=rng, extra={"baseline_top1": top1,
                                              "dataset": cfg.dataset,
                                              "seed": cfg.seed})
    ckpt.save(model, os.path.join(args.out, "model.swpk"), meta)
    _write_csv(os.path.join(args.out, "train_log.csv"), TRAIN_LOG_HEADER,
               _train_log_rows(log_rows))
    _write_manifest(args.out)
    print(f"trained {cfg.epochs} epochs; test top-1 {top1:.4f}; "
          f"artifacts in {args.out}")


def _load_checkpoint(args, cfg):
    from . import checkpoint as ckpt
    from .config import ConfigError

    path = getattr(args, "checkpoint", None) or cfg.checkpoint
    if not path:
        raise ConfigError("this command needs a checkpoint (flag --checkpoint or config key)")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    model, meta = ckpt.load(path)
    return model, meta, path


def _history_csv(out_path, history, layer_count):
    header = (["iteration", "phase"]
              + [f"layer{i}_sparsity" for i in range(layer_count)]
              + ["overall_sparsity", "top1", "relative_top1", "status"])
    rows = []
    for row in history:
        rows.append([row.iteration, row.phase]
                    + [f"{row.per_layer_sparsity.get(i, 0.0):.6f}" for i in range(layer_count)]
                    + [f"{row.overall_sparsity:.6f}", f"{row.top1:.6f}",
                       f"{row.relative_top1:+.6f}", row.status])
    _write_csv(out_path, header, rows)


def cmd_prune(args):
    import numpy as np

    from . import checkpoint as ckpt
    from . import nn, pruning
    from .config import ConfigError, parse_overrides, parse_schedule
    from .transforms import generate_transforms

    cfg = _setup(args)
    model, meta, _ = _load_checkpoint(args, cfg)
    ts = generate_transforms(ckpt.instance_from_metadata(meta))
    entries = parse_schedule(cfg)
    if not entries:
        raise ConfigError("prune needs a non-empty schedule")
    phase = getattr(args, "phase", "both")
    if phase != "both":
        entries = [e for e in entries if e[0] == phase]
    iterations = [pruning.PruneIteration(phase=p, target_sparsity=t, retrain_epochs=e)
                  for p, t, e in entries]
    schedule = pruning.PruneSchedule(iterations=iterations, stop_delta=cfg.stop_delta,
                                     layer_overrides=parse_overrides(cfg))
    train, test = _load_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    spatial_cfg = nn.SgdConfig(learning_rate=cfg.resolved_spatial_lr(),
                               momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                               adjust_alpha=cfg.adjust_alpha)
    winograd_cfg = nn.SgdConfig(learning_rate=cfg.resolved_winograd_lr(),
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                                adjust_alpha=cfg.adjust_alpha)
    log_rows = []
    model, history = pruning.prune_pipeline(
        model, schedule, (train.images, train.labels), (test.images, test.labels),
        ts, spatial_cfg, winograd_cfg, rng, batch_size=cfg.batch_size,
        log_rows=log_rows, zero_wall_clock=args.deterministic)
    layer_count = len(model.conv_layers())
    _history_csv(os.path.join(args.out, "history.csv"), history, layer_count)
    _write_csv(os.path.join(args.out, "prune_train_log.csv"), TRAIN_LOG_HEADER,
               _train_log_rows(log_rows))
    meta_out = ckpt.make_metadata(meta["topology"], meta["in_shape"],
                                  ckpt.instance_from_metadata(meta),
                                  ckpt.conv_domains(model),
                                  schedule_position=len(iterations),
                                  rng=rng, extra=meta.get("extra"))
    ckpt.save(model, os.path.join(args.out, "pruned.swpk"), meta_out)
    _write_manifest(args.out)
    per_layer, overall = pruning.sparsity_summary(model, ts)
    kept = [r for r in history if r.status == "ok"]
    final_top1 = kept[-1].top1 if kept else history[0].top1
    print(f"pruning done: overall winograd sparsity {overall:.3f}, "
          f"top-1 {final_top1:.4f}; history in {args.out}/history.csv")


def cmd_sensitivity(args):
    from . import checkpoint as ckpt
    from . import pruning
    from .transforms import generate_transforms

    cfg = _setup(args)
    model, meta, _ = _load_checkpoint(args, cfg)
    ts = generate_transforms(ckpt.instance_from_metadata(meta))
    _, test = _load_data(cfg)
    table = pruning.sensitivity_scan(model, test.images, test.labels, ts,
                                     probe_sparsity=cfg.probe_sparsity,
                                     grid_step=cfg.sensitivity_grid,
                                     batch_size=cfg.batch_size)
    rows = [(r.layer, f"{r.probe_sparsity:.4f}", f"{r.baseline_top1:.6f}",
             f"{r.probe_top1:.6f}", f"{r.accuracy_loss:+.6f}", f"{r.t_two_percent:.9g}")
            for r in table.rows]
    _write_csv(os.path.join(args.out, "sensitivity.csv"),
               ["layer", "probe_sparsity", "baseline_top1", "probe_top1",
                "accuracy_loss", "t_two_percent_loss"], rows)
    _write_manifest(args.out)
    for r in table.rows:
        print(f"layer {r.layer}: loss at {r.probe_sparsity:.0%} sparsity = "
              f"{r.accuracy_loss:+.4f}")


def cmd_bench(args):
    import time

    import numpy as np

    from . import conv as conv_ops
    from .transforms import generate_transforms

    cfg = _setup(args)
    instance = _instance(cfg)
    ts = generate_transforms(instance)
    rng = np.random.default_rng(cfg.seed)
    chans = cfg.bench_channels
    x = rng.normal(size=(cfg.bench_batch, chans, cfg.bench_size, cfg.bench_size)
                   ).astype(np.float32)
    w = rng.normal(size=(chans, chans, instance.n, instance.n)).astype(np.float32)
    q = conv_ops.weights_to_winograd(w, ts)
    dense_layer = conv_ops.WinogradConvLayer(q=q, mask=np.ones_like(q),
                                             instance=instance, pad=1)
    mask = (rng.random(q.shape) >= cfg.bench_sparsity).astype(np.float32)
    sparse_layer = conv_ops.WinogradConvLayer(q=q * mask, mask=mask,
                                              instance=instance, pad=1)
    packed = conv_ops.pack_sparse(sparse_layer)
    geom = conv_ops.tile_input(x, instance, 1).geom
    tiles, batch = geom.tile_count, cfg.bench_batch

    def timed(fn):
        best = float("inf")
        for _ in range(3):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return 0.0 if args.deterministic else best

    dense_ctr = conv_ops.ConvCounters()
    conv_ops.winograd_conv_layer(x, dense_layer, ts, counters=dense_ctr)
    sparse_ctr = conv_ops.ConvCounters()
    conv_ops.sparse_winograd_conv_layer(x, packed, ts, 1, counters=sparse_ctr)
    t_direct = timed(lambda: conv_ops.direct_conv2d(x, w, 1))
    t_dense = timed(lambda: conv_ops.winograd_conv_layer(x, dense_layer, ts))
    t_sparse = timed(lambda: conv_ops.sparse_winograd_conv_layer(x, packed, ts, 1))
    ratio = conv_ops.elementwise_multiply_ratio(instance)
    m, n, r = instance.m, instance.n, instance.out
    direct_tiled = batch * tiles * chans * chans * r * r * n * n
    dense_elem = dense_ctr.elementwise_multiplies
    sparse_elem = sparse_ctr.elementwise_multiplies
    rows = [
        ("tile_m", m), ("kernel_n", n), ("output_r", r),
        ("channels", chans), ("batch", batch), ("tiles_per_map", tiles),
        ("direct_elementwise_multiplies", direct_tiled),
        ("dense_winograd_elementwise_multiplies", dense_elem),
        ("elementwise_ratio_exact", f"{ratio.numerator}/{ratio.denominator}"),
        ("elementwise_ratio", f"{float(ratio):.9g}"),
        ("sparse_nnz", packed.nnz),
        ("sparse_elementwise_multiplies", sparse_elem),
        ("sparse_fraction_of_dense", f"{sparse_elem / dense_elem:.9g}"),
        ("dense_transform_multiplies", dense_ctr.transform_multiplies),
        ("wall_direct_seconds", f"{t_direct:.6f}"),
        ("wall_dense_winograd_seconds", f"{t_dense:.6f}"),
        ("wall_sparse_winograd_seconds", f"{t_sparse:.6f}"),
    ]
    _write_csv(os.path.join(args.out, "bench.csv"), ["metric", "value"], rows)
    _write_manifest(args.out)
    for k, v in rows:
        print(f"{k} = {v}")


def _position_grids(mask):
    """(including, excluding) per-position sparsity grids for a layer mask
    [out_ch, in_ch, m, m]; 'excluding' drops fully pruned filters."""
    import numpy as np

    zeros = mask == 0
    flat = zeros.reshape(-1, *mask.shape[2:])
    incl = flat.mean(axis=0)
    alive = ~flat.all(axis=(1, 2))
    excl = flat[alive].mean(axis=0) if alive.any() else np.zeros_like(incl)
    return incl, excl


def _ascii_heatmap(grid):
    shades = " .:-=+*#%@"
    lines = []
    for row in grid:
        cells = [shades[min(int(v * (len(shades) - 1) + 0.5), len(shades) - 1)]
                 for v in row]
        lines.append(" ".join(cells))
    return "\n".join(lines)


def cmd_report_sparsity(args):
    import numpy as np

    from . import checkpoint as ckpt
    from . import nn, pruning
    from .transforms import generate_transforms

    cfg = _setup(args)
    model, meta, _ = _load_checkpoint(args, cfg)
    ts = generate_transforms(ckpt.instance_from_metadata(meta))
    m = ts.instance.m
    hist_rows, pos_rows, heat_parts = [], [], []
    for pos, (idx, layer) in enumerate(model.conv_layers()):
        if isinstance(layer, nn.WinogradConv):
            keep = layer.wlayer.mask
        else:
            w_mask = layer.mask if layer.mask is not None else np.ones_like(layer.w)
            keep = pruning.transferred_position_mask(w_mask, ts.s)
        pruned_per_filter = (keep == 0).sum(axis=(2, 3)).ravel()
        counts = np.bincount(pruned_per_filter, minlength=m * m + 1)
        hist_rows += [(pos, bin_, int(c)) for bin_, c in enumerate(counts)]
        incl, excl = _position_grids(keep)
        pos_rows += [(pos, i, j, f"{incl[i, j]:.6f}", f"{excl[i, j]:.6f}")
                     for i in range(m) for j in range(m)]
        heat_parts.append(
            f"layer {pos} ({m}x{m}), sparsity by position\n"
            f"all filters:\n{_ascii_heatmap(incl)}\n"
            f"filters with at least one weight remaining:\n{_ascii_heatmap(excl)}\n")
    _write_csv(os.path.join(args.out, "sparsity_histogram.csv"),
               ["layer", "pruned_count", "filters"], hist_rows)
    _write_csv(os.path.join(args.out, "sparsity_positions.csv"),
               ["layer", "i", "j", "sparsity_all", "sparsity_partial_only"], pos_rows)
    heat_path = os.path.join(args.out, "sparsity_heatmaps.txt")
    with open(heat_path, "w") as fh:
        fh.write("\n".join(heat_parts))
    _write_manifest(args.out)
    print(f"sparsity reports in {args.out}")


def cmd_ablation(args):
    import numpy as np

    from . import checkpoint as ckpt
    from . import nn, pruning
    from .transforms import generate_transforms

    cfg = _setup(args)
    model, meta, _ = _load_checkpoint(args, cfg)
    ts = generate_transforms(ckpt.instance_from_metadata(meta))
    train, test = _load_data(cfg)
    if any(isinstance(l, nn.SpatialConv) for _, l in model.conv_layers()):
        model = pruning.convert_to_winograd(model, ts)
    _, baseline = nn.evaluate(model, test.images, test.labels, batch_size=cfg.batch_size)
    start = model.state_dict()

    imp_rows = []
    for target in cfg.ablation_sparsities:
        for mode in ("adjusted", "magnitude"):
            model.load_state_dict(start)
            for _, layer in model.conv_layers():
                pruning.prune_winograd_layer(layer, float(target), mode=mode)
            _, acc = nn.evaluate(model, test.images, test.labels,
                                 batch_size=cfg.batch_size)
            imp_rows.append((f"{target:.4f}", mode, f"{acc:.6f}",
                             f"{acc - baseline:+.6f}"))
    _write_csv(os.path.join(args.out, "importance_ablation.csv"),
               ["sparsity", "scoring", "top1", "relative_top1"], imp_rows)

    model.load_state_dict(start)
    for _, layer in model.conv_layers():
        pruning.prune_winograd_layer(layer, cfg.ablation_sparsity, mode="adjusted")
    pruned = model.state_dict()
    _, pruned_acc = nn.evaluate(model, test.images, test.labels,
                                batch_size=cfg.batch_size)

    lr0 = cfg.resolved_winograd_lr()
    variants = [("adjusted", lr0, alpha) for alpha in cfg.ablation_alphas]
    plain_lrs = cfg.ablation_lrs or (lr0, lr0 * 0.1, lr0 * 0.01)
    variants += [("plain", lr, None) for lr in plain_lrs]
    rt_rows = [("start", f"{lr0:.9g}", "", 0, f"{pruned_acc:.6f}",
                f"{pruned_acc - baseline:+.6f}")]
    for kind, lr, alpha in variants:
        model.load_state_dict(pruned)
        sgd = nn.SGD(nn.SgdConfig(learning_rate=lr, momentum=cfg.momentum,
                                  weight_decay=cfg.weight_decay,
                                  adjust_alpha=alpha if alpha is not None else 1.5))
        rng = np.random.default_rng(cfg.seed + 1)
        label = f"{kind}" if alpha is None else f"{kind}_a{alpha:g}"
        for epoch in range(cfg.ablation_epochs):
            nn.train_model(model, sgd, train.images, train.labels, epochs=1,
                           batch_size=cfg.batch_size, rng=rng,
                           adjust=(kind == "adjusted"),
                           zero_wall_clock=args.deterministic)
            _, acc = nn.evaluate(model, test.images, test.labels,
                                 batch_size=cfg.batch_size)
            rt_rows.append((label, f"{lr:.9g}",
                            "" if alpha is None else f"{alpha:g}",
                            epoch + 1, f"{acc:.6f}", f"{acc - baseline:+.6f}"))
    _write_csv(os.path.join(args.out, "retraining_ablation.csv"),
               ["variant", "learning_rate", "alpha", "epoch", "top1",
                "relative_top1"], rt_rows)
    _write_manifest(args.out)
    print(f"ablation CSVs in {args.out}")


def cmd_gen_transforms(args):
    import numpy as np

    from .transforms import generate_transforms

    cfg = _setup(args)
    ts = generate_transforms(_instance(cfg))
    for name, mat in (("A", ts.a), ("B", ts.b), ("G", ts.g), ("F", ts.f.f)):
        path = os.path.join(args.out, f"{name}.csv")
        with open(path, "w") as fh:
            for row in np.atleast_2d(mat):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    _write_manifest(args.out)
    print(f"transform matrices for m={ts.instance.m}, n={ts.instance.n} in {args.out}")


if __name__ == "__main__":
    sys.exit(main())
