"""Line-based key=value run configuration.

Unknown keys are rejected (exit code 2 at the CLI).  Paths are resolved to
absolute form at parse time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


def _parse_bool(v: str) -> bool:
    lv = v.strip().lower()
    if lv in ("true", "1", "yes"):
        return True
    if lv in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _parse_floats(v: str):
    return tuple(float(x) for x in v.split(",") if x.strip())


@dataclass
class RunConfig:
    # model / data
    model: str = "conv:16,bn,relu,conv:16,bn,relu,pool,conv:32,bn,relu,conv:32,bn,relu,pool,flatten,dense:10"
    dataset: str = "synthetic"            # synthetic | cifar10
    data_dir: str = ""
    data_checksums: str = ""              # optional name:sha256 pairs, comma-separated
    norm_mean: tuple = (0.4914, 0.4822, 0.4465)
    norm_std: tuple = (0.2470, 0.2435, 0.2616)
    classes: int = 10
    train_size: int = 2048
    test_size: int = 512
    image_size: int = 32
    noise: float = 0.16
    seed: int = 0
    augment: bool = False

    # winograd instance
    tile_m: int = 6
    kernel_n: int = 3
    points: str = ""                      # comma list of rationals; empty = default

    # training
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    adjust_alpha: float = 1.5

    # pruning
    schedule: str = ""                    # e.g. spatial:0.3:2,winograd:0.5:2
    layer_override: str = ""              # e.g. layer0=0.20
    stop_delta: float = 0.001
    spatial_lr: float = 0.0               # 0 = reuse learning_rate
    winograd_lr: float = 0.0              # 0 = learning_rate / 10
    probe_sparsity: float = 0.6
    sensitivity_grid: float = 0.05
    beta: float = 1.0

    # ablation
    ablation_sparsities: tuple = (0.3, 0.4, 0.5, 0.6, 0.7)
    ablation_sparsity: float = 0.65
    ablation_epochs: int = 3
    ablation_lrs: tuple = ()              # empty = winograd_lr * (1, 0.1, 0.01)
    ablation_alphas: tuple = (0.0, 1.0, 1.5, 2.0)

    # bench
    bench_batch: int = 4
    bench_channels: int = 16
    bench_size: int = 32
    bench_sparsity: float = 0.74

    # io
    checkpoint: str = ""

    def resolved_spatial_lr(self) -> float:
        return self.spatial_lr or self.learning_rate

    def resolved_winograd_lr(self) -> float:
        return self.winograd_lr or self.learning_rate * 0.1

    def instance_points(self):
        from fractions import Fraction

        if not self.points.strip():
            return None
        return tuple(Fraction(p.strip()) for p in self.points.split(","))


_CONVERTERS = {
    int: int,
    float: float,
    str: str,
    bool: _parse_bool,
    tuple: _parse_floats,
}

_PATH_KEYS = ("data_dir", "checkpoint")


def parse_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    cfg = RunConfig()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
            try:
                converted = _CONVERTERS[types[key]](value)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
            setattr(cfg, key, converted)
    for key in _PATH_KEYS:
        value = getattr(cfg, key)
        if value:
            setattr(cfg, key, os.path.abspath(value))
    return cfg


def parse_schedule(cfg: RunConfig):
    """schedule string -> list of (phase, target_sparsity, retrain_epochs)."""
    entries = []
    if not cfg.schedule.strip():
        return entries
    for part in cfg.schedule.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise ConfigError(f"bad schedule entry {part!r}, want phase:target:epochs")
        phase, target, epochs = bits[0].strip(), float(bits[1]), int(bits[2])
        if phase not in ("spatial", "winograd"):
            raise ConfigError(f"bad schedule phase {phase!r}")
        entries.append((phase, target, epochs))
    return entries


def parse_checksums(cfg: RunConfig) -> dict[str, str]:
    """data_checksums string like 'test_batch.bin:abc123,...' -> dict."""
    sums = {}
    if not cfg.data_checksums.strip():
        return sums
    for part in cfg.data_checksums.split(","):
        bits = part.strip().split(":")
        if len(bits) != 2:
            raise ConfigError(f"bad checksum entry {part!r}, want NAME:SHA256")
        sums[bits[0].strip()] = bits[1].strip().lower()
    return sums


def parse_overrides(cfg: RunConfig) -> dict[int, float]:
    """layer_override string like 'layer0=0.20,layer3=0.5' -> {0: 0.2, 3: 0.5}."""
    overrides = {}
    if not cfg.layer_override.strip():
        return overrides
    for part in cfg.layer_override.split(","):
        bits = part.strip().split("=")
        if len(bits) != 2 or not bits[0].startswith("layer"):
            raise ConfigError(f"bad layer override {part!r}, want layerK=FRACTION")
        try:
            idx = int(bits[0][len("layer"):])
            overrides[idx] = float(bits[1])
        except ValueError as exc:
            raise ConfigError(f"bad layer override {part!r}: {exc}") from exc
    return overrides
