"""Two-phase pruning driver and its building blocks.

Phase 1 (spatial): spatial weights feeding the same Winograd-domain
position form a group; groups whose max-norm falls below a threshold are
zeroed wholesale, so the corresponding Winograd entries become exactly
zero after the transform.  Phase 2 (winograd): weights live in the
Winograd domain and are scored by q^2 * F^2, the expected squared output
perturbation per entry under i.i.d. inputs; retraining divides gradients
elementwise by F^alpha.

Masks are intersected across iterations, so pruned entries never revive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import conv as conv_ops
from . import nn
from .transforms import CoeffTensorS, ImportanceMatrix, TransformSet


def group_importance(w: np.ndarray, s: CoeffTensorS) -> np.ndarray:
    """Max-norm of each Winograd position's spatial weight group.

    w is [..., n, n]; returns [..., m, m] where entry (i, j) is
    max{|w[u,v]| : s[i,j,u,v] != 0}.
    """
    pattern = s.s != 0
    aw = np.abs(w)[..., None, None, :, :]
    return np.where(pattern, aw, 0.0).max(axis=(-2, -1))


def spatial_mask(w: np.ndarray, s: CoeffTensorS, t_spatial: float) -> np.ndarray:
    """Mask zeroing the union of all groups with importance below t_spatial.

    Every flagged position (i, j) then satisfies (G (w . mask) G^T)[i,j] = 0
    exactly, because each product term has an exactly-zero factor.
    """
    if t_spatial < 0:
        raise ValueError("t_spatial must be >= 0")
    redundant = group_importance(w, s) < t_spatial
    return mask_from_redundant_positions(redundant, s)


def mask_from_redundant_positions(redundant: np.ndarray, s: CoeffTensorS) -> np.ndarray:
    """Spatial mask whose zeros are the union of the flagged positions'
    groups. redundant is [..., m, m] boolean."""
    pattern = s.s != 0
    covered = (redundant[..., :, :, None, None] & pattern).any(axis=(-4, -3))
    return (~covered).astype(np.float32)


def transferred_position_mask(w_mask: np.ndarray, s: CoeffTensorS) -> np.ndarray:
    """Winograd-position keep-mask implied by a spatial mask: a position is
    zero iff every spatial weight in its group is masked."""
    pattern = s.s != 0
    alive = w_mask.astype(bool)[..., None, None, :, :]
    kept = (pattern & alive).any(axis=(-2, -1))
    return kept.astype(np.float32)


def winograd_importance(q: np.ndarray, f: ImportanceMatrix) -> np.ndarray:
    """Importance grid q^2 * f^2 (expected squared output change when the
    entry is zeroed, for i.i.d. unit-variance inputs)."""
    return np.asarray(q, dtype=np.float64) ** 2 * f.f**2


def winograd_mask(q: np.ndarray, f: ImportanceMatrix, t_winograd: float) -> np.ndarray:
    """Mask with zeros exactly where q^2 f^2 < t_winograd."""
    if t_winograd < 0:
        raise ValueError("t_winograd must be >= 0")
    return (winograd_importance(q, f) >= t_winograd).astype(np.float32)


def threshold_for_sparsity(values, target: float) -> float:
    """Threshold t such that `value < t` prunes floor(target * N) entries.

    Exact when the boundary value is unique; with ties, use
    select_prune_mask for an exactly-sized, index-stable selection.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty importance list")
    if not 0.0 <= target <= 1.0:
        raise ValueError("target sparsity must be in [0, 1]")
    k = int(np.floor(target * values.size))
    if k == 0:
        return 0.0
    ordered = np.sort(values, kind="stable")
    if k >= values.size:
        return float(np.nextafter(ordered[-1], np.inf))
    return float(ordered[k])


def select_prune_mask(values, target: float) -> np.ndarray:
    """Boolean prune set of exactly floor(target * N) entries: the smallest
    values, ties broken by lower flat index first."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty importance list")
    if not 0.0 <= target <= 1.0:
        raise ValueError("target sparsity must be in [0, 1]")
    k = int(np.floor(target * values.size))
    prune = np.zeros(values.size, dtype=bool)
    if k:
        order = np.argsort(values, kind="stable")
        prune[order[:k]] = True
    return prune


def prune_spatial_layer(layer: nn.SpatialConv, s: CoeffTensorS, target: float):
    """Flag the lowest-importance fraction of Winograd positions in the
    layer (jointly over all filters) and zero their spatial groups.
    Intersects with any existing mask."""
    grid = group_importance(layer.w, s)
    flags = select_prune_mask(grid.ravel(), target).reshape(grid.shape)
    new_mask = mask_from_redundant_positions(flags, s)
    layer.mask = new_mask if layer.mask is None else layer.mask * new_mask
    np.multiply(layer.w, layer.mask, out=layer.w)


def prune_winograd_layer(layer: nn.WinogradConv, target: float,
                         mode: str = "adjusted"):
    """Mask the lowest-importance fraction of q entries, scored by
    q^2 f^2 ('adjusted') or |q| ('magnitude').  Intersects with the
    existing mask so pruned entries never revive."""
    q = layer.wlayer.q
    if mode == "adjusted":
        values = winograd_importance(q, layer.importance)
    elif mode == "magnitude":
        values = np.abs(q).astype(np.float64)
    else:
        raise ValueError(f"unknown scoring mode {mode!r}")
    flags = select_prune_mask(values.ravel(), target).reshape(q.shape)
    new_mask = (~flags).astype(np.float32)
    layer.wlayer.mask = layer.wlayer.mask * new_mask
    layer.wlayer.apply_mask()


def convert_to_winograd(model: nn.Model, ts: TransformSet) -> nn.Model:
    """Replace every SpatialConv with a WinogradConv holding
    q = G W G^T and mask = indicator(q != 0).

    Returns a new Model sharing the non-conv layers; forward outputs stay
    equivalent up to float rounding.
    """
    layers = []
    for layer in model.layers:
        if isinstance(layer, nn.WinogradConv):
            raise ValueError("model already contains Winograd-domain conv layers")
        if isinstance(layer, nn.SpatialConv):
            if layer.w.shape[2] != ts.instance.n:
                raise ValueError(
                    f"kernel size {layer.w.shape[2]} unsupported by instance n={ts.instance.n}")
            w = layer.w if layer.mask is None else layer.w * layer.mask
            q = conv_ops.weights_to_winograd(w.astype(np.float64), ts).astype(np.float32)
            mask = (q != 0).astype(np.float32)
            wlayer = conv_ops.WinogradConvLayer(q=q, mask=mask,
                                                instance=ts.instance, pad=layer.pad)
            layers.append(nn.WinogradConv(wlayer, ts))
        else:
            layers.append(layer)
    return nn.Model(layers)


def layer_winograd_sparsity(layer, ts: TransformSet) -> tuple[int, int]:
    """(zeroed, total) Winograd-domain entry counts for one conv layer."""
    if isinstance(layer, nn.WinogradConv):
        mask = layer.wlayer.mask
        return int((mask == 0).sum()), mask.size
    if isinstance(layer, nn.SpatialConv):
        w_mask = layer.mask if layer.mask is not None else np.ones_like(layer.w)
        kept = transferred_position_mask(w_mask, ts.s)
        return int((kept == 0).sum()), kept.size
    raise TypeError(f"not a conv layer: {type(layer).__name__}")


def sparsity_summary(model: nn.Model, ts: TransformSet):
    """Per-conv-layer and overall Winograd-domain sparsity fractions."""
    per_layer = {}
    zeroed = total = 0
    for pos, (idx, layer) in enumerate(model.conv_layers()):
        z, t = layer_winograd_sparsity(layer, ts)
        per_layer[pos] = z / t
        zeroed += z
        total += t
    overall = zeroed / total if total else 0.0
    return per_layer, overall


@dataclass
class PruneIteration:
    phase: str                       # "spatial" | "winograd"
    target_sparsity: float | None = None
    thresholds: dict[int, float] | None = None   # per prunable-layer index
    retrain_epochs: int = 0

    def __post_init__(self):
        if self.phase not in ("spatial", "winograd"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if (self.target_sparsity is None) == (self.thresholds is None):
            raise ValueError("set exactly one of target_sparsity or thresholds")
        if self.target_sparsity is not None and not 0.0 <= self.target_sparsity <= 1.0:
            raise ValueError("target sparsity must be in [0, 1]")
        if self.retrain_epochs < 0:
            raise ValueError("retrain_epochs must be >= 0")


@dataclass
class PruneSchedule:
    """Ordered prune/retrain iterations plus the stop rule.

    layer_overrides pins specific prunable layers (by position among conv
    layers) to a fixed sparsity, e.g. {0: 0.2} for the first conv layer.
    stop_delta is the maximum tolerated absolute top-1 drop versus the
    dense baseline before the driver restores the last good state.
    """

    iterations: list[PruneIteration] = field(default_factory=list)
    stop_delta: float = 0.001
    layer_overrides: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        last = -1.0
        for it in self.iterations:
            if it.target_sparsity is not None:
                if it.target_sparsity < last:
                    raise ValueError("sparsity targets must be nondecreasing across iterations")
                last = it.target_sparsity
        phases = [it.phase for it in self.iterations]
        if "spatial" in phases and "winograd" in phases:
            if phases.index("winograd") < len(phases) - 1 - phases[::-1].index("spatial"):
                raise ValueError("spatial iterations must precede winograd iterations")
        for ov in self.layer_overrides.values():
            if not 0.0 <= ov <= 1.0:
                raise ValueError("override sparsity must be in [0, 1]")


@dataclass
class HistoryRow:
    iteration: int
    phase: str
    per_layer_sparsity: dict[int, float]
    overall_sparsity: float
    top1: float
    relative_top1: float
    status: str = "ok"


@dataclass
class SensitivityRow:
    layer: int
    probe_sparsity: float
    baseline_top1: float
    probe_top1: float
    accuracy_loss: float
    t_two_percent: float


@dataclass
class SensitivityTable:
    rows: list[SensitivityRow]


def _layer_importance_values(layer, ts: TransformSet) -> np.ndarray:
    if isinstance(layer, nn.WinogradConv):
        return winograd_importance(layer.wlayer.q, layer.importance).ravel()
    return group_importance(layer.w, ts.s).ravel()


def _probe_prune(layer, ts: TransformSet, target: float):
    if isinstance(layer, nn.WinogradConv):
        prune_winograd_layer(layer, target)
    else:
        prune_spatial_layer(layer, ts.s, target)


def _snapshot_layer(layer):
    params = {k: v.copy() for k, v in layer.params().items()}
    masks = {k: (None if v is None else v.copy()) for k, v in layer.masks().items()}
    return params, masks


def _restore_layer(layer, snap):
    params, masks = snap
    for k, v in params.items():
        layer.params()[k][...] = v
    for k, v in masks.items():
        if isinstance(layer, nn.SpatialConv):
            layer.mask = v
        elif isinstance(layer, nn.WinogradConv):
            if v is not None:
                layer.wlayer.mask = v


def sensitivity_scan(model: nn.Model, images, labels, ts: TransformSet,
                     probe_sparsity: float = 0.6, loss_budget: float = 0.02,
                     grid_step: float = 0.05, batch_size: int = 256) -> SensitivityTable:
    """Per-layer accuracy loss when only that layer is pruned to
    probe_sparsity, plus the highest-importance threshold whose accuracy
    drop first reaches loss_budget (scanned over a sparsity grid).

    The model is restored exactly after each probe.
    """
    _, baseline = nn.evaluate(model, images, labels, batch_size=batch_size)
    rows = []
    for pos, (idx, layer) in enumerate(model.conv_layers()):
        snap = _snapshot_layer(layer)
        _probe_prune(layer, ts, probe_sparsity)
        _, probe_acc = nn.evaluate(model, images, labels, batch_size=batch_size)
        _restore_layer(layer, snap)

        values = _layer_importance_values(layer, ts)
        t_two = float(np.nextafter(values.max(), np.inf))
        fractions = np.arange(grid_step, 1.0 - 1e-9, grid_step)
        for frac in fractions:
            _probe_prune(layer, ts, float(frac))
            _, acc = nn.evaluate(model, images, labels, batch_size=batch_size)
            _restore_layer(layer, snap)
            if baseline - acc >= loss_budget:
                t_two = threshold_for_sparsity(values, float(frac))
                break
        rows.append(SensitivityRow(layer=pos, probe_sparsity=probe_sparsity,
                                   baseline_top1=baseline, probe_top1=probe_acc,
                                   accuracy_loss=baseline - probe_acc,
                                   t_two_percent=t_two))
    return SensitivityTable(rows=rows)


def calibrate_thresholds(table: SensitivityTable, beta: float) -> dict[int, float]:
    """Per-layer thresholds t_i = beta * t_i(2% loss).

    beta = 0 is allowed and yields all-zero thresholds (prunes nothing).
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return {row.layer: beta * row.t_two_percent for row in table.rows}


def _apply_prune_iteration(model: nn.Model, it: PruneIteration,
                           overrides: dict[int, float], ts: TransformSet):
    for pos, (idx, layer) in enumerate(model.conv_layers()):
        if it.target_sparsity is not None:
            target = overrides.get(pos, it.target_sparsity)
            if isinstance(layer, nn.WinogradConv):
                prune_winograd_layer(layer, target)
            else:
                prune_spatial_layer(layer, ts.s, target)
        else:
            if pos not in it.thresholds:
                continue
            t = it.thresholds[pos]
            if isinstance(layer, nn.WinogradConv):
                new_mask = winograd_mask(layer.wlayer.q, layer.importance, t)
                layer.wlayer.mask = layer.wlayer.mask * new_mask
                layer.wlayer.apply_mask()
            else:
                new_mask = spatial_mask(layer.w, ts.s, t)
                layer.mask = new_mask if layer.mask is None else layer.mask * new_mask
                np.multiply(layer.w, layer.mask, out=layer.w)


def prune_pipeline(model: nn.Model, schedule: PruneSchedule, train_data, eval_data,
                   ts: TransformSet, spatial_cfg: nn.SgdConfig,
                   winograd_cfg: nn.SgdConfig, rng, batch_size: int = 64,
                   log_rows=None, zero_wall_clock=False):
    """Run the schedule: per iteration (prune -> retrain -> evaluate),
    converting to the Winograd domain at the phase boundary.

    Stops (restoring the last good state) when accuracy falls more than
    stop_delta below the dense baseline or retraining diverges.  Returns
    (model, history) where history holds one row per event.
    """
    if not schedule.iterations:
        return model, []
    train_images, train_labels = train_data
    eval_images, eval_labels = eval_data
    _, baseline = nn.evaluate(model, eval_images, eval_labels, batch_size=batch_size)
    history: list[HistoryRow] = []
    per_layer, overall = sparsity_summary(model, ts)
    history.append(HistoryRow(iteration=-1, phase="baseline", per_layer_sparsity=per_layer,
                              overall_sparsity=overall, top1=baseline, relative_top1=0.0))
    last_good = model.state_dict()
    optimizer = None
    for i, it in enumerate(schedule.iterations):
        if it.phase == "winograd" and any(isinstance(l, nn.SpatialConv)
                                          for _, l in model.conv_layers()):
            model = convert_to_winograd(model, ts)
            optimizer = None
            _, conv_acc = nn.evaluate(model, eval_images, eval_labels, batch_size=batch_size)
            per_layer, overall = sparsity_summary(model, ts)
            history.append(HistoryRow(iteration=i, phase="convert",
                                      per_layer_sparsity=per_layer,
                                      overall_sparsity=overall, top1=conv_acc,
                                      relative_top1=conv_acc - baseline))
            last_good = model.state_dict()

        _apply_prune_iteration(model, it, schedule.layer_overrides, ts)

        cfg = winograd_cfg if it.phase == "winograd" else spatial_cfg
        if optimizer is None or optimizer.cfg is not cfg:
            optimizer = nn.SGD(cfg)
        status = "ok"
        if it.retrain_epochs:
            try:
                nn.train_model(model, optimizer, train_images, train_labels,
                               epochs=it.retrain_epochs, batch_size=batch_size,
                               rng=rng, adjust=(it.phase == "winograd"),
                               log_rows=log_rows, epoch_offset=0,
                               zero_wall_clock=zero_wall_clock)
            except FloatingPointError:
                model.load_state_dict(last_good)
                per_layer, overall = sparsity_summary(model, ts)
                _, acc = nn.evaluate(model, eval_images, eval_labels, batch_size=batch_size)
                history.append(HistoryRow(iteration=i, phase=it.phase,
                                          per_layer_sparsity=per_layer,
                                          overall_sparsity=overall, top1=acc,
                                          relative_top1=acc - baseline,
                                          status="diverged"))
                break
        _, acc = nn.evaluate(model, eval_images, eval_labels, batch_size=batch_size)
        per_layer, overall = sparsity_summary(model, ts)
        if baseline - acc > schedule.stop_delta:
            history.append(HistoryRow(iteration=i, phase=it.phase,
                                      per_layer_sparsity=per_layer,
                                      overall_sparsity=overall, top1=acc,
                                      relative_top1=acc - baseline, status="stopped"))
            model.load_state_dict(last_good)
            break
        history.append(HistoryRow(iteration=i, phase=it.phase,
                                  per_layer_sparsity=per_layer,
                                  overall_sparsity=overall, top1=acc,
                                  relative_top1=acc - baseline))
        last_good = model.state_dict()
    return model, history
