"""Direct and Winograd convolution over batched NCHW feature maps.

Feature maps are plain float arrays [batch, channels, height, width].
The Winograd path disassembles the (zero-padded) input into overlapping
m x m tiles at stride m-n+1, works elementwise in the transformed domain,
accumulates over input channels there, and inverse-transforms once per
output tile.  Edge tiles are zero-padded to full size and the padded
output region is cropped away.

The sparse kernel consumes weights packed by tile position so that the
elementwise stage becomes a gather-multiply-accumulate over the stored
nonzeros; its multiply count is therefore exactly nnz * tiles * batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .transforms import TransformSet, WinogradInstance


@dataclass
class ConvCounters:
    """Arithmetic and wall-time accounting for one or more conv calls.

    Multiply counts are exact integers for the mathematical algorithm;
    the elementwise count of the sparse kernel is incremented by the size
    of the actually-computed product arrays.
    """

    elementwise_multiplies: int = 0
    transform_multiplies: int = 0
    input_transform_seconds: float = 0.0
    elementwise_seconds: float = 0.0
    output_transform_seconds: float = 0.0


@dataclass(frozen=True)
class TileGeometry:
    m: int
    n: int
    pad: int
    tiles_h: int
    tiles_w: int
    in_h: int
    in_w: int
    out_h: int
    out_w: int

    @property
    def tile_count(self) -> int:
        return self.tiles_h * self.tiles_w


@dataclass
class TileSet:
    """Disassembled input: tiles[batch, in_ch, tile_index, m, m]."""

    tiles: np.ndarray
    geom: TileGeometry


@dataclass
class WinogradConvLayer:
    """Winograd-domain weights q[out_ch, in_ch, m, m] with a binary mask.

    Outside an in-flight training step, q is kept exactly equal to
    q * mask (masked entries are 0.0).
    """

    q: np.ndarray
    mask: np.ndarray
    instance: WinogradInstance
    pad: int = 1

    def __post_init__(self):
        if self.q.shape != self.mask.shape:
            raise ValueError("q and mask shapes differ")
        if self.q.ndim != 4 or self.q.shape[2:] != (self.instance.m,) * 2:
            raise ValueError(f"q must be [out_ch, in_ch, {self.instance.m}, {self.instance.m}]")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.q = np.ascontiguousarray(self.q)
        self.mask = np.ascontiguousarray(self.mask)

    def apply_mask(self):
        np.multiply(self.q, self.mask, out=self.q)

    def check_masked(self):
        if np.any(self.q[self.mask == 0] != 0.0):
            raise ValueError("nonzero q entry under a zero mask")


@dataclass
class SparseWinogradWeights:
    """Nonzero q entries grouped by tile position (i, j).

    Per position: (out_ch, in_ch, value) triples sorted by (out_ch, in_ch),
    plus reduceat segment starts per distinct out_ch so the elementwise
    stage can accumulate gathered products per output channel.
    """

    shape: tuple[int, int, int, int]
    out_idx: list[np.ndarray]
    in_idx: list[np.ndarray]
    values: list[np.ndarray]
    seg_starts: list[np.ndarray]
    seg_out: list[np.ndarray]
    nnz: int

    def position(self, i: int, j: int) -> int:
        return i * self.shape[2] + j


def direct_conv2d(x: np.ndarray, w: np.ndarray, pad: int = 0) -> np.ndarray:
    """Valid cross-correlation of the zero-padded input with w.

    x: [batch, in_ch, h, w]; w: [out_ch, in_ch, n, n].  Reference path for
    the Winograd kernels and the compute path for spatial conv layers.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("x and w must be 4-D")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, w has {w.shape[1]}")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    n = w.shape[2]
    if w.shape[3] != n:
        raise ValueError("kernel must be square")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if xp.shape[2] < n or xp.shape[3] < n:
        raise ValueError("padded input smaller than kernel")
    windows = sliding_window_view(xp, (n, n), axis=(2, 3))
    return np.einsum("bchwuv,ocuv->bohw", windows, w, optimize=True)


def weights_to_winograd(w: np.ndarray, ts: TransformSet) -> np.ndarray:
    """Per-filter transform q[o,c] = G w[o,c] G^T."""
    n = ts.instance.n
    if w.ndim != 4 or w.shape[2:] != (n, n):
        raise ValueError(f"weights must be [out_ch, in_ch, {n}, {n}]")
    g = ts.g.astype(w.dtype)
    return np.einsum("iu,ocuv,jv->ocij", g, w, g, optimize=True)


def tile_input(x: np.ndarray, instance: WinogradInstance, pad: int = 0) -> TileSet:
    """Disassemble x into m x m tiles at stride m-n+1.

    The right/bottom remainder is zero-padded so every tile is full size;
    reassembling the corresponding output tiles reproduces the analytic
    output shape.
    """
    m, n, r = instance.m, instance.n, instance.out
    batch, chans, in_h, in_w = x.shape
    hp, wp = in_h + 2 * pad, in_w + 2 * pad
    if hp < n or wp < n:
        raise ValueError(f"padded input {hp}x{wp} smaller than kernel {n}")
    out_h, out_w = hp - n + 1, wp - n + 1
    th, tw = -(-out_h // r), -(-out_w // r)
    need_h, need_w = th * r + n - 1, tw * r + n - 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad + need_h - hp), (pad, pad + need_w - wp)))
    win = sliding_window_view(xp, (m, m), axis=(2, 3))[:, :, ::r, ::r]
    tiles = np.ascontiguousarray(win).reshape(batch, chans, th * tw, m, m)
    geom = TileGeometry(m=m, n=n, pad=pad, tiles_h=th, tiles_w=tw,
                        in_h=in_h, in_w=in_w, out_h=out_h, out_w=out_w)
    return TileSet(tiles=tiles, geom=geom)


def assemble_output(out_tiles: np.ndarray, geom: TileGeometry) -> np.ndarray:
    """Reassemble [batch, out_ch, T, r, r] output tiles and crop padding."""
    batch, out_ch = out_tiles.shape[:2]
    r = out_tiles.shape[3]
    th, tw = geom.tiles_h, geom.tiles_w
    y = out_tiles.reshape(batch, out_ch, th, tw, r, r)
    y = y.transpose(0, 1, 2, 4, 3, 5).reshape(batch, out_ch, th * r, tw * r)
    return np.ascontiguousarray(y[:, :, : geom.out_h, : geom.out_w])


def split_output_tiles(d_out: np.ndarray, geom: TileGeometry) -> np.ndarray:
    """Inverse of assemble_output: pad to the tile grid and split."""
    batch, out_ch = d_out.shape[:2]
    r = geom.m - geom.n + 1
    gh, gw = geom.tiles_h * r, geom.tiles_w * r
    dp = np.pad(d_out, ((0, 0), (0, 0), (0, gh - geom.out_h), (0, gw - geom.out_w)))
    dp = dp.reshape(batch, out_ch, geom.tiles_h, r, geom.tiles_w, r)
    dp = dp.transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dp.reshape(batch, out_ch, geom.tile_count, r, r))


def transform_tiles(tileset: TileSet, ts: TransformSet) -> np.ndarray:
    """U[b,c,T] = B^T I B for every input tile."""
    b = ts.b.astype(tileset.tiles.dtype)
    return np.einsum("si,bcTst,tj->bcTij", b, tileset.tiles, b, optimize=True)


def _count_transform_mults(geom: TileGeometry, batch, in_ch, out_ch,
                           include_weights: bool) -> int:
    m, n, r = geom.m, geom.n, geom.m - geom.n + 1
    mults = batch * in_ch * geom.tile_count * 2 * m**3
    mults += batch * out_ch * geom.tile_count * (r * m * m + r * r * m)
    if include_weights:
        mults += out_ch * in_ch * (m * n * n + m * m * n)
    return mults


def winograd_conv_layer(x: np.ndarray, layer: WinogradConvLayer, ts: TransformSet,
                        counters: ConvCounters | None = None) -> np.ndarray:
    """Dense Winograd convolution with channel accumulation in the
    transformed domain (one inverse transform per output tile)."""
    out_ch, in_ch = layer.q.shape[:2]
    if x.shape[1] != in_ch:
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, q has {in_ch}")
    tileset = tile_input(x, layer.instance, layer.pad)
    t0 = time.perf_counter()
    u = transform_tiles(tileset, ts)
    t1 = time.perf_counter()
    q = layer.q.astype(x.dtype, copy=False)
    mixed = np.einsum("ocij,bcTij->boTij", q, u, optimize=True)
    t2 = time.perf_counter()
    a = ts.a.astype(x.dtype)
    out_tiles = np.einsum("ix,boTij,jy->boTxy", a, mixed, a, optimize=True)
    y = assemble_output(out_tiles, tileset.geom)
    t3 = time.perf_counter()
    if counters is not None:
        batch = x.shape[0]
        counters.elementwise_multiplies += (
            batch * tileset.geom.tile_count * out_ch * in_ch * layer.instance.m**2
        )
        counters.transform_multiplies += _count_transform_mults(
            tileset.geom, batch, in_ch, out_ch, include_weights=False
        )
        counters.input_transform_seconds += t1 - t0
        counters.elementwise_seconds += t2 - t1
        counters.output_transform_seconds += t3 - t2
    return y


def pack_sparse(layer: WinogradConvLayer) -> SparseWinogradWeights:
    """Pack nonzero q entries grouped by tile position.

    Raises if q carries a nonzero value where the mask is zero.
    """
    layer.check_masked()
    out_ch, in_ch, m, _ = layer.q.shape
    out_idx, in_idx, values, seg_starts, seg_out = [], [], [], [], []
    nnz = 0
    for i in range(m):
        for j in range(m):
            o, c = np.nonzero(layer.mask[:, :, i, j])
            o = o.astype(np.int32)
            c = c.astype(np.int32)
            v = layer.q[o, c, i, j].copy()
            outs, starts = np.unique(o, return_index=True)
            out_idx.append(o)
            in_idx.append(c)
            values.append(v)
            seg_starts.append(starts.astype(np.int64))
            seg_out.append(outs.astype(np.int64))
            nnz += len(v)
    return SparseWinogradWeights(shape=layer.q.shape, out_idx=out_idx,
                                 in_idx=in_idx, values=values,
                                 seg_starts=seg_starts, seg_out=seg_out, nnz=nnz)


def unpack_sparse(sw: SparseWinogradWeights) -> np.ndarray:
    """Rebuild the dense q array; exact round-trip of pack_sparse."""
    out_ch, in_ch, m, _ = sw.shape
    q = np.zeros(sw.shape, dtype=sw.values[0].dtype if sw.values else np.float32)
    for i in range(m):
        for j in range(m):
            p = i * m + j
            q[sw.out_idx[p], sw.in_idx[p], i, j] = sw.values[p]
    return q


def sparse_winograd_conv_layer(x: np.ndarray, sw: SparseWinogradWeights,
                               ts: TransformSet, pad: int = 1,
                               counters: ConvCounters | None = None) -> np.ndarray:
    """Sparse Winograd convolution: gather-multiply-accumulate over the
    packed nonzeros at each tile position."""
    out_ch, in_ch, m, _ = sw.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, weights have {in_ch}")
    if m != ts.instance.m:
        raise ValueError("tile size mismatch between weights and transforms")
    tileset = tile_input(x, ts.instance, pad)
    batch, tiles = x.shape[0], tileset.geom.tile_count
    t0 = time.perf_counter()
    u = transform_tiles(tileset, ts)
    t1 = time.perf_counter()
    mixed = np.zeros((batch, out_ch, tiles, m, m), dtype=x.dtype)
    mults = 0
    for i in range(m):
        for j in range(m):
            p = i * m + j
            vals = sw.values[p]
            if len(vals) == 0:
                continue
            u_pos = u[..., i, j]
            gathered = u_pos[:, sw.in_idx[p], :]
            contrib = gathered * vals.astype(x.dtype)[None, :, None]
            mults += contrib.size
            segments = np.add.reduceat(contrib, sw.seg_starts[p], axis=1)
            mixed_pos = mixed[..., i, j]
            mixed_pos[:, sw.seg_out[p], :] += segments
    t2 = time.perf_counter()
    a = ts.a.astype(x.dtype)
    out_tiles = np.einsum("ix,boTij,jy->boTxy", a, mixed, a, optimize=True)
    y = assemble_output(out_tiles, tileset.geom)
    t3 = time.perf_counter()
    if counters is not None:
        counters.elementwise_multiplies += mults
        counters.transform_multiplies += _count_transform_mults(
            tileset.geom, batch, in_ch, out_ch, include_weights=False
        )
        counters.input_transform_seconds += t1 - t0
        counters.elementwise_seconds += t2 - t1
        counters.output_transform_seconds += t3 - t2
    return y


def winograd_weight_grad(d_out: np.ndarray, tileset: TileSet, ts: TransformSet,
                         u: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the loss w.r.t. q given the output gradient and the
    forward tiles: dq[o,c] = sum_tiles (A dO_tile A^T) . (B^T I_tile B).

    Pass u to reuse already-transformed input tiles from the forward pass.
    """
    geom = tileset.geom
    if d_out.shape[2:] != (geom.out_h, geom.out_w):
        raise ValueError("output gradient shape does not match tiling geometry")
    if d_out.shape[0] != tileset.tiles.shape[0]:
        raise ValueError("batch mismatch between output gradient and tiles")
    d_tiles = split_output_tiles(d_out, geom)
    a = ts.a.astype(d_out.dtype)
    d_mixed = np.einsum("ix,boTxy,jy->boTij", a, d_tiles, a, optimize=True)
    if u is None:
        u = transform_tiles(tileset, ts)
    return np.einsum("boTij,bcTij->ocij", d_mixed, u, optimize=True)


def winograd_input_grad(d_out: np.ndarray, layer: WinogradConvLayer,
                        ts: TransformSet) -> np.ndarray:
    """Gradient of the loss w.r.t. the layer input (chain rule through the
    tile transforms, overlap-added across overlapping tiles)."""
    out_ch, in_ch, m, _ = layer.q.shape
    if d_out.shape[1] != out_ch:
        raise ValueError(f"channel mismatch: grad has {d_out.shape[1]}, q has {out_ch}")
    n, r, pad = layer.instance.n, layer.instance.out, layer.pad
    out_h, out_w = d_out.shape[2:]
    in_h, in_w = out_h - 2 * pad + n - 1, out_w - 2 * pad + n - 1
    th, tw = -(-out_h // r), -(-out_w // r)
    geom = TileGeometry(m=m, n=n, pad=pad, tiles_h=th, tiles_w=tw,
                        in_h=in_h, in_w=in_w, out_h=out_h, out_w=out_w)
    d_tiles = split_output_tiles(d_out, geom)
    a = ts.a.astype(d_out.dtype)
    b = ts.b.astype(d_out.dtype)
    q = layer.q.astype(d_out.dtype, copy=False)
    d_mixed = np.einsum("ix,boTxy,jy->boTij", a, d_tiles, a, optimize=True)
    d_u = np.einsum("boTij,ocij->bcTij", d_mixed, q, optimize=True)
    d_in_tiles = np.einsum("si,bcTij,tj->bcTst", b, d_u, b, optimize=True)
    batch = d_out.shape[0]
    need_h, need_w = th * r + n - 1, tw * r + n - 1
    dxp = np.zeros((batch, in_ch, need_h, need_w), dtype=d_out.dtype)
    for ti in range(th):
        for tj in range(tw):
            dxp[:, :, ti * r: ti * r + m, tj * r: tj * r + m] += \
                d_in_tiles[:, :, ti * tw + tj]
    return np.ascontiguousarray(dxp[:, :, pad: pad + in_h, pad: pad + in_w])


def elementwise_multiply_ratio(instance: WinogradInstance) -> Fraction:
    """Dense Winograd vs direct elementwise multiplies per tile:
    m^2 / ((m-n+1)^2 n^2), returned as an exact Fraction."""
    m, n, r = instance.m, instance.n, instance.out
    return Fraction(m * m, r * r * n * n)
