"""Bit-exact single-file persistence of models, masks and pruning state.

Layout (integers little-endian):

    magic   4 bytes  b"SWPK"
    version u32
    count   u32                      number of tensor records
    record, repeated `count` times:
        name_len u32, name UTF-8
        domain   u8                  0 spatial, 1 winograd, 2 mask, 3 other
        rank     u8
        dims     rank * u32
        payload  prod(dims) * float32 (little-endian)
    meta_len u32, metadata UTF-8 JSON (topology, tile instance, conv layer
        domains, schedule position, RNG state)

Saves write to a temp file and rename into place.  load(save(x)) is
bit-exact, including masks and domain flags; files with unknown magic or
a newer version are rejected.
"""

from __future__ import annotations

import json
import os
import struct
from fractions import Fraction

import numpy as np

from . import nn
from .conv import WinogradConvLayer
from .transforms import TransformSet, WinogradInstance, generate_transforms

MAGIC = b"SWPK"
VERSION = 1

FLAG_SPATIAL = 0
FLAG_WINOGRAD = 1
FLAG_MASK = 2
FLAG_OTHER = 3


class CheckpointError(ValueError):
    pass


def _tensor_records(model: nn.Model):
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params().items():
            if isinstance(layer, nn.WinogradConv) and name == "q":
                flag = FLAG_WINOGRAD
            else:
                flag = FLAG_SPATIAL
            yield f"layer{i}.{name}", flag, arr
        for name, mask in layer.masks().items():
            if mask is not None:
                yield f"layer{i}.mask.{name}", FLAG_MASK, mask
        for name, arr in layer.buffers().items():
            yield f"layer{i}.{name}", FLAG_OTHER, arr


def make_metadata(topology: str, in_shape, instance: WinogradInstance,
                  conv_domains, schedule_position: int = 0, rng=None,
                  extra: dict | None = None) -> dict:
    meta = {
        "topology": topology,
        "in_shape": list(in_shape),
        "instance": {"m": instance.m, "n": instance.n,
                     "points": [str(p) for p in instance.points]},
        "conv_domains": list(conv_domains),
        "schedule_position": schedule_position,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    if extra:
        meta["extra"] = extra
    return meta


def save(model: nn.Model, path: str, metadata: dict):
    records = list(_tensor_records(model))
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(records))
    for name, flag, arr in records:
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", flag, arr32.ndim)
        blob += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
        blob += arr32.tobytes()
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated (needed {self.off + count} bytes, "
                f"have {len(self.buf)})")
        out = self.buf[self.off: self.off + count]
        self.off += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_raw(path: str):
    """Parse tensors and metadata without rebuilding a model."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version > VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than "
                              f"supported {VERSION}")
    count = r.u32()
    tensors = {}
    flags = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        flag = r.u8()
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)))
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        flags[name] = flag
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.off} trailing bytes")
    return tensors, flags, meta


def instance_from_metadata(meta: dict) -> WinogradInstance:
    inst = meta["instance"]
    return WinogradInstance(m=inst["m"], n=inst["n"],
                            points=tuple(Fraction(p) for p in inst["points"]))


def _rebuild_model(meta: dict, ts: TransformSet) -> nn.Model:
    model = nn.build_model(meta["topology"], in_shape=tuple(meta["in_shape"]),
                           rng=np.random.default_rng(0))
    domains = meta["conv_domains"]
    conv = model.conv_layers()
    if len(conv) != len(domains):
        raise CheckpointError(
            f"metadata lists {len(domains)} conv layers, model has {len(conv)}")
    for (idx, layer), domain in zip(conv, domains):
        if domain == "winograd":
            out_ch, in_ch = layer.w.shape[:2]
            m = ts.instance.m
            wlayer = WinogradConvLayer(
                q=np.zeros((out_ch, in_ch, m, m), np.float32),
                mask=np.ones((out_ch, in_ch, m, m), np.float32),
                instance=ts.instance, pad=layer.pad)
            model.layers[idx] = nn.WinogradConv(wlayer, ts)
        elif domain != "spatial":
            raise CheckpointError(f"unknown conv domain {domain!r}")
    return model


def load(path: str):
    """Rebuild (model, metadata) from a checkpoint file."""
    tensors, flags, meta = read_raw(path)
    ts = generate_transforms(instance_from_metadata(meta))
    model = _rebuild_model(meta, ts)
    expected = {name: (flag, arr.shape)
                for name, flag, arr in _tensor_records_with_masks(model, tensors)}
    for name, arr in tensors.items():
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        flag, shape = expected[name]
        if flags[name] != flag:
            raise CheckpointError(
                f"{path}: tensor {name!r} has domain flag {flags[name]}, "
                f"expected {flag} for this topology")
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {shape}")
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    state = dict(tensors)
    model.load_state_dict(state)
    return model, meta


def _tensor_records_with_masks(model: nn.Model, tensors: dict):
    """Expected records for this model, materializing mask slots that the
    file provides but a freshly built model leaves unset."""
    for i, layer in enumerate(model.layers):
        if isinstance(layer, nn.SpatialConv) and layer.mask is None:
            key = f"layer{i}.mask.w"
            if key in tensors:
                layer.mask = np.ones_like(layer.w)
    return list(_tensor_records(model))


def conv_domains(model: nn.Model):
    return ["winograd" if isinstance(l, nn.WinogradConv) else "spatial"
            for _, l in model.conv_layers()]
