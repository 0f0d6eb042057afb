"""Minimal CPU training engine.

Layers keep float32 parameters, cache what their backward pass needs when
run in training mode, and expose params/masks/buffers dicts so the
optimizer, pruning driver and checkpoint format can treat them uniformly.
The SGD step optionally divides Winograd-domain weight gradients
elementwise by F^alpha before the momentum update, then re-applies all
masks so pruned entries stay exactly zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import conv as conv_ops
from .transforms import ImportanceMatrix, TransformSet


@dataclass
class SgdConfig:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    adjust_alpha: float = 1.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


class Layer:
    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def masks(self) -> dict[str, np.ndarray | None]:
        return {name: None for name in self.params()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, d_out):
        raise NotImplementedError

    def apply_masks(self):
        for name, mask in self.masks().items():
            if mask is not None:
                arr = self.params()[name]
                np.multiply(arr, mask, out=arr)

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without forward state")
        return self._cache


class SpatialConv(Layer):
    """3x3-style convolution over NCHW maps, weights [out_ch, in_ch, n, n]."""

    def __init__(self, in_ch, out_ch, ksize=3, pad=1, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (in_ch * ksize * ksize))
        self.w = (rng.normal(0.0, std, (out_ch, in_ch, ksize, ksize))
                  .astype(np.float32))
        self.mask: np.ndarray | None = None
        self.pad = pad

    def params(self):
        return {"w": self.w}

    def masks(self):
        return {"w": self.mask}

    def forward(self, x, training=False):
        y = conv_ops.direct_conv2d(x, self.w, self.pad)
        if training:
            self._cache = x
        return y

    def backward(self, d_out):
        x = self._need_cache()
        n = self.w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (self.pad,) * 2, (self.pad,) * 2))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (n, n), axis=(2, 3))
        self.grads["w"] = np.einsum("bchwuv,bohw->ocuv", windows, d_out,
                                    optimize=True).astype(np.float32)
        w_t = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dxp = conv_ops.direct_conv2d(
            np.pad(d_out, ((0, 0), (0, 0), (n - 1,) * 2, (n - 1,) * 2)), w_t, 0)
        h, w = x.shape[2], x.shape[3]
        dx = dxp[:, :, self.pad: self.pad + h, self.pad: self.pad + w]
        self._cache = None
        return np.ascontiguousarray(dx)


class WinogradConv(Layer):
    """Convolution computed in the Winograd domain; wraps a
    WinogradConvLayer whose q/mask are the trainable state."""

    def __init__(self, wlayer: conv_ops.WinogradConvLayer, ts: TransformSet):
        super().__init__()
        self.wlayer = wlayer
        self.ts = ts
        self.importance: ImportanceMatrix = ts.f

    @property
    def q(self):
        return self.wlayer.q

    def params(self):
        return {"q": self.wlayer.q}

    def masks(self):
        return {"q": self.wlayer.mask}

    def forward(self, x, training=False):
        tileset = conv_ops.tile_input(x, self.wlayer.instance, self.wlayer.pad)
        u = conv_ops.transform_tiles(tileset, self.ts)
        q = self.wlayer.q.astype(x.dtype, copy=False)
        mixed = np.einsum("ocij,bcTij->boTij", q, u, optimize=True)
        a = self.ts.a.astype(x.dtype)
        out_tiles = np.einsum("ix,boTij,jy->boTxy", a, mixed, a, optimize=True)
        y = conv_ops.assemble_output(out_tiles, tileset.geom)
        if training:
            self._cache = (tileset, u)
        return y

    def backward(self, d_out):
        tileset, u = self._need_cache()
        self.grads["q"] = conv_ops.winograd_weight_grad(
            d_out, tileset, self.ts, u=u).astype(np.float32)
        dx = conv_ops.winograd_input_grad(d_out, self.wlayer, self.ts)
        self._cache = None
        return dx


class ReLU(Layer):
    def forward(self, x, training=False):
        if training:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, d_out):
        alive = self._need_cache()
        self._cache = None
        return d_out * alive


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties route to the first window element."""

    def forward(self, x, training=False):
        batch, ch, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"MaxPool2 needs even spatial dims, got {h}x{w}")
        win = x.reshape(batch, ch, h // 2, 2, w // 2, 2)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, h // 2, w // 2, 4)
        idx = np.argmax(win, axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if training:
            self._cache = (idx, x.shape)
        return y

    def backward(self, d_out):
        idx, shape = self._need_cache()
        batch, ch, h, w = shape
        dwin = np.zeros((batch, ch, h // 2, w // 2, 4), dtype=d_out.dtype)
        np.put_along_axis(dwin, idx[..., None], d_out[..., None], axis=-1)
        dx = dwin.reshape(batch, ch, h // 2, w // 2, 2, 2)
        dx = dx.transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        self._cache = None
        return np.ascontiguousarray(dx)


class BatchNorm(Layer):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False):
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean[:] = (self.momentum * self.running_mean
                                    + (1 - self.momentum) * mean)
            self.running_var[:] = (self.momentum * self.running_var
                                   + (1 - self.momentum) * var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        if training:
            self._cache = (xhat, inv_std)
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, d_out):
        xhat, inv_std = self._need_cache()
        count = d_out.shape[0] * d_out.shape[2] * d_out.shape[3]
        self.grads["gamma"] = np.einsum("bchw,bchw->c", d_out, xhat).astype(np.float32)
        self.grads["beta"] = d_out.sum(axis=(0, 2, 3)).astype(np.float32)
        g = self.gamma[None, :, None, None] * inv_std[None, :, None, None]
        sum_dy = d_out.sum(axis=(0, 2, 3), keepdims=False)[None, :, None, None]
        sum_dy_xhat = np.einsum("bchw,bchw->c", d_out, xhat)[None, :, None, None]
        dx = g * (d_out - sum_dy / count - xhat * sum_dy_xhat / count)
        self._cache = None
        return dx


class Flatten(Layer):
    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, d_out):
        shape = self._need_cache()
        self._cache = None
        return d_out.reshape(shape)


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng=None, scale=1.0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = scale * np.sqrt(1.0 / in_dim)
        self.w = rng.normal(0.0, std, (in_dim, out_dim)).astype(np.float32)
        self.b = np.zeros(out_dim, dtype=np.float32)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, training=False):
        if training:
            self._cache = x
        return x @ self.w + self.b

    def backward(self, d_out):
        x = self._need_cache()
        self.grads["w"] = (x.T @ d_out).astype(np.float32)
        self.grads["b"] = d_out.sum(axis=0).astype(np.float32)
        self._cache = None
        return d_out @ self.w.T


class SoftmaxCrossEntropy(Layer):
    """Loss layer: mean cross-entropy over the batch from raw logits."""

    def forward(self, logits, labels=None, training=False):
        z = logits - logits.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
        log_probs = z - logsumexp
        probs = np.exp(log_probs)
        loss = None
        if labels is not None:
            loss = float(-log_probs[np.arange(len(labels)), labels].mean())
            if training:
                self._cache = (probs, labels)
        return loss, probs

    def backward(self, d_loss=1.0):
        probs, labels = self._need_cache()
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        self._cache = None
        return d_loss * d / len(labels)


class Model:
    """Ordered layer list ending in exactly one loss layer."""

    def __init__(self, layers):
        if not layers or not isinstance(layers[-1], SoftmaxCrossEntropy):
            raise ValueError("model must end with a SoftmaxCrossEntropy loss layer")
        if any(isinstance(l, SoftmaxCrossEntropy) for l in layers[:-1]):
            raise ValueError("loss layer allowed only at the end")
        self.layers = list(layers)
        self._ready = False

    def forward(self, x, labels=None, training=False):
        """Run the batch through the network; returns (loss, probabilities).

        loss is None when labels are not given.  Compute precision follows
        the batch dtype (float32 in training; float64 batches give
        oracle-grade evaluation for gradient checks).
        """
        h = x
        for layer in self.layers[:-1]:
            h = layer.forward(h, training=training)
        loss, probs = self.layers[-1].forward(h, labels=labels, training=training)
        self._ready = training and labels is not None
        return loss, probs

    def backward(self):
        """Populate every layer's grads; requires a training-mode forward."""
        if not self._ready:
            raise RuntimeError("backward called without a training-mode forward")
        d = self.layers[-1].backward()
        for layer in reversed(self.layers[:-1]):
            d = layer.backward(d)
        self._ready = False
        return d

    def conv_layers(self):
        return [(i, l) for i, l in enumerate(self.layers)
                if isinstance(l, (SpatialConv, WinogradConv))]

    def state_dict(self):
        state = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                state[f"layer{i}.{name}"] = arr.copy()
            for name, mask in layer.masks().items():
                if mask is not None:
                    state[f"layer{i}.mask.{name}"] = mask.copy()
            for name, arr in layer.buffers().items():
                state[f"layer{i}.{name}"] = arr.copy()
        return state

    def load_state_dict(self, state):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                arr[...] = state[f"layer{i}.{name}"]
            for name, mask in layer.masks().items():
                key = f"layer{i}.mask.{name}"
                if key in state:
                    if mask is None:
                        self._set_mask(layer, name, state[key].copy())
                    else:
                        mask[...] = state[key]
            for name, arr in layer.buffers().items():
                arr[...] = state[f"layer{i}.{name}"]

    @staticmethod
    def _set_mask(layer, name, mask):
        if isinstance(layer, SpatialConv) and name == "w":
            layer.mask = mask
        elif isinstance(layer, WinogradConv) and name == "q":
            layer.wlayer.mask = mask
        else:
            raise KeyError(f"layer has no mask slot for {name}")


class SGD:
    """SGD with momentum, weight decay, optional F^alpha gradient
    adjustment for Winograd layers, and post-step mask re-application.

    The adjustment divides the raw (decayed) gradient first; momentum then
    acts on the adjusted gradient, so at momentum 0 the update is exactly
    q <- q - lr * (dq / F^alpha)."""

    def __init__(self, cfg: SgdConfig):
        self.cfg = cfg
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, model: Model, adjust: bool = False):
        cfg = self.cfg
        for i, layer in enumerate(model.layers):
            for name, p in layer.params().items():
                g = layer.grads.get(name)
                if g is None:
                    raise RuntimeError(f"missing gradient for layer{i}.{name}")
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p
                if adjust and isinstance(layer, WinogradConv) and name == "q":
                    f = layer.importance.f.astype(np.float32)
                    g = g / f**np.float32(cfg.adjust_alpha)
                if cfg.momentum:
                    v = self.velocity.get((i, name))
                    if v is None:
                        v = np.zeros_like(p)
                        self.velocity[(i, name)] = v
                    v *= cfg.momentum
                    v += g
                    g = v
                p -= np.float32(cfg.learning_rate) * g
            layer.apply_masks()


def build_model(topology: str, in_shape=(3, 32, 32), rng=None) -> Model:
    """Build a model from a compact comma-separated topology string.

    Tokens: conv:C (3x3, pad 1), bn, relu, pool, flatten, dense:K.
    A softmax cross-entropy loss layer is appended; the final dense layer
    is initialized at 0.1x fan-in scale so an untrained classifier starts
    near the uniform-prediction loss.
    """
    rng = rng or np.random.default_rng(0)
    tokens = [t.strip() for t in topology.split(",") if t.strip()]
    if not tokens:
        raise ValueError("empty topology")
    last_dense = max((k for k, t in enumerate(tokens) if t.startswith("dense:")),
                     default=None)
    ch, h, w = in_shape
    flat = None
    layers: list[Layer] = []
    for k, tok in enumerate(tokens):
        if tok in ("bn", "pool") or tok.startswith("conv:"):
            if flat is not None:
                raise ValueError(f"{tok!r} cannot follow flatten")
        if tok.startswith("conv:"):
            out_ch = int(tok.split(":")[1])
            layers.append(SpatialConv(ch, out_ch, ksize=3, pad=1, rng=rng))
            ch = out_ch
        elif tok == "bn":
            layers.append(BatchNorm(ch))
        elif tok == "relu":
            layers.append(ReLU())
        elif tok == "pool":
            if h % 2 or w % 2:
                raise ValueError(f"pool needs even spatial dims, got {h}x{w}")
            layers.append(MaxPool2())
            h, w = h // 2, w // 2
        elif tok == "flatten":
            layers.append(Flatten())
            flat = ch * h * w
        elif tok.startswith("dense:"):
            if flat is None:
                raise ValueError("dense requires a preceding flatten")
            out_dim = int(tok.split(":")[1])
            scale = 0.1 if k == last_dense else 1.0
            layers.append(Dense(flat, out_dim, rng=rng, scale=scale))
            flat = out_dim
        else:
            raise ValueError(f"unknown topology token: {tok!r}")
    layers.append(SoftmaxCrossEntropy())
    return Model(layers)


def evaluate(model: Model, images, labels, batch_size=256):
    """Mean loss and top-1 accuracy over a dataset in inference mode."""
    total, correct, loss_sum = 0, 0, 0.0
    for start in range(0, len(images), batch_size):
        xb = images[start: start + batch_size]
        yb = labels[start: start + batch_size]
        loss, probs = model.forward(xb, yb, training=False)
        loss_sum += loss * len(yb)
        correct += int((probs.argmax(axis=1) == yb).sum())
        total += len(yb)
    return loss_sum / total, correct / total


def train_model(model: Model, optimizer: SGD, images, labels, epochs,
                batch_size, rng, eval_data=None, augment_fn=None,
                adjust=False, log_rows=None, epoch_offset=0,
                zero_wall_clock=False):
    """Epoch loop; returns the last (loss, accuracy) on the eval split.

    Appends one CSV-ready row per epoch and split to log_rows:
    (epoch, split, loss, top1, learning_rate, wall_seconds).
    Raises FloatingPointError when the training loss goes non-finite.
    """
    last_eval = None
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(images))
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start: start + batch_size]
            xb, yb = images[idx], labels[idx]
            if augment_fn is not None:
                xb = augment_fn(xb, rng)
            loss, probs = model.forward(xb, yb, training=True)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss {loss}")
            model.backward()
            optimizer.step(model, adjust=adjust)
            loss_sum += loss * len(yb)
            correct += int((probs.argmax(axis=1) == yb).sum())
            seen += len(yb)
        wall = 0.0 if zero_wall_clock else time.perf_counter() - t0
        lr = optimizer.cfg.learning_rate
        if log_rows is not None:
            log_rows.append((epoch_offset + epoch, "train", loss_sum / seen,
                             correct / seen, lr, wall))
        if eval_data is not None:
            ev_loss, ev_acc = evaluate(model, *eval_data, batch_size=batch_size)
            last_eval = (ev_loss, ev_acc)
            if log_rows is not None:
                wall_ev = 0.0 if zero_wall_clock else time.perf_counter() - t0
                log_rows.append((epoch_offset + epoch, "eval", ev_loss, ev_acc,
                                 lr, wall_ev))
    return last_eval
