"""Small layer-wise reverse-mode engine.

Networks are described by a :class:`NetSpec` (an ordered list of layers) and
hold their trainable parameters in a :class:`NetState`. ``forward`` returns the
output together with a :class:`Tape` of per-layer caches; ``backward`` walks
the tape in reverse and returns parameter gradients plus the input gradient.

Tensors are numpy arrays with a leading batch axis: ``(N, features)`` for
dense layers and ``(N, C, H, W)`` for convolutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


# ---------------------------------------------------------------------------
# functional primitives (also used by linops)
# ---------------------------------------------------------------------------

def pad2d(x, lo, hi, mode="zeros"):
    """Pad the two trailing axes by ``lo`` before and ``hi`` after."""
    if lo == 0 and hi == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(lo, hi), (lo, hi)]
    if mode == "zeros":
        return np.pad(x, width)
    if mode == "circular":
        return np.pad(x, width, mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}")


def pad2d_adjoint(g, lo, hi, mode, shape):
    """Adjoint of :func:`pad2d`: fold a padded gradient back onto ``shape``."""
    if lo == 0 and hi == 0:
        return g
    H, W = shape[-2:]
    if mode == "zeros":
        return g[..., lo:lo + H, lo:lo + W]
    if lo > H or hi > H or lo > W or hi > W:
        raise ValueError("circular padding wider than the image")
    # circular: fold each wrapped border back onto its source rows/columns
    rows = g[..., lo:lo + H, :].copy()
    if lo:
        rows[..., H - lo:, :] += g[..., :lo, :]
    if hi:
        rows[..., :hi, :] += g[..., lo + H:, :]
    out = rows[..., lo:lo + W].copy()
    if lo:
        out[..., W - lo:] += rows[..., :lo]
    if hi:
        out[..., :hi] += rows[..., lo + W:]
    return out


def conv2d(x, w, stride=1, pad=(0, 0), mode="zeros"):
    """Cross-correlate ``x`` (N,C,H,W) with ``w`` (O,C,k,k)."""
    lo, hi = pad
    xp = pad2d(x, lo, hi, mode)
    k = w.shape[-1]
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], ho, wo, w.shape[0]), dtype=np.result_type(x, w))
    for a in range(k):
        for b in range(k):
            patch = xp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
            out += np.tensordot(patch, w[:, :, a, b], axes=([1], [1]))
    return out.transpose(0, 3, 1, 2)


def conv2d_backward(g, x, w, stride=1, pad=(0, 0), mode="zeros", need_input=True):
    """Gradients of :func:`conv2d` w.r.t. ``w`` and (optionally) ``x``."""
    lo, hi = pad
    xp = pad2d(x, lo, hi, mode)
    k = w.shape[-1]
    ho, wo = g.shape[2:]
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_input else None
    for a in range(k):
        for b in range(k):
            sl = (slice(None), slice(None),
                  slice(a, a + stride * (ho - 1) + 1, stride),
                  slice(b, b + stride * (wo - 1) + 1, stride))
            dw[:, :, a, b] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            if need_input:
                dxp[sl] += np.tensordot(g, w[:, :, a, b], axes=([1], [0])).transpose(0, 3, 1, 2)
    dx = pad2d_adjoint(dxp, lo, hi, mode, x.shape) if need_input else None
    return dw, dx


def pixel_shuffle(x, r):
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r); channel ``c*r*r + i*r + j`` lands at offset (i, j)."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"pixel_shuffle({r}) needs channels divisible by {r * r}, got {c}")
    out = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return out.reshape(n, c // (r * r), h * r, w * r)


def pixel_unshuffle(x, r):
    """Inverse (and adjoint) of :func:`pixel_shuffle`."""
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return out.reshape(n, c * r * r, h // r, w // r)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# layer descriptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    """Fully connected; inputs with more than one axis are flattened."""
    n_in: int
    n_out: int


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    padding: str = "zeros"
    bias: bool = True


@dataclass(frozen=True)
class PixelShuffle:
    r: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class BatchNorm:
    ch: int
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass(frozen=True)
class Skip:
    """Add the output of an earlier layer (``-1`` is the network input)."""
    source: int


LAYER_TYPES = {cls.__name__.lower(): cls for cls in (Dense, Conv2d, PixelShuffle, ReLU, Sigmoid, BatchNorm, Skip)}


def _out_shape(layer, shape, shapes, i):
    if isinstance(layer, Dense):
        if math.prod(shape) != layer.n_in:
            raise ValueError(f"layer {i}: dense expects {layer.n_in} features, got {shape}")
        return (layer.n_out,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ValueError(f"layer {i}: conv2d expects ({layer.in_ch}, H, W), got {shape}")
        p = layer.k // 2
        h = (shape[1] + 2 * p - layer.k) // layer.stride + 1
        w = (shape[2] + 2 * p - layer.k) // layer.stride + 1
        return (layer.out_ch, h, w)
    if isinstance(layer, PixelShuffle):
        if layer.r < 1:
            raise ValueError(f"layer {i}: pixel_shuffle factor must be >= 1")
        if len(shape) != 3 or shape[0] % (layer.r ** 2):
            raise ValueError(f"layer {i}: pixel_shuffle({layer.r}) incompatible with {shape}")
        return (shape[0] // layer.r ** 2, shape[1] * layer.r, shape[2] * layer.r)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.ch:
            raise ValueError(f"layer {i}: batch_norm({layer.ch}) got {shape}")
        return shape
    if isinstance(layer, Skip):
        if not -1 <= layer.source < i:
            raise ValueError(f"layer {i}: skip source {layer.source} must precede the layer")
        if shapes[layer.source + 1] != shape:
            raise ValueError(f"layer {i}: skip from {layer.source} has shape {shapes[layer.source + 1]}, expected {shape}")
        return shape
    return shape


@dataclass
class NetSpec:
    """Architecture plus init seed. ``input_shape`` excludes the batch axis."""
    input_shape: tuple
    layers: tuple
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = tuple(self.layers)
        self.shapes()

    def shapes(self):
        """Per-sample activation shapes; ``shapes()[0]`` is the input."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(_out_shape(layer, shapes[-1], shapes, i))
        return shapes

    @property
    def output_shape(self):
        return self.shapes()[-1]

    def to_dict(self):
        layers = []
        for layer in self.layers:
            d = {"type": type(layer).__name__.lower()}
            d.update(layer.__dict__)
            layers.append(d)
        return {"input_shape": list(self.input_shape), "layers": layers, "seed": self.seed, "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d):
        layers = []
        for item in d["layers"]:
            item = dict(item)
            layers.append(LAYER_TYPES[item.pop("type")](**item))
        return cls(tuple(d["input_shape"]), tuple(layers), d.get("seed", 0), d.get("dtype", "float64"))


def mlp(sizes, seed=0, out_act=None, dtype="float64"):
    """Fully connected ReLU net, e.g. ``mlp([1, 64, 64, 2])``."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    if out_act == "sigmoid":
        layers.append(Sigmoid())
    return NetSpec((sizes[0],), tuple(layers), seed, dtype)


# ---------------------------------------------------------------------------
# state, init, forward/backward
# ---------------------------------------------------------------------------

@dataclass
class NetState:
    params: list
    buffers: list
    opt: dict = field(default_factory=dict)
    step: int = 0
    version: int = 0

    def copy(self):
        return NetState(
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            [{k: v.copy() for k, v in b.items()} for b in self.buffers],
            {k: v.copy() for k, v in self.opt.items()},
            self.step,
            self.version,
        )

    def arrays(self):
        for i, p in enumerate(self.params):
            for name in sorted(p):
                yield (i, name), p[name]


def _followed_by_relu(layers, i):
    for layer in layers[i + 1:]:
        if isinstance(layer, (BatchNorm, Skip)):
            continue
        return isinstance(layer, ReLU)
    return False


def init_state(spec: NetSpec) -> NetState:
    """He-uniform weights ahead of a ReLU, Xavier-uniform elsewhere; zero biases."""
    rng = np.random.default_rng(spec.seed)
    dt = np.dtype(spec.dtype)
    params, buffers = [], []
    for i, layer in enumerate(spec.layers):
        p, b = {}, {}
        if isinstance(layer, (Dense, Conv2d)):
            if isinstance(layer, Dense):
                shape = (layer.n_out, layer.n_in)
                fan_in, fan_out = layer.n_in, layer.n_out
            else:
                shape = (layer.out_ch, layer.in_ch, layer.k, layer.k)
                fan_in, fan_out = layer.in_ch * layer.k ** 2, layer.out_ch * layer.k ** 2
            if _followed_by_relu(spec.layers, i):
                limit = math.sqrt(6.0 / fan_in)
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
            p["w"] = rng.uniform(-limit, limit, size=shape).astype(dt)
            if isinstance(layer, Dense) or layer.bias:
                p["b"] = np.zeros(shape[0], dtype=dt)
        elif isinstance(layer, BatchNorm):
            p["gamma"] = np.ones(layer.ch, dtype=dt)
            p["beta"] = np.zeros(layer.ch, dtype=dt)
            b["mean"] = np.zeros(layer.ch, dtype=dt)
            b["var"] = np.ones(layer.ch, dtype=dt)
        params.append(p)
        buffers.append(b)
    return NetState(params, buffers)


@dataclass
class Tape:
    spec: NetSpec
    state: NetState
    version: int
    mode: str
    input_shape: tuple
    caches: list


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v if x.ndim == 2 else v[None, :, None, None]


def forward(spec: NetSpec, state: NetState, x, mode="train"):
    """Run the network; returns ``(output, tape)``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=spec.dtype)
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    outputs = [x]
    caches = []
    h = x
    for i, layer in enumerate(spec.layers):
        p = state.params[i]
        cache = None
        if isinstance(layer, Dense):
            cache = (h.reshape(len(h), -1), h.shape)
            h = cache[0] @ p["w"].T + p["b"]
        elif isinstance(layer, Conv2d):
            cache = h
            pad = layer.k // 2
            h = conv2d(h, p["w"], layer.stride, (pad, pad), layer.padding)
            if "b" in p:
                h = h + p["b"][None, :, None, None]
        elif isinstance(layer, PixelShuffle):
            h = pixel_shuffle(h, layer.r)
        elif isinstance(layer, ReLU):
            cache = h > 0
            h = h * cache
        elif isinstance(layer, Sigmoid):
            h = sigmoid(h)
            cache = h
        elif isinstance(layer, BatchNorm):
            axes = _bn_axes(h)
            buf = state.buffers[i]
            if mode == "train":
                mean = h.mean(axis=axes)
                var = h.var(axis=axes)
                buf["mean"] = (1 - layer.momentum) * buf["mean"] + layer.momentum * mean
                buf["var"] = (1 - layer.momentum) * buf["var"] + layer.momentum * var
            else:
                mean, var = buf["mean"], buf["var"]
            inv = 1.0 / np.sqrt(var + layer.eps)
            xhat = (h - _bn_view(mean, h)) * _bn_view(inv, h)
            cache = (xhat, inv, mode)
            h = xhat * _bn_view(p["gamma"], h) + _bn_view(p["beta"], h)
        elif isinstance(layer, Skip):
            h = h + outputs[layer.source + 1]
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activation at layer {i} ({type(layer).__name__})")
        caches.append(cache)
        outputs.append(h)
    return h, Tape(spec, state, state.version, mode, x.shape, caches)


def backward(tape: Tape, upstream):
    """Return ``(grads, dx)``; ``grads`` mirrors ``state.params``."""
    if tape.state.version != tape.version:
        raise RuntimeError("tape is stale: the network state was updated after forward")
    spec, state = tape.spec, tape.state
    g = np.asarray(upstream, dtype=spec.dtype)
    grads = [dict() for _ in spec.layers]
    pending = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        if i in pending:
            g = g + pending.pop(i)
        layer, cache, p = spec.layers[i], tape.caches[i], state.params[i]
        if isinstance(layer, Dense):
            grads[i]["w"] = g.T @ cache[0]
            grads[i]["b"] = g.sum(axis=0)
            g = (g @ p["w"]).reshape(cache[1])
        elif isinstance(layer, Conv2d):
            pad = layer.k // 2
            dw, g_in = conv2d_backward(g, cache, p["w"], layer.stride, (pad, pad), layer.padding)
            grads[i]["w"] = dw
            if "b" in p:
                grads[i]["b"] = g.sum(axis=(0, 2, 3))
            g = g_in
        elif isinstance(layer, PixelShuffle):
            g = pixel_unshuffle(g, layer.r)
        elif isinstance(layer, ReLU):
            g = g * cache
        elif isinstance(layer, Sigmoid):
            g = g * cache * (1.0 - cache)
        elif isinstance(layer, BatchNorm):
            xhat, inv, mode = cache
            axes = _bn_axes(g)
            grads[i]["gamma"] = (g * xhat).sum(axis=axes)
            grads[i]["beta"] = g.sum(axis=axes)
            gx = g * _bn_view(p["gamma"], g)
            if mode == "train":
                m = g.size / g.shape[1]
                gx = _bn_view(inv, g) / m * (
                    m * gx - _bn_view(gx.sum(axis=axes), g) - xhat * _bn_view((gx * xhat).sum(axis=axes), g))
            else:
                gx = gx * _bn_view(inv, g)
            g = gx
        elif isinstance(layer, Skip):
            src = layer.source
            pending[src] = pending.get(src, 0) + g
    if -1 in pending:
        g = g + pending.pop(-1)
    return grads, g


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

@dataclass
class OptimConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 256
    iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimiser {self.algorithm!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.betas = tuple(self.betas)


def optimizer_step(state: NetState, grads, cfg: OptimConfig) -> NetState:
    """Apply one descent step in place (and return ``state``)."""
    for i, g in enumerate(grads):
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient for layer {i} parameter {name!r}")
            if arr.shape != state.params[i][name].shape:
                raise ValueError(f"gradient shape {arr.shape} != parameter shape {state.params[i][name].shape}")
    state.step += 1
    t = state.step
    for i, g in enumerate(grads):
        for name, arr in g.items():
            theta = state.params[i][name]
            if cfg.algorithm == "sgd":
                theta -= cfg.lr * arr
                continue
            b1, b2 = cfg.betas
            key_m, key_v = f"{i}.{name}.m", f"{i}.{name}.v"
            m = state.opt.get(key_m)
            if m is None:
                m = state.opt[key_m] = np.zeros_like(theta)
                state.opt[key_v] = np.zeros_like(theta)
            v = state.opt[key_v]
            m *= b1
            m += (1 - b1) * arr
            v *= b2
            v += (1 - b2) * arr * arr
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            theta -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    state.version += 1
    return state


def scale_grads(grads, c):
    return [{k: c * v for k, v in g.items()} for g in grads]


def add_grads(a, b):
    return [{k: a[i].get(k, 0) + b[i].get(k, 0) for k in set(a[i]) | set(b[i])} for i in range(len(a))]


def predict(spec: NetSpec, state: NetState, x, batch=4096):
    """Eval-mode forward in chunks; no tape kept."""
    x = np.asarray(x, dtype=spec.dtype)
    outs = [forward(spec, state, x[i:i + batch], mode="eval")[0] for i in range(0, len(x), batch)]
    return np.concatenate(outs) if outs else np.zeros((0,) + spec.output_shape, dtype=spec.dtype)


def grad_check(f, x, h=1e-5, n_probe=None, rng=None):
    """Central differences of scalar ``f`` at ``x`` (all coords, or ``n_probe`` random ones)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if n_probe is not None and n_probe < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, n_probe, replace=False)
    out = np.zeros(len(idx))
    for j, k in enumerate(idx):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        out[j] = (fp - fm) / (2 * h)
    return idx, out


def state_to_arrays(state: NetState) -> dict[str, Any]:
    arrays = {}
    for (i, name), arr in state.arrays():
        arrays[f"param.{i}.{name}"] = arr
    for i, b in enumerate(state.buffers):
        for name in sorted(b):
            arrays[f"buffer.{i}.{name}"] = b[name]
    for key in sorted(state.opt):
        arrays[f"opt.{key}"] = state.opt[key]
    return arrays


def state_from_arrays(spec: NetSpec, arrays, step=0, version=0) -> NetState:
    state = init_state(spec)
    for key, arr in arrays.items():
        kind, rest = key.split(".", 1)
        if kind == "opt":
            state.opt[rest] = np.array(arr, dtype=spec.dtype)
            continue
        i, name = rest.split(".", 1)
        target = state.params if kind == "param" else state.buffers
        target[int(i)][name] = np.array(arr, dtype=spec.dtype)
    state.step, state.version = step, version
    return state
