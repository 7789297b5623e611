"""A small 3D ConvNet engine: valid cross-correlation, ReLU, max pooling.

Activations are float64 arrays shaped ``(N, C, X, Y, Z)``.  Conv weights
are ``(out, in, kx, ky, kz)``.  Siamese training runs both patches of each
pair through the same parameters and accumulates one gradient.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fileio import FormatError
from .tdf import TdfPatch

CHECKPOINT_MAGIC = b"3DMC"
CHECKPOINT_VERSION = 1

# cap on the im2col buffer per chunk (doubles)
_COL_BUDGET = 8_000_000


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class CheckpointError(FormatError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv3d" | "relu" | "maxpool3d"
    kernel_size: int = 1
    out_channels: int = 1
    window: int = 2
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv3d", "relu", "maxpool3d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel_size < 1 or self.out_channels < 1 or self.stride < 1 or self.window < 1:
            raise ValueError(f"invalid layer parameters: {self}")


def conv(kernel: int, channels: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv3d", kernel_size=kernel, out_channels=channels, stride=stride)


def pool(window: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool3d", window=window, stride=stride)


RELU = LayerSpec("relu")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    descriptor_dim: int = 512
    input_dim: int = 30
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = self.shapes()
        flat = int(np.prod(shapes[-1]))
        if flat != self.descriptor_dim:
            raise ShapeError(
                f"network output {shapes[-1]} flattens to {flat}, not descriptor_dim {self.descriptor_dim}"
            )

    def shapes(self) -> list[tuple[int, int, int, int]]:
        """Activation shape ``(C, X, Y, Z)`` before the first layer and after each layer."""
        c, n = self.input_channels, self.input_dim
        out = [(c, n, n, n)]
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv3d":
                if n < layer.kernel_size:
                    raise ShapeError(f"layer {i} (conv3d): input {n} smaller than kernel {layer.kernel_size}")
                n = (n - layer.kernel_size) // layer.stride + 1
                c = layer.out_channels
            elif layer.kind == "maxpool3d":
                if n < layer.window:
                    raise ShapeError(f"layer {i} (maxpool3d): input {n} smaller than window {layer.window}")
                n = (n - layer.window) // layer.stride + 1
            out.append((c, n, n, n))
        return out

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """``(out, in, kernel)`` for each conv layer in order."""
        res = []
        shapes = self.shapes()
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv3d":
                res.append((layer.out_channels, shapes[i][0], layer.kernel_size))
        return res

    def to_text(self) -> str:
        lines = [f"input {self.input_dim} {self.input_channels}"]
        for layer in self.layers:
            if layer.kind == "conv3d":
                lines.append(f"conv3d {layer.kernel_size} {layer.out_channels} {layer.stride}")
            elif layer.kind == "maxpool3d":
                lines.append(f"maxpool3d {layer.window} {layer.stride}")
            else:
                lines.append("relu")
        lines.append(f"descriptor {self.descriptor_dim}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        layers = []
        input_dim = input_channels = descriptor_dim = None
        for ln in text.splitlines():
            parts = ln.split()
            if not parts:
                continue
            key, args = parts[0], [int(a) for a in parts[1:]]
            if key == "input":
                input_dim, input_channels = args
            elif key == "conv3d":
                layers.append(conv(*args))
            elif key == "maxpool3d":
                layers.append(pool(*args))
            elif key == "relu":
                layers.append(RELU)
            elif key == "descriptor":
                (descriptor_dim,) = args
            else:
                raise ValueError(f"unknown network spec line {ln!r}")
        if None in (input_dim, input_channels, descriptor_dim):
            raise ValueError("network spec text is missing input or descriptor lines")
        return cls(tuple(layers), descriptor_dim, input_dim, input_channels)


def _with_relus(convs_and_pools: Sequence[LayerSpec], final_relu: bool) -> tuple[LayerSpec, ...]:
    layers = []
    n_conv = sum(1 for l in convs_and_pools if l.kind == "conv3d")
    seen = 0
    for layer in convs_and_pools:
        layers.append(layer)
        if layer.kind == "conv3d":
            seen += 1
            if seen < n_conv or final_relu:
                layers.append(RELU)
    return tuple(layers)


def default_spec(final_relu: bool = True) -> NetworkSpec:
    """Eight 3³ convolutions with one 2³ pool: 30³ input to a 512-dim descriptor."""
    body = [conv(3, 64), conv(3, 64), pool(2, 2), conv(3, 128), conv(3, 128),
            conv(3, 256), conv(3, 256), conv(3, 512), conv(3, 512)]
    return NetworkSpec(_with_relus(body, final_relu), 512)


def desk_spec(final_relu: bool = True) -> NetworkSpec:
    """Reduced four-conv network (30³ input, 64-dim descriptor) for CPU training."""
    body = [conv(4, 16, stride=2), pool(2, 2), conv(3, 32), conv(3, 64), conv(3, 64)]
    return NetworkSpec(_with_relus(body, final_relu), 64)


# ------------------------------------------------------------------ parameters

@dataclass
class Parameters:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    weight_velocity: list[np.ndarray] = field(default_factory=list)
    bias_velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.weight_velocity:
            self.weight_velocity = [np.zeros_like(w) for w in self.weights]
        if not self.bias_velocity:
            self.bias_velocity = [np.zeros_like(b) for b in self.biases]

    def copy(self) -> "Parameters":
        return Parameters(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [v.copy() for v in self.weight_velocity],
            [v.copy() for v in self.bias_velocity],
        )

    def check(self, spec: NetworkSpec) -> None:
        shapes = spec.conv_shapes()
        if len(shapes) != len(self.weights) or len(shapes) != len(self.biases):
            raise ShapeError(f"spec has {len(shapes)} conv layers, parameters have {len(self.weights)}")
        for i, ((o, c, k), w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if w.shape != (o, c, k, k, k) or b.shape != (o,):
                raise ShapeError(f"conv layer {i}: parameter shapes {w.shape}, {b.shape} do not match spec")

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None


def init_xavier(spec: NetworkSpec, seed: int = 0) -> Parameters:
    """Uniform Xavier weights on ±sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for o, c, k in spec.conv_shapes():
        fan_in, fan_out = k ** 3 * c, k ** 3 * o
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(o, c, k, k, k)))
        biases.append(np.zeros(o))
    return Parameters(weights, biases)


def xavier_bound(spec: NetworkSpec, layer: int) -> float:
    o, c, k = spec.conv_shapes()[layer]
    return float(np.sqrt(6.0 / (k ** 3 * (c + o))))


# -------------------------------------------------------------------- layers

def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """Strided view ``(N, C, X', Y', Z', k, k, k)`` of all k³ windows."""
    w = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    return w[:, :, ::s, ::s, ::s]


def _conv_forward(x, w, b, stride):
    n, c = x.shape[:2]
    o, _, k = w.shape[:3]
    per_item = int(np.prod(_windows(x[:1], k, stride).shape[2:5])) * c * k ** 3
    chunk = max(1, _COL_BUDGET // max(per_item, 1))
    outs = []
    for start in range(0, n, chunk):
        win = _windows(x[start:start + chunk], k, stride)
        y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        outs.append(np.moveaxis(y, -1, 1))
    y = np.concatenate(outs) if len(outs) > 1 else outs[0]
    return np.ascontiguousarray(y + b[None, :, None, None, None])


def _conv_backward(x, w, stride, gy, need_input: bool):
    n, c = x.shape[:2]
    k = w.shape[2]
    gb = gy.sum(axis=(0, 2, 3, 4))
    ox = gy.shape[2]
    per_item = ox ** 3 * c * k ** 3
    chunk = max(1, _COL_BUDGET // max(per_item, 1))
    gw = np.zeros_like(w)
    for start in range(0, n, chunk):
        win = _windows(x[start:start + chunk], k, stride)
        gw += np.tensordot(gy[start:start + chunk], win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gx = None
    if need_input:
        gx = np.zeros_like(x)
        span = stride * (ox - 1) + 1
        # (N, X', Y', Z', C, k, k, k)
        cols = np.tensordot(gy, w, axes=([1], [0]))
        for a in range(k):
            for bb in range(k):
                for cc in range(k):
                    gx[:, :, a:a + span:stride, bb:bb + span:stride, cc:cc + span:stride] += (
                        np.moveaxis(cols[..., a, bb, cc], -1, 1)
                    )
    return gw, gb, gx


def _pool_forward(x, window, stride):
    win = _windows(x, window, stride)
    # flatten each window z-major so argmax ties resolve to the lowest x-fastest linear index
    flat = win.transpose(0, 1, 2, 3, 4, 7, 6, 5).reshape(win.shape[:5] + (window ** 3,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def _pool_backward(x_shape, arg, window, stride, gy):
    gx = np.zeros(x_shape)
    ox = gy.shape[2]
    span = stride * (ox - 1) + 1
    for off in range(window ** 3):
        dz, dy, dx = np.unravel_index(off, (window, window, window))
        hit = arg == off
        if hit.any():
            gx[:, :, dx:dx + span:stride, dy:dy + span:stride, dz:dz + span:stride] += gy * hit
    return gx


def _flatten(y: np.ndarray) -> np.ndarray:
    # channel-major, then x-fastest spatial order
    return y.transpose(0, 1, 4, 3, 2).reshape(y.shape[0], -1)


def _unflatten(g: np.ndarray, shape) -> np.ndarray:
    c, n = shape[0], shape[1]
    return g.reshape(g.shape[0], c, n, n, n).transpose(0, 1, 4, 3, 2)


# ------------------------------------------------------------- forward/backward

def as_input(patches) -> np.ndarray:
    """Normalise network input to a float64 ``(N, C, X, Y, Z)`` batch.

    Accepts a patch, a sequence of patches or 3D grids, a single grid, a
    single ``(C, X, Y, Z)`` tensor, or an already batched 5D array.
    """
    if isinstance(patches, TdfPatch):
        patches = [patches]
    if isinstance(patches, np.ndarray):
        x = patches.astype(np.float64)
        if x.ndim == 3:
            x = x[None, None]
        elif x.ndim == 4:
            x = x[None]
        return x
    grids = [p.values if isinstance(p, TdfPatch) else np.asarray(p) for p in patches]
    return np.stack(grids).astype(np.float64)[:, None]


@dataclass
class Cache:
    spec: NetworkSpec
    inputs: list  # input to each layer
    aux: list  # per-layer extra state (relu mask / pool argmax)


def forward(spec: NetworkSpec, params: Parameters, x, keep_cache: bool = True):
    """Descriptors ``(N, descriptor_dim)`` and, when requested, the layer cache."""
    x = as_input(x)
    shapes = spec.shapes()
    if x.shape[1:] != shapes[0]:
        raise ShapeError(f"layer 0 ({spec.layers[0].kind}): input shape {x.shape[1:]}, expected {shapes[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    params.check(spec)
    inputs, aux = [], []
    ci = 0
    for layer in spec.layers:
        if keep_cache:
            inputs.append(x)
        if layer.kind == "conv3d":
            x = _conv_forward(x, params.weights[ci], params.biases[ci], layer.stride)
            ci += 1
            aux.append(None)
        elif layer.kind == "relu":
            mask = x > 0
            x = x * mask
            aux.append(mask if keep_cache else None)
        else:
            x, arg = _pool_forward(x, layer.window, layer.stride)
            aux.append(arg if keep_cache else None)
    out = _flatten(x)
    return (out, Cache(spec, inputs, aux)) if keep_cache else (out, None)


def backward(spec: NetworkSpec, params: Parameters, cache: Cache, grad_descriptor,
             need_input: bool = False) -> Gradients:
    """Reverse-mode gradients of a scalar whose descriptor gradient is ``grad_descriptor``."""
    if cache.spec != spec or len(cache.inputs) != len(spec.layers):
        raise ShapeError("cache does not come from a forward pass of this spec")
    shapes = spec.shapes()
    g = np.asarray(grad_descriptor, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    n = cache.inputs[0].shape[0] if cache.inputs else g.shape[0]
    if g.shape != (n, spec.descriptor_dim):
        raise ShapeError(f"descriptor gradient shape {g.shape}, expected {(n, spec.descriptor_dim)}")
    g = _unflatten(g, shapes[-1])
    n_conv = len(params.weights)
    gw: list = [None] * n_conv
    gb: list = [None] * n_conv
    ci = n_conv
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x = spec.layers[i], cache.inputs[i]
        if layer.kind == "conv3d":
            ci -= 1
            want = need_input or i > 0
            gw[ci], gb[ci], g = _conv_backward(x, params.weights[ci], layer.stride, g, want)
        elif layer.kind == "relu":
            g = g * cache.aux[i]
        else:
            g = _pool_backward(x.shape, cache.aux[i], layer.window, layer.stride, g)
        if g is None:
            break
    return Gradients(gw, gb, g if need_input else None)


def _grid_batch(patches) -> np.ndarray:
    # a 4D array here is a stack of single-channel grids, not one (C, X, Y, Z) tensor
    if isinstance(patches, np.ndarray) and patches.ndim == 4:
        return patches.astype(np.float64)[:, None]
    return as_input(patches)


def describe_batch(spec: NetworkSpec, params: Parameters, patches) -> np.ndarray:
    """Descriptors for each patch, computed one patch at a time.

    ``patches`` is anything ``as_input`` accepts, except that a 4D array is
    read as ``(N, X, Y, Z)`` grids.  Running patches individually makes every
    descriptor independent of the batch it arrives in, bit for bit.
    """
    x = _grid_batch(patches)
    out = np.empty((x.shape[0], spec.descriptor_dim))
    for i in range(x.shape[0]):
        out[i] = forward(spec, params, x[i:i + 1], keep_cache=False)[0][0]
    return out


# ------------------------------------------------------------------- training

def contrastive_loss(d1, d2, label, margin: float = 1.0):
    """Per-pair contrastive loss and its gradients w.r.t. both descriptors.

    Matches cost ½D², non-matches ½max(0, margin − D)², with D the Euclidean
    distance.  Accepts single descriptors or ``(N, dim)`` batches.
    """
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    single = d1.ndim == 1
    d1, d2 = np.atleast_2d(d1), np.atleast_2d(d2)
    if d1.shape != d2.shape:
        raise ShapeError(f"descriptor shapes differ: {d1.shape} vs {d2.shape}")
    match = np.broadcast_to(np.asarray(label, dtype=bool), d1.shape[:1])
    diff = d1 - d2
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    hinge = np.maximum(margin - dist, 0.0)
    loss = np.where(match, 0.5 * dist ** 2, 0.5 * hinge ** 2)
    active = (~match) & (dist > 0) & (hinge > 0)
    safe = np.where(active, dist, 1.0)
    coef = np.where(match, 1.0, np.where(active, -hinge / safe, 0.0))
    g1 = coef[:, None] * diff
    if single:
        return float(loss[0]), g1[0], -g1[0]
    return loss, g1, -g1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.99
    weight_decay: float = 5e-4
    batch_size: int = 128
    contrastive_margin: float = 1.0
    seed: int = 0
    max_iterations: int = 1000

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate, momentum and weight_decay must be non-negative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even number (1:1 match/non-match)")
        if self.contrastive_margin <= 0 or self.max_iterations < 1:
            raise ValueError("contrastive_margin and max_iterations must be positive")


def siamese_loss_and_grads(spec, params, patches_a, patches_b, labels, margin):
    """Mean pair loss and its parameter gradients for one Siamese pass."""
    xa, xb = as_input(patches_a), as_input(patches_b)
    n = xa.shape[0]
    desc, cache = forward(spec, params, np.concatenate([xa, xb]))
    loss, g1, g2 = contrastive_loss(desc[:n], desc[n:], labels, margin)
    grads = backward(spec, params, cache, np.concatenate([g1, g2]) / n)
    return float(np.mean(loss)), grads


def sgd_update(params: Parameters, grads: Gradients, cfg: TrainConfig) -> Parameters:
    """Momentum SGD with weight decay: ``v ← μv − lr(g + λw); w ← w + v``."""
    new = params.copy()
    for blocks, vels, gblocks in ((new.weights, new.weight_velocity, grads.weights),
                                  (new.biases, new.bias_velocity, grads.biases)):
        for w, v, g in zip(blocks, vels, gblocks):
            v *= cfg.momentum
            v -= cfg.learning_rate * (g + cfg.weight_decay * w)
            w += v
    return new


def train_step(spec, params, patches_a, patches_b, labels, cfg: TrainConfig):
    """One Siamese SGD step; returns the updated parameters and the mean pair loss."""
    labels = np.asarray(labels, dtype=bool)
    if 2 * int(labels.sum()) != labels.size:
        raise ValueError("batch must hold equal numbers of matches and non-matches")
    loss, grads = siamese_loss_and_grads(spec, params, patches_a, patches_b, labels, cfg.contrastive_margin)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.weights + grads.biases):
        raise DivergenceError("divergence")
    return sgd_update(params, grads, cfg), loss


def train(spec, params, patches_a, patches_b, labels, cfg: TrainConfig, log=None):
    """Run ``cfg.max_iterations`` balanced mini-batch steps.

    ``patches_a``/``patches_b`` are parallel ``(N, X, Y, Z)`` grids and
    ``labels`` marks matches.  ``log`` (a text stream) receives one
    ``iter <n> loss <mean> time_ms <t>`` line per step.  Returns the final
    parameters and the list of per-step losses.
    """
    xa, xb = _grid_batch(patches_a), _grid_batch(patches_b)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    half = cfg.batch_size // 2
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("training set needs both matches and non-matches")
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for it in range(1, cfg.max_iterations + 1):
        t0 = time.perf_counter()
        idx = np.concatenate([
            rng.choice(pos, half, replace=len(pos) < half),
            rng.choice(neg, half, replace=len(neg) < half),
        ])
        params, loss = train_step(spec, params, xa[idx], xb[idx], labels[idx], cfg)
        losses.append(loss)
        if log is not None:
            ms = (time.perf_counter() - t0) * 1000.0
            log.write(f"iter {it} loss {loss:.6f} time_ms {ms:.1f}\n")
    return params, losses


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, spec: NetworkSpec, params: Parameters) -> None:
    params.check(spec)
    text = spec.to_text().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(text)), text]
    for w, b in zip(params.weights, params.biases):
        # out-channel, in-channel, then kernel with x fastest
        parts.append(w.transpose(0, 1, 4, 3, 2).astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[NetworkSpec, Parameters]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected 3DMC")
    if len(data) < 12:
        raise CheckpointError(f"{path}: unexpected end of file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        spec = NetworkSpec.from_text(data[12:12 + n].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: bad network spec ({exc})") from None
    pos = 12 + n
    weights, biases = [], []
    for o, c, k in spec.conv_shapes():
        nw = o * c * k ** 3
        if len(data) < pos + 4 * (nw + o):
            raise CheckpointError(f"{path}: parameter blocks shorter than the network spec requires")
        w = np.frombuffer(data, "<f4", nw, pos).reshape(o, c, k, k, k).transpose(0, 1, 4, 3, 2)
        pos += 4 * nw
        b = np.frombuffer(data, "<f4", o, pos)
        pos += 4 * o
        weights.append(np.ascontiguousarray(w, dtype=np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes; layer count does not match the network spec")
    return spec, Parameters(weights, biases)


def quantize(params: Parameters) -> Parameters:
    """Parameters rounded to float32, i.e. exactly what a checkpoint stores."""
    q = params.copy()
    q.weights = [w.astype(np.float32).astype(np.float64) for w in q.weights]
    q.biases = [b.astype(np.float32).astype(np.float64) for b in q.biases]
    return q
