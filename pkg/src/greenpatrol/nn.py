"""Small numpy neural toolkit shared by the learners.

Dense and 3x3-style convolution layers (stride 1, no padding), elementwise
activations, softmax, mean-squared and Q losses, exact reverse-mode
gradients, the Adam optimizer, and a checksummed binary checkpoint format.
All parameters live in one flat vector per network, with a layout descriptor
mapping named slices to layers; training code treats parameter vectors as
immutable, and every optimizer step returns a fresh vector.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_DTYPE = np.float64


class NNError(ValueError):
    """Raised for shape mismatches and malformed networks."""


class StaleCacheError(RuntimeError):
    """Raised when backward receives a cache from a different forward pass."""


class CheckpointError(IOError):
    """Raised for corrupt or incompatible checkpoint files."""


# ---------------------------------------------------------------------------
# layers


class Dense:
    """Fully connected layer: y = x W^T + b, x of shape (batch, n_in)."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.n_params = n_in * n_out + n_out

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.n_in:
            raise NNError(f"dense layer expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def init_params(self, rng: np.random.Generator, dtype) -> np.ndarray:
        bound = 1.0 / np.sqrt(self.n_in)
        return rng.uniform(-bound, bound, size=self.n_params).astype(dtype)

    def _split(self, params):
        w = params[: self.n_in * self.n_out].reshape(self.n_out, self.n_in)
        b = params[self.n_in * self.n_out:]
        return w, b

    def forward(self, params, x):
        w, b = self._split(params)
        return x @ w.T + b, x

    def backward(self, params, cache, dy):
        w, _ = self._split(params)
        x = cache
        dw = dy.T @ x
        db = dy.sum(axis=0)
        dx = dy @ w
        return np.concatenate([dw.ravel(), db]), dx


class Conv2D:
    """2-D convolution, stride 1, no padding, x of shape (batch, C, H, W)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.fan_in = in_channels * kernel * kernel
        self.n_params = out_channels * self.fan_in + out_channels

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise NNError(
                f"conv layer expects ({self.in_channels}, H, W), got {in_shape}"
            )
        c, h, w = in_shape
        k = self.kernel
        if h < k or w < k:
            raise NNError(f"input {h}x{w} smaller than kernel {k}x{k}")
        return (self.out_channels, h - k + 1, w - k + 1)

    def init_params(self, rng: np.random.Generator, dtype) -> np.ndarray:
        bound = 1.0 / np.sqrt(self.fan_in)
        return rng.uniform(-bound, bound, size=self.n_params).astype(dtype)

    def _split(self, params):
        w = params[: self.out_channels * self.fan_in].reshape(
            self.out_channels, self.fan_in
        )
        b = params[self.out_channels * self.fan_in:]
        return w, b

    def _im2col(self, x):
        # (N, C, H, W) -> (N, H'·W', C·K·K)
        k = self.kernel
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        n, c, hp, wp, _, _ = windows.shape
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, hp * wp, c * k * k)
        return cols, hp, wp

    def forward(self, params, x):
        w, b = self._split(params)
        cols, hp, wp = self._im2col(x)
        y = cols @ w.T + b
        y = y.transpose(0, 2, 1).reshape(x.shape[0], self.out_channels, hp, wp)
        return y, (x.shape, cols, hp, wp)

    def backward(self, params, cache, dy):
        w, _ = self._split(params)
        x_shape, cols, hp, wp = cache
        n = x_shape[0]
        k = self.kernel
        dyf = dy.reshape(n, self.out_channels, hp * wp).transpose(0, 2, 1)
        dw = np.einsum("npo,npf->of", dyf, cols)
        db = dyf.sum(axis=(0, 1))
        dcols = dyf @ w  # (N, H'·W', C·K·K)
        dcols = dcols.reshape(n, hp, wp, self.in_channels, k, k)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dx[:, :, ki:ki + hp, kj:kj + wp] += dcols[
                    :, :, :, :, ki, kj
                ].transpose(0, 3, 1, 2)
        return np.concatenate([dw.ravel(), db]), dx


class _Elementwise:
    n_params = 0

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, rng, dtype):
        return np.zeros(0, dtype=dtype)


class ReLU(_Elementwise):
    def forward(self, params, x):
        return np.maximum(x, 0.0), x

    def backward(self, params, cache, dy):
        return np.zeros(0, dtype=dy.dtype), dy * (cache > 0)


class Tanh(_Elementwise):
    def forward(self, params, x):
        y = np.tanh(x)
        return y, y

    def backward(self, params, cache, dy):
        return np.zeros(0, dtype=dy.dtype), dy * (1.0 - cache ** 2)


class Sigmoid(_Elementwise):
    def forward(self, params, x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, params, cache, dy):
        return np.zeros(0, dtype=dy.dtype), dy * cache * (1.0 - cache)


class Softmax(_Elementwise):
    """Softmax over the last axis."""

    def forward(self, params, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, params, cache, dy):
        y = cache
        inner = (dy * y).sum(axis=-1, keepdims=True)
        return np.zeros(0, dtype=dy.dtype), y * (dy - inner)


class Flatten:
    """(batch, ...) -> (batch, prod(...))."""

    n_params = 0

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init_params(self, rng, dtype):
        return np.zeros(0, dtype=dtype)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dy):
        return np.zeros(0, dtype=dy.dtype), dy.reshape(cache)


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    length: int


@dataclass
class ForwardCache:
    params: np.ndarray
    layer_caches: list


class Network:
    """A feed-forward stack of layers over one flat parameter vector."""

    def __init__(self, in_shape: tuple[int, ...], layers: list, dtype=DEFAULT_DTYPE):
        self.in_shape = tuple(in_shape)
        self.layers = list(layers)
        self.dtype = dtype
        self.layout: list[LayoutEntry] = []
        self.slices: list[slice] = []
        shape = self.in_shape
        offset = 0
        for i, layer in enumerate(self.layers):
            shape = layer.out_shape(shape)
            name = f"{type(layer).__name__.lower()}{i}"
            self.layout.append(LayoutEntry(name, offset, layer.n_params))
            self.slices.append(slice(offset, offset + layer.n_params))
            offset += layer.n_params
        self.out_shape = shape
        self.n_params = offset

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = [layer.init_params(rng, self.dtype) for layer in self.layers]
        if not parts:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate(parts)

    def _check_params(self, params):
        if params.shape != (self.n_params,):
            raise NNError(f"expected {self.n_params} params, got {params.shape}")

    def forward(self, params: np.ndarray, x: np.ndarray):
        """Run the network on a batch; returns (output, cache for backward)."""
        self._check_params(params)
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.in_shape:
            raise NNError(
                f"input shape {x.shape[1:]} does not match {self.in_shape}"
            )
        caches = []
        for layer, sl in zip(self.layers, self.slices):
            x, cache = layer.forward(params[sl], x)
            caches.append(cache)
        return x, ForwardCache(params=params, layer_caches=caches)

    def backward(self, params: np.ndarray, cache: ForwardCache, dout: np.ndarray):
        """Exact reverse-mode gradient; returns (flat param grad, input grad).

        The cache must come from a forward pass over the same parameter
        vector object; optimizer steps produce fresh vectors, so a cache
        held across an update is rejected as stale.
        """
        self._check_params(params)
        if cache.params is not params:
            raise StaleCacheError("cache does not belong to these parameters")
        grad = np.zeros_like(params)
        dx = np.asarray(dout, dtype=self.dtype)
        for layer, sl, layer_cache in zip(
            reversed(self.layers), reversed(self.slices), reversed(cache.layer_caches)
        ):
            dparams, dx = layer.backward(params[sl], layer_cache, dx)
            grad[sl] = dparams
        return grad, dx

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        """Named read-only views into a flat parameter vector."""
        self._check_params(params)
        out = {}
        for entry, sl in zip(self.layout, self.slices):
            view = params[sl]
            view.setflags(write=False)
            out[entry.name] = view
        return out

    def pack(self, named: dict[str, np.ndarray]) -> np.ndarray:
        """Inverse of unpack; missing or extra names are errors."""
        if set(named) != {e.name for e in self.layout}:
            raise NNError("layer names do not match network layout")
        params = np.zeros(self.n_params, dtype=self.dtype)
        for entry, sl in zip(self.layout, self.slices):
            arr = np.asarray(named[entry.name], dtype=self.dtype).ravel()
            if arr.size != entry.length:
                raise NNError(f"{entry.name}: expected {entry.length} values")
            params[sl] = arr
        return params


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements; returns (loss, dloss/dpred)."""
    if pred.shape != target.shape:
        raise NNError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size


def q_loss(q_values: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """MSE between chosen-action Q values and targets; returns (loss, dQ)."""
    n = q_values.shape[0]
    if actions.shape != (n,) or targets.shape != (n,):
        raise NNError("actions and targets must be one per batch row")
    selected = q_values[np.arange(n), actions]
    diff = selected - targets
    loss = float(np.mean(diff ** 2))
    dq = np.zeros_like(q_values)
    dq[np.arange(n), actions] = 2.0 * diff / n
    return loss, dq


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(n_params: int, lr: float, dtype=DEFAULT_DTYPE, **kw) -> AdamState:
    return AdamState(
        m=np.zeros(n_params, dtype=dtype),
        v=np.zeros(n_params, dtype=dtype),
        step=0,
        lr=lr,
        **kw,
    )


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState):
    """One Adam update with bias correction; returns (new params, new state)."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise NNError("params, grad and moments must have equal shapes")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"GPNN"
CHECKPOINT_VERSION = 1


def save_params(path, params: np.ndarray, layout: list[LayoutEntry]) -> None:
    """Write a parameter vector with its layout, versioned and checksummed."""
    meta = json.dumps(
        [{"name": e.name, "offset": e.offset, "length": e.length} for e in layout]
    ).encode()
    payload = np.ascontiguousarray(params, dtype="<f8").tobytes()
    body = (
        CHECKPOINT_MAGIC
        + CHECKPOINT_VERSION.to_bytes(2, "little")
        + len(meta).to_bytes(4, "little")
        + meta
        + len(payload).to_bytes(8, "little")
        + payload
    )
    crc = zlib.crc32(body).to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(body + crc)


def load_params(path) -> tuple[np.ndarray, list[LayoutEntry]]:
    """Read a checkpoint; raises CheckpointError on any corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 2 + 4 + 8 + 4:
        raise CheckpointError("checkpoint truncated")
    body, crc = blob[:-4], blob[-4:]
    if zlib.crc32(body).to_bytes(4, "little") != crc:
        raise CheckpointError("checksum mismatch")
    if body[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes")
    version = int.from_bytes(body[4:6], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 6
    meta_len = int.from_bytes(body[pos:pos + 4], "little")
    pos += 4
    meta = json.loads(body[pos:pos + meta_len].decode())
    pos += meta_len
    payload_len = int.from_bytes(body[pos:pos + 8], "little")
    pos += 8
    if pos + payload_len != len(body):
        raise CheckpointError("payload length mismatch")
    params = np.frombuffer(body[pos:pos + payload_len], dtype="<f8").copy()
    layout = [LayoutEntry(m["name"], m["offset"], m["length"]) for m in meta]
    total = sum(e.length for e in layout)
    if total != params.size:
        raise CheckpointError("layout does not cover the parameter payload")
    return params, layout
