"""Dense MLPs with hand-written reverse-mode gradients, Adam, and checkpoints.

Parameters live in float32 by default; everything also runs in float64, which
the gradient checks use.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "linear", "sigmoid")


def positional_encoding(x, n_freqs, include_input=True):
    """Fourier features ``sin(2^k pi x), cos(2^k pi x)`` for ``k < n_freqs``.

    ``x`` has shape (..., C). The output is laid out per component:
    ``[x_c, sin(2^0 pi x_c), cos(2^0 pi x_c), ...]`` so it has
    ``C * (2 * n_freqs + include_input)`` columns.
    """
    if n_freqs < 0:
        raise ValueError("n_freqs must be >= 0")
    x = np.asarray(x)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** np.arange(n_freqs) * np.pi).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    ang = x[..., :, None] * freqs  # (..., C, L)
    parts = [np.sin(ang), np.cos(ang)]
    enc = np.stack(parts, axis=-1).reshape(*ang.shape[:-1], 2 * n_freqs)
    if include_input:
        enc = np.concatenate([x[..., :, None].astype(enc.dtype), enc], axis=-1)
    return enc.reshape(*x.shape[:-1], -1)


def encoding_width(n_components, n_freqs, include_input=True):
    return n_components * (2 * n_freqs + int(include_input))


@dataclass
class MlpParams:
    """Weights ``W[i]`` shaped (fan_in, fan_out) and biases ``b[i]``."""

    weights: list
    biases: list
    activations: list
    version: int = 0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: bad shapes {W.shape} / {b.shape}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i}: input width does not chain")

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self):
        """(name, array) pairs in a fixed order."""
        out = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"W{i}", W))
            out.append((f"b{i}", b))
        return out

    def n_params(self):
        return sum(a.size for _, a in self.arrays())

    def copy(self):
        return MlpParams(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


def init_mlp(widths, rng, hidden="relu", output="linear", dtype=np.float32):
    """Uniform fan-in (Kaiming-style) initialisation."""
    weights, biases, acts = [], [], []
    n = len(widths) - 1
    for i in range(n):
        fan_in, fan_out = widths[i], widths[i + 1]
        bound = np.sqrt(6.0 / fan_in) if i < n - 1 else np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
        acts.append(hidden if i < n - 1 else output)
    return MlpParams(weights, biases, acts)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def flush_tiny(a):
    """Zero entries too small to matter, in place.

    Products of such values land in the subnormal range, where CPU float
    arithmetic is orders of magnitude slower. The cut sits ``eps`` below the
    smallest normal number, far under anything a float32 sum can register.
    """
    info = np.finfo(a.dtype)
    np.putmask(a, np.abs(a) < info.tiny / info.eps, 0)
    return a


@dataclass
class MlpCache:
    inputs: list  # input to each layer
    outputs: list  # post-activation output of each layer
    params_id: int
    version: int


def mlp_forward(p: MlpParams, x):
    """Run the affine+activation chain; returns ``(y, cache)``."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != p.weights[0].shape[0]:
        raise ValueError(f"expected input of width {p.weights[0].shape[0]}, got shape {x.shape}")
    x = x.astype(p.dtype, copy=False)
    inputs, outputs = [], []
    h = x
    for W, b, act in zip(p.weights, p.biases, p.activations):
        inputs.append(h)
        z = h @ W
        z += b
        if act == "relu":
            np.maximum(z, 0, out=z)
        elif act == "sigmoid":
            z = _sigmoid(z)
        outputs.append(z)
        h = z
    return h, MlpCache(inputs, outputs, id(p), p.version)


def mlp_backward(p: MlpParams, cache: MlpCache, grad_out, need_input_grad=True):
    """Reverse pass. Returns ``(grads, grad_input)`` with grads as (dW list, db list)."""
    if cache.params_id != id(p) or cache.version != p.version:
        raise ValueError("stale cache: parameters changed since the forward pass")
    g = flush_tiny(np.array(grad_out, dtype=p.dtype))
    ones = np.ones(len(g), dtype=p.dtype)
    n = len(p.weights)
    dWs, dbs = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        act, y = p.activations[i], cache.outputs[i]
        if act == "relu":
            np.multiply(g, y > 0, out=g)
        elif act == "sigmoid":
            g *= y * (1.0 - y)
        dWs[i] = cache.inputs[i].T @ g
        dbs[i] = ones @ g
        if i or need_input_grad:
            g = g @ p.weights[i].T
    return (dWs, dbs), (g if need_input_grad else None)


# --------------------------------------------------------------------------
# Adam over a flat {path: array} parameter view


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr=None):
    """In-place bias-corrected Adam update of ``params`` (a ``{path: array}`` dict).

    Paths absent from ``grads`` are left untouched (and keep their moments).
    """
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {path!r}")
        if params[path].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {path!r}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for path, g in grads.items():
        p = params[path]
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p)
            state.v[path] = np.zeros_like(p)
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        flush_tiny(m)
        flush_tiny(v)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# Checkpoint file
#
#   magic      4 bytes  b"RPCK"
#   version    u32
#   meta_len   u32, then meta_len bytes of UTF-8 JSON (free-form metadata)
#   n_tensors  u32, then n_tensors tensor records
#   adam       u8 flag; if 1: step u64, lr/beta1/beta2/eps f64,
#              then u32 count of m records, m records, u32 count, v records
#
# tensor record: name_len u16, name UTF-8, dtype u8 (0=f32, 1=f64), ndim u8,
#                dims u32 * ndim, raw little-endian data
# All integers little-endian.

CKPT_MAGIC = b"RPCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _write_tensor(buf, name, arr):
    raw = name.encode()
    code = _DTYPE_CODES[np.dtype(arr.dtype)]
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_tensor(buf):
    (n,) = struct.unpack("<H", buf.read(2))
    name = buf.read(n).decode()
    code, ndim = struct.unpack("<BB", buf.read(2))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf.read(count * dt.itemsize), dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))


def save_checkpoint(path, tensors: dict, adam: AdamState | None = None, meta: dict | None = None):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_raw)) + meta_raw)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _write_tensor(buf, name, arr)
    buf.write(struct.pack("<B", adam is not None))
    if adam is not None:
        buf.write(struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        for moments in (adam.m, adam.v):
            buf.write(struct.pack("<I", len(moments)))
            for name, arr in moments.items():
                _write_tensor(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(tensors, adam_state_or_None, meta)``."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(4) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(meta_len).decode())
    (n,) = struct.unpack("<I", buf.read(4))
    tensors = dict(_read_tensor(buf) for _ in range(n))
    adam = None
    if struct.unpack("<B", buf.read(1))[0]:
        step, lr, b1, b2, eps = struct.unpack("<Q4d", buf.read(40))
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
        for target in (adam.m, adam.v):
            (k,) = struct.unpack("<I", buf.read(4))
            target.update(_read_tensor(buf) for _ in range(k))
    return tensors, adam, meta
