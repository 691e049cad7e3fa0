"""Deterministic float64 layer engine with exact analytic gradients.

Everything is a plain C-contiguous float64 ndarray; layers are free functions
(forward/backward pairs) so they stay re-entrant, and parameters live in
ordered ``{name: array}`` dicts owned by the caller.  Convolution uses
im2col + GEMM; max-pool records argmax positions for exact gradient routing
with a first-in-scan-order tie break.  A central-finite-difference checker and
the classical momentum SGD step (weight decay on weights only, never biases)
complete the training core.  Checkpoints serialise named tensors bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import SplitMix64

CHECKPOINT_MAGIC = b"LGSEG1"


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# initialisation


def xavier_init(shape, fan_in: int, fan_out: int, rng: SplitMix64 | int) -> np.ndarray:
    """Uniform Xavier draw on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    rng may be a SplitMix64 stream or a plain integer seed.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fan_in/fan_out must be positive, got {fan_in}/{fan_out}")
    if isinstance(rng, int):
        rng = SplitMix64(rng)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, tuple(shape))


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x, weight, stride, pad):
    c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != c:
        raise ValueError(f"conv channel mismatch: input has {c}, kernel expects {in_ch}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv output extent not positive for input {h}x{w}, kernel {kh}x{kw}")
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: padded (C, Hp, Wp) -> (C*kh*kw, Ho*Wo)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)


def conv2d_forward(x, weight, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of a (C,H,W) input with an (O,C,kh,kw) kernel bank.

    Zero padding; out[o,y,x] = b[o] + sum_{c,i,j} w[o,c,i,j] * in[c, y*s+i-pad, x*s+j-pad].
    """
    x = _as_f64(x)
    weight = _as_f64(weight)
    bias = _as_f64(bias)
    ho, wo = _conv_geometry(x, weight, stride, pad)
    out_ch, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride)
    y = weight.reshape(out_ch, -1) @ cols + bias[:, None]
    return y.reshape(out_ch, ho, wo)


def conv2d_backward(x, weight, grad_out, stride: int = 1, pad: int = 0):
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    x = _as_f64(x)
    weight = _as_f64(weight)
    grad_out = _as_f64(grad_out)
    ho, wo = _conv_geometry(x, weight, stride, pad)
    out_ch, in_ch, kh, kw = weight.shape
    if grad_out.shape != (out_ch, ho, wo):
        raise ValueError(f"upstream gradient shape {grad_out.shape} != {(out_ch, ho, wo)}")

    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride)
    g = grad_out.reshape(out_ch, -1)

    grad_bias = g.sum(axis=1)
    grad_weight = (g @ cols.T).reshape(weight.shape)

    grad_cols = (weight.reshape(out_ch, -1).T @ g).reshape(in_ch, kh, kw, ho, wo)
    grad_xp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += grad_cols[:, i, j]
    grad_x = grad_xp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]] if pad else grad_xp
    return np.ascontiguousarray(grad_x), grad_weight, grad_bias


# ---------------------------------------------------------------------------
# max pooling


@dataclass(frozen=True)
class PoolIndices:
    """Argmax bookkeeping from a forward max-pool: enough to route gradients back."""

    input_shape: tuple
    flat_argmax: np.ndarray  # (C, Ho, Wo) flat indices into H*W


def maxpool2d(x, k: int, stride: int | None = None):
    """Per-window max over full (non-partial) windows; ties go to the first
    position in row-major scan order."""
    if k < 1:
        raise ValueError("pool size must be >= 1")
    stride = k if stride is None else stride
    if stride < 1:
        raise ValueError("pool stride must be >= 1")
    x = _as_f64(x)
    c, h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"pool window {k} does not fit input {h}x{w}")
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    flat_win = win.reshape(c, ho, wo, k * k)
    local = flat_win.argmax(axis=3)
    out = np.take_along_axis(flat_win, local[..., None], axis=3)[..., 0]
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oy * stride + local // k
    cols = ox * stride + local % k
    flat = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), PoolIndices((c, h, w), flat)


def maxpool2d_backward(indices: PoolIndices, grad_out) -> np.ndarray:
    grad_out = _as_f64(grad_out)
    c, h, w = indices.input_shape
    if grad_out.shape != indices.flat_argmax.shape:
        raise ValueError("upstream gradient shape does not match pool output")
    grad_x = np.zeros((c, h * w))
    ch = np.repeat(np.arange(c), grad_out[0].size)
    np.add.at(grad_x, (ch, indices.flat_argmax.reshape(c, -1).ravel()), grad_out.reshape(c, -1).ravel())
    return grad_x.reshape(c, h, w)


# ---------------------------------------------------------------------------
# dense / activations


def dense_forward(x, weight, bias) -> np.ndarray:
    """out = W @ x + b for a flat input of length in_units."""
    x = _as_f64(x)
    weight = _as_f64(weight)
    if x.ndim != 1 or x.size != weight.shape[1]:
        raise ValueError(f"dense input length {x.size} != in_units {weight.shape[1]}")
    return weight @ x + _as_f64(bias)


def dense_backward(x, weight, grad_out):
    x = _as_f64(x)
    weight = _as_f64(weight)
    grad_out = _as_f64(grad_out)
    if grad_out.size != weight.shape[0]:
        raise ValueError("upstream gradient length != out_units")
    grad_x = weight.T @ grad_out
    grad_weight = np.outer(grad_out, x)
    return grad_x, grad_weight, grad_out.copy()


def relu(x) -> np.ndarray:
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    return _as_f64(grad_out) * (_as_f64(x) > 0.0)


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x) -> np.ndarray:
    x = _as_f64(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the output strictly inside (0, 1) even where exp saturates
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def sigmoid_backward(y, grad_out) -> np.ndarray:
    """Gradient through sigmoid given its forward output y."""
    y = _as_f64(y)
    return _as_f64(grad_out) * y * (1.0 - y)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class SgdState:
    """Classical momentum state: v <- m*v - lr*(g + wd*w); w <- w + v."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("hyperparameters must be nonnegative")


def sgd_momentum_step(params: dict, grads: dict, state: SgdState) -> None:
    """One in-place update of every parameter.  Weight decay is applied to
    tensors whose name ends in '.weight' only, never to biases."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
            state.velocity[name] = v
        if v.shape != w.shape:
            raise ValueError(f"velocity shape mismatch for {name}")
        eff = g + state.weight_decay * w if name.endswith(".weight") else g
        v *= state.momentum
        v -= state.learning_rate * eff
        w += v


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, tensors: dict, analytic: dict, eps: float = 1e-5,
               sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn() must recompute the scalar loss from the *current* contents of
    the arrays in `tensors`, which are perturbed in place coordinate by
    coordinate.  With `sample` set, at most that many coordinates per tensor
    are checked (seeded draw); otherwise every coordinate is.  Error metric:
    |a - n| / max(1, |a|, |n|).

    For losses routed through max-pool or ReLU, eps must be small enough that
    the +/-eps evaluations do not straddle an argmax switch; 1e-6 is a good
    default for whole-network checks in double precision.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError("eps must lie in (0, 1e-3]")
    probe = loss_fn()
    if np.ndim(probe) != 0:
        raise ValueError("loss_fn must return a scalar")
    rng = SplitMix64(seed)
    worst = 0.0
    for name, t in tensors.items():
        flat = t.reshape(-1)
        g = analytic[name].reshape(-1)
        if sample is None or flat.size <= sample:
            coords = range(flat.size)
        else:
            chosen = set()
            while len(chosen) < sample:
                chosen.add(rng.below(flat.size))
            coords = sorted(chosen)
        for i in coords:
            v = flat[i]
            flat[i] = v + eps
            fp = float(loss_fn())
            flat[i] = v - eps
            fm = float(loss_fn())
            flat[i] = v
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(g[i] - numeric) / max(1.0, abs(g[i]), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict) -> None:
    """Write named float64 tensors: magic, then per tensor
    u32 name length, name bytes, u32 rank, u32 extents, little-endian payload."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in tensors.items():
            arr = _as_f64(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    out: dict = {}

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        piece = blob[off:off + n]
        off += n
        return piece

    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64)
    return out
