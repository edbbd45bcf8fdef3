"""Small dense-tensor engine with reverse-mode automatic differentiation.

Only the operations the segmentation network needs are provided. Every op
takes and returns :class:`Tensor`; the backward closure of each op receives
the upstream gradient as a plain ndarray and accumulates into its parents.
"""
from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Switch the dtype new tensors are created with (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


class float64_mode:
    """Context manager running everything inside in 64-bit (for gradient checks)."""

    def __enter__(self):
        self._prev = _DTYPE
        set_default_dtype(np.float64)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._prev)
        return False


_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager disabling graph construction on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    """N-dimensional array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar for the handful of elementwise ops we support
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable tensor that requires grad.

    Gradients accumulate, so calling twice without zeroing doubles them.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.full_like(a.data, g),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array(a.data.mean(), dtype=a.data.dtype), (a,),
                 lambda g: (np.full_like(a.data, g / n),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def channel_mul(x: Tensor, gate: Tensor) -> Tensor:
    """Scale each channel of ``x`` [N,C,H,W] by ``gate`` [N,C,1,1]."""
    n, c = x.shape[:2]
    if gate.shape != (n, c, 1, 1):
        raise ValueError(f"channel_mul: gate shape {list(gate.shape)} does not fit {list(x.shape)}")

    def bw(g):
        return g * gate.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return _make(x.data * gate.data, (x, gate), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ValueError(f"concat: axis {axis} out of range for {nd}-d tensors")
    axis %= nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ValueError(f"concat: shape {list(t.shape)} incompatible with {list(ref)} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * nd
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice ``x[:, start:stop]``."""
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ValueError(f"take_channels: [{start}:{stop}] outside {c} channels")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), bw)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d: spatial size {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _make(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return _make(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def _bilinear_matrix(n: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centers, edge-clamped
    out = np.zeros((n * factor, n), dtype=dtype)
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(n * factor)
    np.add.at(out, (rows, lo), 1 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsample: factor must be a positive integer, got {factor}")
    if factor == 1:
        return _make(x.data, (x,), lambda g: (g,))
    n, c, h, w = x.shape
    f = int(factor)
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
        return _make(out, (x,),
                     lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),))
    if mode == "bilinear":
        ah = _bilinear_matrix(h, f, x.data.dtype)
        aw = _bilinear_matrix(w, f, x.data.dtype)
        out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)
        return _make(out, (x,),
                     lambda g: (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),))
    raise ValueError(f"upsample: unknown mode {mode!r}")


# --------------------------------------------------------------------------
# convolution and normalization


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and optional channel groups.

    ``groups == channels == filters`` is a depthwise convolution.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {list(x.shape)} and {list(w.shape)}")
    n, c, h, wd = x.shape
    k, cg, kh, kw = w.shape
    if kh < 1 or kw < 1 or stride < 1 or padding < 0 or groups < 1:
        raise ValueError("conv2d: kernel/stride/groups must be >= 1 and padding >= 0")
    if c % groups or k % groups or cg != c // groups:
        raise ValueError(
            f"conv2d: input {list(x.shape)} and weight {list(w.shape)} incompatible with groups={groups}")
    if b is not None and b.shape != (k,):
        raise ValueError(f"conv2d: bias shape {list(b.shape)} does not match weight {list(w.shape)}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError(f"conv2d: input {list(x.shape)} smaller than kernel {list(w.shape)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    if groups == c == k:
        return _depthwise(x, xp, w, b, stride, padding, ho, wo)
    if kh == kw == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    cols = cols.reshape(groups, cg * kh * kw, n * ho * wo)
    kg = k // groups
    wm = w.data.reshape(groups, kg, cg * kh * kw)
    out = np.matmul(wm, cols)  # (G, Kg, N*Ho*Wo)
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(groups, kg, n * ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1), gm).reshape(c * kh * kw, n * ho * wo)
            if kh == kw == 1 and stride == 1:
                gxp = gcols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
            else:
                gxp = _kernels.col2im(gcols, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def _depthwise(x, xp, w, b, stride, padding, ho, wo) -> Tensor:
    n, c, h, wd = x.shape
    wk = np.ascontiguousarray(w.data[:, 0])
    out = _kernels.depthwise_forward(xp, wk, stride, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gxp, gwk = _kernels.depthwise_backward(xp, wk, np.ascontiguousarray(g), stride, x.requires_grad)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + wd]) if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gw = gwk[:, None] if w.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, (x, w) if b is None else (x, w, b), bw)


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> RunningStats:
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have shape [{c}]")
    dt = x.data.dtype
    if not training:
        inv = (1.0 / np.sqrt(running.var.astype(dt) + eps)).astype(dt)
        xhat = (x.data - running.mean.astype(dt)[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bw_eval(g):
            return (g * (gamma.data * inv)[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _make(out, (x, gamma, beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise ValueError(f"batchnorm2d: training needs at least 2 values per channel, got input {list(x.shape)}")
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    running.mean[...] = (1 - momentum) * running.mean + momentum * mu
    running.var[...] = (1 - momentum) * running.var + momentum * var * (m / (m - 1))

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        gx = (inv[None, :, None, None] / m) * (
            m * gxhat - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# loss


_LOG_FLOOR = math.log(1e-12)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def focal_loss(logits: Tensor, target, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean sigmoid focal loss over all elements.

    ``target`` holds 0/1 values with the same shape as ``logits``.
    """
    if gamma < 0:
        raise ValueError(f"focal_loss: gamma must be >= 0, got {gamma}")
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if y.shape != logits.shape:
        raise ValueError(f"focal_loss: target shape {list(y.shape)} vs logits {list(logits.shape)}")
    z = logits.data
    dt = z.dtype
    y = y.astype(dt)
    p = _sigmoid_np(z)
    q = 1 - p
    raw_lp = -_softplus(-z)   # log p
    raw_lq = -_softplus(z)    # log (1-p)
    lp = np.maximum(raw_lp, _LOG_FLOOR)
    lq = np.maximum(raw_lq, _LOG_FLOOR)
    dlp = np.where(raw_lp > _LOG_FLOOR, q, 0).astype(dt)
    dlq = np.where(raw_lq > _LOG_FLOOR, -p, 0).astype(dt)
    qg = q ** gamma
    pg = p ** gamma
    loss = -alpha * y * qg * lp - (1 - alpha) * (1 - y) * pg * lq
    n = z.size

    def bw(g):
        dpos = -alpha * (-gamma * p * qg * lp + qg * dlp)
        dneg = -(1 - alpha) * (gamma * pg * q * lq + pg * dlq)
        return ((g / n) * (y * dpos + (1 - y) * dneg).astype(dt),)

    return _make(np.array(loss.mean(), dtype=dt), (logits,), bw)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """RMSProp accumulators plus the decaying learning-rate schedule."""

    lr0: float = 1e-4
    decay: float = 0.99977
    rho: float = 0.9
    eps: float = 1e-8
    t: int = 0
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.lr0 * self.decay ** self.t


def rmsprop_step(params: dict[str, Tensor], state: OptimState) -> None:
    """One in-place RMSProp update of every parameter holding a gradient."""
    lr = state.lr
    rho = state.rho
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"rmsprop_step: grad {g.shape} vs param {p.data.shape} for {name}")
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        v *= rho
        v += (1 - rho) * g * g
        p.data -= (lr * g / np.sqrt(v + state.eps)).astype(p.data.dtype)
    state.t += 1


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# checkpoints


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_checkpoint(directory: str | os.PathLike, arrays: dict[str, np.ndarray],
                    step: int = 0, state: OptimState | None = None,
                    extra: dict | None = None) -> None:
    """Write arrays as little-endian float32 blobs plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name in arrays:
        arr = np.asarray(arrays[name], dtype="<f4")
        fname = _blob_name(name)
        arr.tofile(os.path.join(directory, fname))
        entry = {"name": name, "shape": list(arr.shape), "file": fname}
        if state is not None and name in state.v:
            oname = "opt." + fname
            np.asarray(state.v[name], dtype="<f4").tofile(os.path.join(directory, oname))
            entry["optimizer_state"] = oname
        entries.append(entry)
    manifest = {"format": "f32le", "step": int(step), "tensors": entries}
    if state is not None:
        manifest["optimizer"] = {"type": "rmsprop", "lr0": state.lr0, "decay": state.decay,
                                 "rho": state.rho, "eps": state.eps, "t": state.t}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_checkpoint(directory: str | os.PathLike):
    """Inverse of :func:`save_checkpoint`; returns (arrays, step, state-or-None, extra)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    arrays: dict[str, np.ndarray] = {}
    state = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        state = OptimState(lr0=o["lr0"], decay=o["decay"], rho=o["rho"], eps=o["eps"], t=o["t"])
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        path = os.path.join(directory, e["file"])
        arr = np.fromfile(path, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{path}: expected {int(np.prod(shape))} floats, found {arr.size}")
        arrays[e["name"]] = arr.reshape(shape).astype(np.float32)
        if state is not None and "optimizer_state" in e:
            state.v[e["name"]] = np.fromfile(
                os.path.join(directory, e["optimizer_state"]), dtype="<f4").reshape(shape).astype(np.float32)
    return arrays, manifest["step"], state, manifest.get("extra", {})
