"""Small reverse-mode autodiff engine on top of numpy.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`.  When a
:class:`Tape` is active and any input requires a gradient, the op records a
backward closure on the tape; ``Tape.backward(loss)`` replays the closures in
reverse order and then drops them.  Without an active tape nothing is recorded,
which is how inference runs.

All arithmetic is float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """Shaped float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the payload."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Records ops between ``__enter__`` and ``backward``."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)
        self.nodes.clear()

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

        Leaf gradients accumulate across calls; intermediate gradients are
        discarded and the tape is cleared afterwards.
        """
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        if not loss.requires_grad:
            self.nodes.clear()
            return
        produced = {id(n.out) for n in self.nodes}
        loss.grad = np.asarray(seed, dtype=DTYPE).reshape(loss.shape)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=DTYPE, copy=True).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + pg
            if id(node.out) in produced:
                node.out.grad = None
        self.nodes.clear()


def _recording() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    need = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    tape = _recording()
    if need and tape is not None:
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError("matmul supports rank 1 and 2 operands only")
    out = a.data @ b.data

    def back(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _make(out, (a, b), back)


def linear(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = W x + bias`` for x of shape (n,) or a batch (B, n)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {W.shape}")
    out = x.data @ W.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ W.data
        if x.ndim == 1:
            gW = np.outer(g, x.data)
        else:
            gW = g.T @ x.data
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return (gx, gW, gb) if bias is not None else (gx, gW)

    parents = (x, W, bias) if bias is not None else (x, W)
    return _make(out, parents, back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def clip(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; gradient passes only where the value was not clamped."""
    out = np.clip(a.data, lo, hi)
    keep = np.ones(a.shape, dtype=bool)
    if lo is not None:
        keep &= a.data >= lo
    if hi is not None:
        keep &= a.data <= hi
    return _make(out, (a,), lambda g: (g * keep,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return mean(picked) * -1.0


# ---------------------------------------------------------------------------
# convolution, pooling, normalisation


_COL_BUDGET = 1 << 23  # im2col floats per chunk (64 MiB)
_CACHE_BUDGET = 1 << 25  # im2col floats kept for the backward pass (256 MiB)


def _im2col(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    # xp: (b, H+2, W+2, C) zero padded, channels last -> (b*H*W, 9*C), column order (dy, dx, c)
    b, C = xp.shape[0], xp.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * H * W, 9 * C)


def _padded(xh: np.ndarray) -> np.ndarray:
    b, H, W, C = xh.shape
    xp = np.zeros((b, H + 2, W + 2, C), dtype=DTYPE)
    xp[:, 1:-1, 1:-1, :] = xh
    return xp


def _correlate(xh: np.ndarray, kmat: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Channels-last 3x3 'same' correlation: (B, H, W, C) x (9C, O) -> (B, H, W, O)."""
    B, H, W, C = xh.shape
    O = kmat.shape[1]
    step = max(1, _COL_BUDGET // (H * W * 9 * C))
    out = np.empty((B, H, W, O), dtype=DTYPE)
    for s in range(0, B, step):
        cols = _im2col(_padded(xh[s:s + step]), H, W)
        out[s:s + step] = (cols @ kmat).reshape(-1, H, W, O)
        if cache is not None:
            cache.append(cols)
    return out


def conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (output keeps spatial size).

    ``x`` is (c_in, H, W) or a batch (B, c_in, H, W); ``kernels`` is
    (c_out, c_in, 3, 3).  Computed as cross-correlation, the deep-learning
    convention.  The result is a channels-first view of channels-last data,
    so stacked convolutions avoid layout copies.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernels must be (c_out, c_in, 3, 3), got {kernels.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match kernels {kernels.shape}")
    B, C, H, W = xd.shape
    O = kernels.shape[0]
    xh = xd.transpose(0, 2, 3, 1)
    kmat = kernels.data.transpose(2, 3, 1, 0).reshape(9 * C, O)
    keep = kernels.requires_grad and _recording() is not None and B * H * W * 9 * C <= _CACHE_BUDGET
    cache: list | None = [] if keep else None
    out = _correlate(xh, kmat, cache).transpose(0, 3, 1, 2)
    if single:
        out = out[0]

    def back(g):
        gh = (g[None] if single else g).transpose(0, 2, 3, 1)
        gk = np.zeros_like(kmat)
        if cache:
            pos = 0
            for cols in cache:
                n = cols.shape[0] // (H * W)
                gk += cols.T @ gh[pos:pos + n].reshape(-1, O)
                pos += n
        else:
            step = max(1, _COL_BUDGET // (H * W * 9 * C))
            for s in range(0, B, step):
                gk += _im2col(_padded(xh[s:s + step]), H, W).T @ gh[s:s + step].reshape(-1, O)
        gk = gk.reshape(3, 3, C, O).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            # input gradient = correlation of g with the flipped, transposed kernels
            kflip = kernels.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * O, C)
            gx = _correlate(gh, kflip).transpose(0, 3, 1, 2)
            if single:
                gx = gx[0]
        return gx, gk

    return _make(out, (x, kernels), back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on the last two axes.

    Odd trailing rows/columns form partial windows.  The gradient goes to the
    first maximum in row-major window order, which is the lowest flat index.
    """
    x = as_tensor(x)
    *lead, H, W = x.shape
    H2, W2 = -(-H // 2), -(-W // 2)
    xp = np.full((*lead, 2 * H2, 2 * W2), -np.inf, dtype=DTYPE)
    xp[..., :H, :W] = x.data
    win = xp.reshape(*lead, H2, 2, W2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, H2, W2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=DTYPE)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = np.moveaxis(gw.reshape(*lead, H2, W2, 2, 2), -2, -3).reshape(*lead, 2 * H2, 2 * W2)
        return (gw[..., :H, :W],)

    return _make(out, (x,), back)


class UninitializedStatsError(RuntimeError):
    pass


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, name: str = "bn") -> "BatchNormState":
        return cls(
            scale=Tensor(np.ones(channels), requires_grad=True, name=f"{name}.scale"),
            shift=Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.shift"),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if not self.initialized:
            self.running_mean = batch_mean.copy()
            self.running_var = batch_var.copy()
            self.initialized = True
        else:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * batch_mean
            self.running_var = m * self.running_var + (1 - m) * batch_var


def _bn_axes(ndim: int) -> tuple[int, tuple[int, ...]]:
    # (c,H,W) -> channel axis 0; (B,c) and (B,c,H,W) -> channel axis 1
    if ndim == 3:
        return 0, (1, 2)
    if ndim == 2:
        return 1, (0,)
    if ndim == 4:
        return 1, (0, 2, 3)
    raise ShapeError(f"batchnorm: unsupported rank {ndim}")


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train",
              update_stats: bool = True) -> Tensor:
    """Per-channel batch normalisation.

    In ``train`` mode the batch statistics (biased variance) normalise the
    input and, when ``update_stats`` is set, feed the running averages.  In
    ``infer`` mode the running statistics are used.
    """
    x = as_tensor(x)
    ch, red = _bn_axes(x.ndim)
    bshape = [1] * x.ndim
    bshape[ch] = x.shape[ch]
    scale = state.scale.data.reshape(bshape)
    shift = state.shift.data.reshape(bshape)
    if mode == "infer":
        if not state.initialized:
            raise UninitializedStatsError("uninitialized normalization statistics")
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * scale + shift

        def back_inf(g):
            return (g * (scale * inv.reshape(bshape)),
                    (g * xhat).sum(axis=red), g.sum(axis=red))

        return _make(out, (x, state.scale, state.shift), back_inf)
    if mode != "train":
        raise ValueError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    # work on an (N, C) matrix; free when the data is already channels-last
    moved = np.moveaxis(x.data, ch, -1)
    x2 = moved.reshape(-1, moved.shape[-1])
    n = x2.shape[0]
    mu = x2.mean(axis=0)
    xc = x2 - mu
    var = np.einsum("ij,ij->j", xc, xc) / n
    if update_stats:
        state.update(mu, var)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = np.moveaxis((xhat * state.scale.data + state.shift.data).reshape(moved.shape), -1, ch)
    scale_v = state.scale.data

    def back(g):
        g2 = np.moveaxis(g, ch, -1).reshape(n, -1)
        gshift = g2.sum(axis=0)
        gscale = np.einsum("ij,ij->j", g2, xhat)
        gx = (g2 - gshift / n - xhat * (gscale / n)) * (scale_v * inv)
        return np.moveaxis(gx.reshape(moved.shape), -1, ch), gscale, gshift

    return _make(out, (x, state.scale, state.shift), back)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named trainable tensors plus an optimisation step counter."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = trainable
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self._params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def sgd_step(self, lr: float) -> None:
        for _, t in self.trainable():
            if t.grad is not None:
                t.data = t.data - lr * t.grad
        self.step += 1

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def merge(self, other: "ParamStore", prefix: str = "") -> None:
        for k, t in other.items():
            self.add(prefix + k, t, trainable=t.requires_grad)


def gradient_check(f: Callable[[], Tensor], params: ParamStore, step: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` must rebuild the scalar loss from the current parameter values each
    call.  Frozen tensors are skipped.  ``max_entries`` caps the number of
    coordinates probed per tensor (sampled without replacement).
    """
    params.zero_grad()
    with Tape() as tape:
        loss = f()
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("non-finite loss in gradient check")
        tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, t in params.trainable():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("non-finite loss in gradient check")
            num = (fp - fm) / (2 * step)
            a = analytic[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    params.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# binary serialisation (little endian)

TENSOR_MAGIC = b"E2ET"
FORMAT_VERSION = 1


def write_u32(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<I", v))


def read_u32(fh: BinaryIO) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise EOFError("truncated file")
    return struct.unpack("<I", raw)[0]


def write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u32(fh)
    raw = fh.read(n)
    if len(raw) != n:
        raise EOFError("truncated string")
    return raw.decode("utf-8")


def expect_magic(fh: BinaryIO, magic: bytes) -> int:
    got = fh.read(4)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    return read_u32(fh)


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=DTYPE)
    fh.write(TENSOR_MAGIC)
    write_u32(fh, FORMAT_VERSION)
    write_u32(fh, arr.ndim)
    for d in arr.shape:
        write_u32(fh, d)
    fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    expect_magic(fh, TENSOR_MAGIC)
    rank = read_u32(fh)
    shape = tuple(read_u32(fh) for _ in range(rank))
    n = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(shape)


def write_named(fh: BinaryIO, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(tensors)
    write_u32(fh, len(items))
    for name, arr in items:
        write_str(fh, name)
        write_tensor(fh, arr)


def read_named(fh: BinaryIO) -> dict[str, np.ndarray]:
    n = read_u32(fh)
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = read_str(fh)
        out[name] = read_tensor(fh)
    return out


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
