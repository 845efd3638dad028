"""Reverse-mode automatic differentiation over dense float64 tensors.

Everything the encoders, classifier heads and losses need is expressed
through the operators in this module.  Each operator runs its forward pass
eagerly with numpy and, when gradient tracking is active, records a backward
rule on the process-wide tape.  ``backward(loss, params)`` then walks the
tape once in reverse, writes gradients for exactly the requested parameters
and clears the tape, so every training sub-step owns one forward/backward
pair and cannot leak gradient into the next.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

# Probability floor applied inside cross_entropy's log.
PROB_FLOOR = 1e-12
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes violate an operator's contract."""


class NumericError(ArithmeticError):
    """Non-finite or out-of-domain values where finite ones are required."""


class ContractError(RuntimeError):
    """An operation was invoked outside its documented contract."""


class Tensor:
    """Dense n-dimensional float64 value with optional tape linkage.

    ``grad`` is a same-shape accumulator present iff ``requires_grad``;
    detached tensors (the default) never receive gradient contributions.
    ``node_id``/``tape_gen`` tie the tensor to the active tape generation
    and are managed by the tape itself.
    """

    __slots__ = ("data", "requires_grad", "_grad", "node_id", "tape_gen")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape_gen = -1

    @property
    def grad(self) -> np.ndarray | None:
        """Same-shape accumulator, present iff requires_grad (allocated lazily)."""
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != ():
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter:
    """Named trainable tensor plus its SGD momentum buffer."""

    __slots__ = ("name", "tensor", "momentum")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.momentum = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def size(self) -> int:
        return self.tensor.data.size

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


class _TapeOp:
    __slots__ = ("in_ids", "tracked", "out_id", "bwd")

    def __init__(self, in_ids, tracked, out_id, bwd):
        self.in_ids = in_ids
        self.tracked = tracked
        self.out_id = out_id
        self.bwd = bwd


class Tape:
    """Ordered record of one forward pass.

    Topological by construction: an operation's inputs are always recorded
    (assigned node ids) before the operation itself.  ``backward`` consumes
    and clears the tape; the generation counter invalidates node ids held by
    tensors from earlier passes, so a second backward on the same loss
    raises instead of double-accumulating.
    """

    def __init__(self):
        self.ops: list[_TapeOp] = []
        self.gen = 0
        self.enabled = True
        self._next_id = 0

    def node_for(self, t: Tensor) -> int:
        if t.tape_gen != self.gen:
            t.node_id = self._next_id
            self._next_id += 1
            t.tape_gen = self.gen
        return t.node_id

    def clear(self) -> None:
        self.ops.clear()
        self.gen += 1
        self._next_id = 0


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (evaluation / teacher forward passes)."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(out_data: np.ndarray, inputs: Sequence[Tensor],
            bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    if _TAPE.enabled and any(i.requires_grad for i in inputs):
        in_ids = tuple(_TAPE.node_for(i) for i in inputs)
        tracked = tuple(i.requires_grad for i in inputs)
        out.requires_grad = True
        _TAPE.ops.append(_TapeOp(in_ids, tracked, _TAPE.node_for(out), bwd))
    return out


def detach(x: Tensor) -> Tensor:
    """Same values, no tape linkage; downstream use propagates no gradient."""
    return Tensor(x.data)


def backward(loss: Tensor, params: Iterable[Parameter]) -> None:
    """Populate ``p.grad`` with d(loss)/dp for every listed parameter.

    Parameters not listed receive no accumulation, and the reverse walk is
    pruned to the subgraph from which a listed parameter is reachable.  The
    tape is cleared afterwards; calling backward again on the same loss is a
    contract error.
    """
    params = list(params)
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad or loss.tape_gen != _TAPE.gen or loss.node_id is None:
        raise ContractError("loss is not on the active tape (detached, or tape already consumed)")

    leaves: dict[int, Parameter] = {}
    for p in params:
        t = p.tensor
        if t.tape_gen == _TAPE.gen and t.node_id is not None:
            leaves[t.node_id] = p

    needed = set(leaves)
    for op in _TAPE.ops:
        if any(i in needed for i in op.in_ids):
            needed.add(op.out_id)

    adjoint: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
    for op in reversed(_TAPE.ops):
        g = adjoint.pop(op.out_id, None)
        if g is None:
            continue
        if not any(t and i in needed for i, t in zip(op.in_ids, op.tracked)):
            continue
        grads = op.bwd(g)
        for i, tracked, gi in zip(op.in_ids, op.tracked, grads):
            if tracked and gi is not None and i in needed:
                acc = adjoint.get(i)
                adjoint[i] = gi if acc is None else acc + gi

    for nid, p in leaves.items():
        g = adjoint.get(nid)
        if g is not None:
            p.tensor.grad += g
    _TAPE.clear()


# ---------------------------------------------------------------------------
# broadcasting helpers (leading batch axes only)

def _check_suffix_broadcast(sa: tuple, sb: tuple, opname: str) -> None:
    if len(sa) == len(sb):
        ok = sa == sb
    else:
        small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
        ok = len(small) == 0 or big[len(big) - len(small):] == small
    if not ok:
        raise ShapeError(f"{opname}: shapes {sa} and {sb} only broadcast over leading axes")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise and structural operators

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix_broadcast(a.shape, b.shape, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix_broadcast(a.shape, b.shape, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU; the backward rule differentiates the same form."""
    x = _as_tensor(x)
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * (sq * xd)))

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        dydx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner
        return (g * dydx,)

    return _record(0.5 * xd * (1.0 + t), (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.data.ndim)

    def bwd(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(x.data.sum(axis=ax, keepdims=keepdims), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.data.ndim)
    if ax is None:
        count = x.data.size
    else:
        count = int(np.prod([x.shape[a] for a in ax]))

    def bwd(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy() / count,)

    return _record(x.data.mean(axis=ax, keepdims=keepdims), (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    x = _as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the two trailing axes; leading axes must match or
    be absent on one side (stacked batch of matrices against a shared one)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree between {a.shape} and {b.shape}")
    la, lb = ad.shape[:-2], bd.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul: leading axes disagree between {a.shape} and {b.shape}")

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution stack

def _conv_indices(c, kh, kw, h_out, w_out, stride):
    i0 = np.tile(np.repeat(np.arange(kh), kw), c)
    j0 = np.tile(np.arange(kw), kh * c)
    i1 = stride * np.repeat(np.arange(h_out), w_out)
    j1 = stride * np.tile(np.arange(w_out), h_out)
    i = i0[:, None] + i1[None, :]
    j = j0[:, None] + j1[None, :]
    k = np.repeat(np.arange(c), kh * kw)[:, None]
    return k, i, j


def _corr_stride1(xp: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid cross-correlation with stride 1 on pre-padded input."""
    from numpy.lib.stride_tricks import sliding_window_view

    kh, kw = kernel.shape[-2:]
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))   # [n,c,h',w',kh,kw]
    out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; optional per-output-channel bias."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {kernel.shape}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (pad={pad})")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if stride == 1:
        out = _corr_stride1(xp, kernel.data)
        cols = None
    else:
        k_idx, i_idx, j_idx = _conv_indices(c, kh, kw, h_out, w_out, stride)
        cols = xp[:, k_idx, i_idx, j_idx]                  # [n, c*kh*kw, h_out*w_out]
        out = (kernel.data.reshape(o, -1) @ cols).reshape(n, o, h_out, w_out)
    inputs = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
        out = out + bias.data[:, None, None]
        inputs = (x, kernel, bias)

    def bwd(g):
        if stride == 1:
            from numpy.lib.stride_tricks import sliding_window_view

            windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            # input grad is the full correlation with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx_full = _corr_stride1(gp, flipped)           # [n, c, h+2p, w+2p]
            gx = gx_full[:, :, pad:pad + h, pad:pad + w] if pad else gx_full
        else:
            gf = g.reshape(n, o, -1)
            gk = np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
            gcols = kernel.data.reshape(o, -1).T @ gf      # [n, c*kh*kw, L]
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (np.arange(n)[:, None, None],) + _conv_indices(
                c, kh, kw, h_out, w_out, stride), gcols)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is not None:
            return gx, gk, g.sum(axis=(0, 2, 3))
        return gx, gk

    return _record(out, inputs, bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _record(out, (x,), bwd)


def patches(x: Tensor, patch: int) -> Tensor:
    """Split images into non-overlapping patch vectors: [n,c,h,w] -> [n,T,c*p*p]."""
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image extents {x.shape}")
    gh, gw = h // patch, w // patch
    r = reshape(x, (n, c, gh, patch, gw, patch))
    t = transpose(r, (0, 2, 4, 1, 3, 5))
    return reshape(t, (n, gh * gw, c * patch * patch))


# ---------------------------------------------------------------------------
# normalization and losses

def softmax(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the trailing axis."""
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a nonempty trailing axis, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the trailing axis, then apply learned scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: scale/shift shapes {gain.shape}/{bias.shape} do not match trailing extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g):
        gb = g.sum(axis=lead)
        gg = (g * xn).sum(axis=lead)
        gxn = g * gain.data
        gx = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                    - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(xn * gain.data + bias.data, (x, gain, bias), bwd)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of -log(probs[row, label]), floored at PROB_FLOOR.

    ``probs`` rows must already sum to 1 (softmax output); gradients inside
    the floored region are zero, so confidently wrong predictions stay finite.
    """
    probs = _as_tensor(probs)
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, K] probabilities, got {probs.shape}")
    n, k = probs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but labels shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} outside [0, {k})")
    sums = probs.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("cross_entropy expects probability rows summing to 1 within 1e-6")
    rows = np.arange(n)
    p = probs.data[rows, labels]
    clamped = np.maximum(p, PROB_FLOOR)

    def bwd(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(p >= PROB_FLOOR, -g / (n * clamped), 0.0)
        return (gp,)

    return _record(np.float64(-np.log(clamped).mean()), (probs,), bwd)


def abs_mean_diff(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of the per-class mean absolute difference.

    The subgradient of |.| at 0 is taken as 0, keeping the result's gradient
    bounded and deterministic when the two inputs agree exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"abs_mean_diff: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    scale = 1.0 / d.size

    def bwd(g):
        s = np.sign(d) * (g * scale)
        return s, -s

    return _record(np.float64(np.abs(d).mean()), (a, b), bwd)
