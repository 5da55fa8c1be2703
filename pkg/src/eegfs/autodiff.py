"""Dense float64 tensors with taped reverse-mode differentiation.

Operations execute eagerly on numpy arrays. While a :class:`Tape` is
recording, every operation also appends a backward rule, so a single
reverse sweep over the tape yields gradients for all parameters and for
any intermediate node registered in the tape's capture set (used to pull
per-sample feature-map gradients out of a training step).

Broadcasting is restricted to numpy-compatible shapes; gradients of
broadcast operands are summed back to the operand's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class TapeUsageError(RuntimeError):
    """Tape used outside its recording/backward protocol."""


class ValidationError(ValueError):
    """Invalid argument value (labels, modes, hyperparameters)."""


_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """N-dimensional float64 value, optionally tracked on the active tape.

    ``data`` is a C-contiguous (row-major) float64 array; ``shape`` is fixed
    for the lifetime of the tensor. ``grad`` is populated by :func:`backward`
    for tensors with ``requires_grad`` and for captured nodes, and is
    overwritten (not accumulated) by each backward call.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Ergonomic operators; all defer to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of operations for one forward pass.

    Records are appended in execution order, which is a valid topological
    order by construction. ``capture_set`` holds node ids whose gradients
    must be retained after backward even if they are not leaves.

    Use as a context manager; recording stops on exit and the tape is then
    closed (backward requires a closed tape).
    """

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable]] = []
        self._tensors: dict[int, Tensor] = {}
        self._next_id = 0
        self._recording = False
        self._entered = False
        self.capture_set: set[int] = set()

    @property
    def recording(self) -> bool:
        return self._recording

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if self._entered:
            raise TapeUsageError("a tape cannot be reopened for recording")
        if _ACTIVE_TAPE is not None:
            raise TapeUsageError("another tape is already recording")
        self._entered = True
        self._recording = True
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        self._recording = False
        _ACTIVE_TAPE = None
        return False

    def register(self, t: Tensor) -> int:
        """Assign this tape's node id to ``t`` (idempotent)."""
        if t.tape is not self:
            t.tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._tensors[t.node_id] = t
        assert t.node_id is not None
        return t.node_id

    def capture(self, t: Tensor) -> None:
        """Mark ``t`` so its gradient is retained by backward."""
        self.capture_set.add(self.register(t))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, inputs: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    """Append an op to the active tape, if one is recording.

    ``backward_rule(grad_out) -> tuple`` returns one gradient array (or
    None) per input, each already summed to the input's shape.
    """
    tape = _ACTIVE_TAPE
    if tape is not None and tape.recording:
        in_ids = tuple(tape.register(t) for t in inputs)
        out_id = tape.register(out)
        tape._records.append((out_id, in_ids, backward_rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Populates ``.grad`` on every ``requires_grad`` tensor (zeros when the
    loss does not depend on it) and on every captured node. Grads are
    fresh arrays each call, so repeated sweeps are reproducible.
    """
    if tape.recording:
        raise TapeUsageError("backward on an open tape; close it first")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise TapeUsageError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for out_id, in_ids, rule in reversed(tape._records):
        g_out = grads.get(out_id)
        if g_out is None:
            continue
        contribs = rule(g_out)
        for node_id, contrib in zip(in_ids, contribs):
            if contrib is None:
                continue
            acc = grads.get(node_id)
            if acc is None:
                grads[node_id] = np.array(contrib, dtype=np.float64, copy=True)
            else:
                acc += contrib

    for node_id, t in tape._tensors.items():
        if t.requires_grad or node_id in tape.capture_set:
            g = grads.get(node_id)
            t.grad = np.zeros_like(t.data) if g is None else g


# ---------------------------------------------------------------------------
# Broadcasting helpers


def _broadcast_check(sa: tuple, sb: tuple, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {sa} and {sb} are not broadcastable") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over axes that were expanded to broadcast up to ``g.shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, opname: str, fwd: Callable, bwd: Callable) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a.shape, b.shape, opname)
    out = Tensor(fwd(a.data, b.data))

    def rule(g):
        ga, gb = bwd(g, a.data, b.data)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), rule)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary(
        a, b, "div", lambda x, y: x / y,
        lambda g, x, y: (g / y, -g * x / (y * y)),
    )


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    return _record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int) -> Tensor:
    """Shift-invariant softmax along ``axis``; outputs sum to 1 there."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def rule(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return ((g - inner) * p,)

    return _record(out, (x,), rule)


def xlogx(x: Tensor) -> Tensor:
    """x * ln(x) with the convention 0 * ln 0 = 0.

    The backward rule returns 0 at x <= 0 (the true one-sided derivative
    diverges there; entropy chains only reach x = 0 at saturation, where
    the upstream gradient already vanishes).
    """
    x = _as_tensor(x)
    d = x.data
    pos = d > 0.0
    safe = np.where(pos, d, 1.0)
    out = Tensor(np.where(pos, safe * np.log(safe), 0.0))
    return _record(out, (x,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),))


def mean_over_axes(x: Tensor, axes: Iterable[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(sorted(int(a) % x.data.ndim for a in axes))
    out = Tensor(x.data.mean(axis=axes))
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return _record(out, (x,), rule)


def sum_over_axes(x: Tensor, axes: Iterable[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(sorted(int(a) % x.data.ndim for a in axes))
    out = Tensor(x.data.sum(axis=axes))

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _record(out, (x,), rule)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Max reduction; backward routes the gradient to the first arg-max."""
    x = _as_tensor(x)
    axis = int(axis) % x.data.ndim
    out = Tensor(x.data.max(axis=axis))
    idx = x.data.argmax(axis=axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return _record(out, (x,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# Linear algebra and network ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(out, (a, b), rule)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal cross-correlation of (B, Cin, T) with kernels (Cout, Cin, k).

    Output length is floor((T + 2*padding - k) / stride) + 1. No kernel
    flip; differentiable in both x and w.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise DimensionError(f"conv1d: need (B,Cin,T) and (Cout,Cin,k), got {x.shape} and {w.shape}")
    batch, c_in, t_len = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise DimensionError(f"conv1d: input channels {c_in} != kernel channels {c_in_w}")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv1d: stride {stride} and padding {padding} must be >=1 and >=0")
    t_pad = t_len + 2 * padding
    if k > t_pad:
        raise DimensionError(f"conv1d: kernel {k} larger than padded input {t_pad}")
    t_out = (t_pad - k) // stride + 1

    xp = x.data if padding == 0 else np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # im2col: windows (B, Cin, T_out, k) -> (B*T_out, Cin*k), one GEMM.
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(batch * t_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    out = Tensor((cols @ w2.T).reshape(batch, t_out, c_out).transpose(0, 2, 1))

    def rule(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(batch * t_out, c_out)
        gw = (g2.T @ cols).reshape(c_out, c_in, k)
        gcols = (g2 @ w2).reshape(batch, t_out, c_in, k).transpose(0, 2, 1, 3)
        gxp = np.zeros((batch, c_in, t_pad))
        for kk in range(k):  # windows overlap, so scatter-add per offset
            gxp[:, :, kk:kk + stride * t_out:stride] += gcols[:, :, :, kk]
        gx = gxp if padding == 0 else gxp[:, :, padding:t_pad - padding]
        return (gx, gw)

    return _record(out, (x, w), rule)


def avg_pool1d(x: Tensor, pool_len: int) -> Tensor:
    """Non-overlapping temporal mean pooling; a trailing remainder is dropped."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"avg_pool1d: need (B,C,T), got {x.shape}")
    if pool_len < 1:
        raise ValidationError(f"avg_pool1d: pool_len {pool_len} must be >= 1")
    batch, chans, t_len = x.shape
    t_out = t_len // pool_len
    if t_out < 1:
        raise DimensionError(f"avg_pool1d: pool {pool_len} larger than input length {t_len}")
    trimmed = x.data[:, :, :t_out * pool_len].reshape(batch, chans, t_out, pool_len)
    out = Tensor(trimmed.mean(axis=3))

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :t_out * pool_len] = np.repeat(g / pool_len, pool_len, axis=2)
        return (gx,)

    return _record(out, (x,), rule)


class BatchNormState:
    """Per-channel running statistics for one batch-norm site."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self) -> "BatchNormState":
        s = BatchNormState(len(self.mean))
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str, eps: float = 1e-5, momentum_bn: float = 0.1) -> Tensor:
    """Per-channel normalization of (B, C, S) over batch and spatial axes.

    Train mode normalizes with (biased) batch statistics and updates the
    running statistics in place by exponential moving average; eval mode
    normalizes with the running statistics. Biased variance is used both
    for normalization and for the running update.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 3:
        raise DimensionError(f"batchnorm: need (B,C,S), got {x.shape}")
    chans = x.shape[1]
    if gamma.shape != (chans,) or beta.shape != (chans,):
        raise DimensionError(
            f"batchnorm: affine shapes {gamma.shape}/{beta.shape} do not match C={chans}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"batchnorm: mode must be train|eval, got {mode!r}")
    if eps <= 0:
        raise ValidationError(f"batchnorm: eps must be > 0, got {eps}")

    if mode == "train":
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        state.mean = (1.0 - momentum_bn) * state.mean + momentum_bn * mu
        state.var = (1.0 - momentum_bn) * state.var + momentum_bn * var
    else:
        mu = state.mean
        var = state.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None]) * inv_std[:, None]
    out = Tensor(xhat * gamma.data[:, None] + beta.data[:, None])

    def rule(g):
        gbeta = g.sum(axis=(0, 2))
        ggamma = (g * xhat).sum(axis=(0, 2))
        if mode == "eval":
            gx = g * (gamma.data * inv_std)[:, None]
        else:
            gy = g * gamma.data[:, None]
            gx = inv_std[:, None] * (
                gy
                - gy.mean(axis=(0, 2), keepdims=True)
                - xhat * (gy * xhat).mean(axis=(0, 2), keepdims=True)
            )
        return (gx, ggamma, gbeta)

    return _record(out, (x, gamma, beta), rule)


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, num_classes) logits vs int labels."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_logits: need (B, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"cross_entropy_logits: labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(
            f"cross_entropy_logits: labels must lie in [0, {n_classes}), got "
            f"[{labels.min()}, {labels.max()}]")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = z[np.arange(batch), labels]
    out = Tensor(np.mean(lse - picked))

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(batch), labels] -= 1.0
        return (float(g) * p / batch,)

    return _record(out, (logits,), rule)
