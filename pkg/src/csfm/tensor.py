"""Dense tensors with tape-based reverse-mode differentiation.

Every op records itself on the innermost active :class:`Tape` when at least
one input requires a gradient. ``Tape.backward`` replays the recorded ops in
exact reverse order. Outside a tape, ops run as plain numpy computations.

Broadcasting is limited to leading-dimension expansion: a binary op accepts
``b.shape == a.shape`` or ``b.shape == a.shape[-b.ndim:]``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

_DTYPE = np.float32
_TAPES: list["Tape"] = []

_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision."""
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_not_scalar(shape):
    raise ContractError(f"item() requires a single-element tensor, got shape {shape}")


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=True, name=name)


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. ``backward`` consumes the tape.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for _, inputs, out, rule in reversed(self.records):
            if out.grad is None:
                continue
            grads = rule(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise DimensionError(f"backward produced grad of shape {g.shape} for tensor {t.shape}")
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.dtype, copy=True)
                else:
                    t.grad += g
            # intermediate gradients are not needed once propagated
            if out is not loss:
                out.grad = None
        self.records = []


def no_grad_active() -> bool:
    return not _TAPES


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, rule: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"op '{op}' produced non-finite values", op=op)
    track = bool(_TAPES) and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = track
    result.grad = None
    result.name = None
    if track:
        _TAPES[-1].records.append((op, inputs, result, rule))
    return result


def _check_expand(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible (only leading-dim expansion is supported)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead else grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < b.ndim:
        a, b = b, a
    _check_expand("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_expand("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < b.ndim:
        a, b = b, a
    _check_expand("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * a.dtype.type(c), lambda g: (g * a.dtype.type(c),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = (xd * cdf).astype(x.dtype, copy=False)

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(x.dtype, copy=False),)

    return _emit("gelu", (x,), out, rule)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either batched with the same leading dims as ``a`` or a shared
    2-D matrix applied to every leading index of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, rule)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------- shape ops


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), lambda g: (g.transpose(inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        index = [slice(None)] * nd
        grads = []
        for i in range(len(tensors)):
            index[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), rule)


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices only)."""
    key = key if isinstance(key, tuple) else (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, slice)) and k is not Ellipsis:
            raise DimensionError(f"slice: unsupported index {k!r}; use take() for gathers")
    try:
        out = x.data[key]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}") from exc

    def rule(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _emit("slice", (x,), np.ascontiguousarray(out), rule)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``indices.shape + (d,)``."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: index out of range for table with {table.shape[0]} rows")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embedding_lookup", (table,), table.data[idx], rule)


def take_tokens(x: Tensor, indices) -> Tensor:
    """Per-batch gather along axis 1: ``out[b, i] = x[b, indices[b, i]]``."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"take_tokens: bad shapes {x.shape} and {idx.shape}")
    B, N, d = x.shape
    flat = idx + (np.arange(B)[:, None] * N)
    return embedding_lookup(reshape(x, (B * N, d)), flat)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _emit("sum", (x,), out, rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype, copy=False),)

    return _emit("mean", (x,), out, rule)


# ---------------------------------------------------------------- normalization / attention


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError("softmax: axis must have at least one element")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), s, rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        return gx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _emit("layer_norm", (x, gain, bias), out, rule)


# ---------------------------------------------------------------- losses


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def rule(g):
        gp = (2.0 / n) * g * diff
        return gp.astype(pred.dtype, copy=False), -gp.astype(pred.dtype, copy=False)

    return _emit("mse_loss", (pred, target), out, rule)


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy; ``targets`` are integer class indices."""
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    z = logits.data if logits.ndim == 2 else logits.data.reshape(1, -1)
    if z.shape[0] != t.shape[0]:
        raise DimensionError(f"cross_entropy_with_logits: {z.shape[0]} rows but {t.shape[0]} targets")
    if t.min() < 0 or t.max() >= z.shape[1]:
        raise DimensionError(f"cross_entropy_with_logits: target outside [0, {z.shape[1]})")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    rows = np.arange(z.shape[0])
    out = np.asarray(-logp[rows, t].mean(), dtype=logits.dtype)

    def rule(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((g * p / z.shape[0]).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _emit("cross_entropy_with_logits", (logits,), out, rule)


def binary_cross_entropy_with_logits(logits: Tensor, targets, weight=None) -> Tensor:
    """Weighted mean of per-element sigmoid cross-entropy.

    ``weight`` (0/1 or nonnegative) restricts which elements count; the mean
    divides by ``weight.sum()``.
    """
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"binary_cross_entropy_with_logits: shapes {logits.shape} and {y.shape} differ")
    w = np.ones_like(y) if weight is None else np.asarray(weight, dtype=logits.dtype)
    total = w.sum()
    if total <= 0:
        raise ContractError("binary_cross_entropy_with_logits: weights sum to zero")
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((w * per).sum() / total, dtype=logits.dtype)

    def rule(g):
        return ((g * w * (_stable_sigmoid(z) - y) / total).astype(logits.dtype, copy=False),)

    return _emit("binary_cross_entropy_with_logits", (logits,), out, rule)


# ---------------------------------------------------------------- convolutions


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv_transpose_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length - 1) * stride - 2 * padding + kernel


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation. ``x``: (B, C_in, L); ``w``: (C_out, C_in, K)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: incompatible input {x.shape} and weight {w.shape}")
    B, cin, L = x.shape
    cout, _, K = w.shape
    lout = conv_output_length(L, K, stride, padding)
    if lout < 1:
        raise DimensionError(f"conv1d: input length {L} too short for kernel {K}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :lout]
    out = np.einsum("bclk,ock->bol", cols, w.data, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None]

    def rule(g):
        gw = np.einsum("bol,bclk->ock", g, cols, optimize=True)
        gcols = np.einsum("bol,ock->bclk", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        span = stride * (lout - 1) + 1
        for k in range(K):
            gxp[:, :, k:k + span:stride] += gcols[:, :, :, k]
        gx = gxp[:, :, padding:padding + L] if padding else gxp
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2)),) if bias is not None else ())

    inputs = (x, w) + ((bias,) if bias is not None else ())
    return _emit("conv1d", inputs, out.astype(x.dtype, copy=False), rule)


def conv1d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-D convolution. ``x``: (B, C_in, L); ``w``: (C_in, C_out, K).

    Output length is ``(L - 1) * stride - 2 * padding + K``, the inverse of
    :func:`conv1d`'s length map.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv1d_transpose: incompatible input {x.shape} and weight {w.shape}")
    B, cin, L = x.shape
    _, cout, K = w.shape
    full_len = (L - 1) * stride + K
    lout = full_len - 2 * padding
    if lout < 1:
        raise DimensionError("conv1d_transpose: padding leaves no output")
    span = stride * (L - 1) + 1
    full = np.zeros((B, cout, full_len), dtype=x.dtype)
    for k in range(K):
        full[:, :, k:k + span:stride] += np.einsum("bcl,co->bol", x.data, w.data[:, :, k], optimize=True)
    out = full[:, :, padding:padding + lout]
    if bias is not None:
        out = out + bias.data[:, None]

    def rule(g):
        gfull = np.zeros((B, cout, full_len), dtype=x.dtype)
        gfull[:, :, padding:padding + lout] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for k in range(K):
            gk = gfull[:, :, k:k + span:stride]
            gx += np.einsum("bol,co->bcl", gk, w.data[:, :, k], optimize=True)
            gw[:, :, k] = np.einsum("bcl,bol->co", x.data, gk, optimize=True)
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2)),) if bias is not None else ())

    inputs = (x, w) + ((bias,) if bias is not None else ())
    return _emit("conv1d_transpose", inputs, np.ascontiguousarray(out, dtype=x.dtype), rule)


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[..., Tensor], inputs, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Maximum relative error between tape gradients and central differences.

    ``f`` is called with the input tensors as positional arguments and must
    return a single-element tensor. Inputs must be 64-bit. The relative error
    uses ``max(|analytic|, |numeric|, floor)`` as denominator; the floor keeps
    finite-difference round-off (~1e-11 at h=1e-5) on exactly-zero gradients
    from dominating.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 tensors")
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(*tensors)
            if out.size != 1:
                raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
        tape.backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
        worst = 0.0
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*tensors).item()
                flat[i] = orig - h
                fm = f(*tensors).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                denom = max(abs(gflat[i]), abs(num), floor)
                worst = max(worst, abs(gflat[i] - num) / denom)
        return worst
    finally:
        for t, s in zip(tensors, saved):
            t.requires_grad = s
            t.grad = None
