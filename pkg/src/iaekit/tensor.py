"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record onto the currently active :class:`Tape`; with no tape
active they evaluate eagerly without building a graph (inference mode).
A tape admits exactly one backward pass.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_wants")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._wants = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wants_grad(t):
    return t.requires_grad or t._wants


def _acc(t, g, shape_from=None):
    if not _wants_grad(t):
        return
    if shape_from is not None:
        g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Ordered record of primitives; every operand precedes its consumer."""

    def __init__(self):
        self.nodes = []  # (output Tensor, backward fn)
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def record(self, out, bwd):
        self.nodes.append((out, bwd))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        self.consumed = True
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0
        for out, bwd in reversed(self.nodes):
            if out.grad is None:
                continue
            bwd(out.grad)
            if not out.requires_grad:
                out.grad = None  # free intermediates


def backward(tape, loss):
    """Run reverse accumulation; gradients land on requires_grad leaves."""
    tape.backward(loss)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad)


def _record(out_data, parents, bwd):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(_wants_grad(p) for p in parents):
        out._wants = True
        tape.record(out, bwd)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _acc(a, g, shape_from=True)
        _acc(b, g, shape_from=True)

    return _record(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        _acc(a, g, shape_from=True)
        _acc(b, -g, shape_from=True)

    return _record(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        if _wants_grad(a):
            _acc(a, g * bd, shape_from=True)
        if _wants_grad(b):
            _acc(b, g * ad, shape_from=True)

    return _record(ad * bd, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        if _wants_grad(a):
            _acc(a, g / bd, shape_from=True)
        if _wants_grad(b):
            _acc(b, -g * ad / (bd * bd), shape_from=True)

    return _record(ad / bd, (a, b), bwd)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        _acc(a, g * c)

    return _record(a.data * c, (a,), bwd)


def add_scalar(a, c):
    a = _as_tensor(a)

    def bwd(g):
        _acc(a, g)

    return _record(a.data + float(c), (a,), bwd)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bwd(g):
        _acc(a, g * mask)

    return _record(out_data, (a,), bwd)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        _acc(a, g * (0.5 / out_data))

    return _record(out_data, (a,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    ad, bd = a.data, b.data

    def bwd(g):
        if _wants_grad(a):
            _acc(a, np.matmul(g, np.swapaxes(bd, -1, -2)), shape_from=True)
        if _wants_grad(b):
            _acc(b, np.matmul(np.swapaxes(ad, -1, -2), g), shape_from=True)

    return _record(np.matmul(ad, bd), (a, b), bwd)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        if not _wants_grad(a):
            return
        if axis is None:
            _acc(a, np.full(shape, float(g)) if np.ndim(g) == 0 else np.broadcast_to(g, shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(ge, shape).copy())

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape

    def bwd(g):
        _acc(a, g.reshape(old))

    return _record(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _acc(a, np.transpose(g, inv))

    return _record(np.transpose(a.data, axes), (a,), bwd)


def concat(parts, axis):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if not _wants_grad(p):
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _acc(p, g[tuple(sl)])

    return _record(
        np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd
    )


def narrow(a, axis, start, length):
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    shape = a.shape

    def bwd(g):
        if not _wants_grad(a):
            return
        full = np.zeros(shape)
        full[sl] = g
        _acc(a, full)

    return _record(a.data[sl].copy(), (a,), bwd)


def kernel_matrix(U, V, w2):
    """Fused assembly K[..., p, j] = w2 . relu(U[..., p, :] + V[j, :]).

    U: (..., P, h) per-source features, V: (m, h) per-target features with
    bias folded in, w2: (h,). Output (..., P, m). The (P, m, h) activation
    is never materialised; the backward pass recomputes the relu mask.
    """
    U, V, w2 = _as_tensor(U), _as_tensor(V), _as_tensor(w2)
    lead = U.shape[:-2]
    P, h = U.shape[-2:]
    if V.shape[1] != h:
        raise DimensionError(f"feature widths disagree: {U.shape} vs {V.shape}")
    m = V.shape[0]
    U2 = np.ascontiguousarray(U.data.reshape(-1, h))
    Vd = np.ascontiguousarray(V.data)
    w2d = np.ascontiguousarray(w2.data)
    K = _kernels.kernel_matrix_fwd(U2, Vd, w2d)

    def bwd(g):
        gU, gV, gw2 = _kernels.kernel_matrix_bwd(
            U2, Vd, w2d, np.ascontiguousarray(g.reshape(-1, m))
        )
        _acc(U, gU.reshape(U.shape))
        _acc(V, gV)
        _acc(w2, gw2)

    return _record(K.reshape(lead + (P, m)), (U, V, w2), bwd)


def dft_concat(x):
    """Signed-order DFT along the last axis, scaled by 1/s.

    Input (..., c, s) real; output (..., 2c, s): real parts then imaginary
    parts, with the k-th column holding signed frequency k - s//2 (low
    frequencies centred).
    """
    x = _as_tensor(x)
    s = x.shape[-1]
    X = np.fft.fftshift(np.fft.fft(x.data, axis=-1), axes=-1) / s

    def bwd(g):
        c = x.shape[-2]
        gc = np.fft.ifftshift(g[..., :c, :] + 1j * g[..., c:, :], axes=-1)
        _acc(x, np.fft.ifft(gc, axis=-1).real)

    return _record(np.concatenate([X.real, X.imag], axis=-2), (x,), bwd)


def idft_concat(X):
    """Inverse of :func:`dft_concat`; discards the imaginary residue.

    Input (..., 2c, s) with real/imag halves on the channel axis; output
    (..., c, s) real.
    """
    X = _as_tensor(X)
    c2 = X.shape[-2]
    if c2 % 2 != 0:
        raise DimensionError(f"expected even channel count (real|imag), got {c2}")
    c = c2 // 2
    s = X.shape[-1]
    Xc = X.data[..., :c, :] + 1j * X.data[..., c:, :]
    y = np.fft.ifft(np.fft.ifftshift(Xc, axes=-1), axis=-1) * s

    def bwd(g):
        gc = np.fft.fftshift(np.fft.fft(g, axis=-1), axes=-1)
        _acc(X, np.concatenate([gc.real, gc.imag], axis=-2))

    return _record(y.real, (X,), bwd)


def rfft_modes(x, kmax):
    """Lowest kmax+1 nonnegative-frequency DFT coefficients, 1/s scaled.

    Input (..., c, s); output (..., 2c, kmax+1): real then imaginary parts.
    kmax is clipped below the Nyquist mode.
    """
    x = _as_tensor(x)
    s = x.shape[-1]
    kmax = min(int(kmax), (s - 1) // 2)
    X = np.fft.rfft(x.data, axis=-1)[..., : kmax + 1] / s
    n = np.arange(s)
    k = np.arange(kmax + 1)

    def bwd(g):
        c = x.shape[-2]
        gc = (g[..., :c, :] + 1j * g[..., c:, :]) / s
        basis = np.exp(2j * np.pi * np.outer(k, n) / s)
        _acc(x, np.einsum("...ck,kn->...cn", gc, basis).real)

    return _record(np.concatenate([X.real, X.imag], axis=-2), (x,), bwd)


def irfft_modes(X, s):
    """Real field of size s from the truncated spectrum of rfft_modes."""
    X = _as_tensor(X)
    c2, K = X.shape[-2:]
    c = c2 // 2
    n = np.arange(s)
    k = np.arange(K)
    w = np.full(K, 2.0)
    w[0] = 1.0
    Cw = w[:, None] * np.cos(2 * np.pi * np.outer(k, n) / s)
    Sw = w[:, None] * np.sin(2 * np.pi * np.outer(k, n) / s)

    def bwd(g):
        gr = np.matmul(g, Cw.T)
        gi = np.matmul(g, -Sw.T)
        _acc(X, np.concatenate([gr, gi], axis=-2))

    y = np.matmul(X.data[..., :c, :], Cw) - np.matmul(X.data[..., c:, :], Sw)
    return _record(y, (X,), bwd)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op, a, b=None):
    """Strict-shape elementwise dispatch: {add, mul, sub, relu, scale}.

    Binary ops require exactly equal shapes (scalars allowed); no implicit
    broadcasting.
    """
    a = _as_tensor(a)
    if op == "relu":
        return relu(a)
    if op == "scale":
        return scale(a, b)
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.isscalar(b) or (isinstance(b, np.ndarray) and b.ndim == 0):
        if op == "add":
            return add_scalar(a, b)
        b = Tensor(np.full(a.shape, float(b)))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(
            f"elementwise {op} requires equal shapes, got {a.shape} and {b.shape}"
        )
    return _ELEMENTWISE[op](a, b)
