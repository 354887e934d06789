"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Operations only record while a :class:`Tape` is active (``with Tape():``)
and at least one input requires a gradient; everything else runs as plain
numpy. Complex vertex data is carried as paired real blocks ``[re | im]``
along the last axis.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

TIME_EPS = 1e-8

_tape_stack: list = []
_nan_check = False


def set_nan_check(enabled):
    """Raise on non-finite values after every forward op when enabled."""
    global _nan_check
    _nan_check = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "node", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.array(data, dtype=np.float64)
        if data.ndim > 3:
            raise ValueError(f"tensors have at most 3 axes, got shape {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward):
        out.node = len(self.records)
        out._tape = self
        self.records.append(_Record(out, inputs, backward))

    def clear(self):
        for r in self.records:
            r.out.node = None
            r.out._tape = None
        self.records.clear()


@contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, backward):
    if _nan_check and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by forward op")
    out = Tensor(data)
    tape = _tape_stack[-1] if _tape_stack else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def backward(loss):
    """Backpropagate from a scalar ``loss``; accumulates into ``.grad`` of
    every leaf that requires a gradient, then clears the tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss is detached (not recorded on any tape)")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records[:loss.node + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._tape is None:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


def _shape_error(op, *tensors):
    shapes = " and ".join(str(t.shape) for t in tensors)
    return ValueError(f"{op}: incompatible shapes {shapes}")


# --------------------------------------------------------------------------
# Core ops

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b):
    """Elementwise sum; ``b`` may also be a scalar or a row bias ``(C,)``/``(1, C)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.size == 1 and b.ndim <= 1:
        return _emit(a.data + b.data.reshape(()), (a, b),
                     lambda g: (g, np.asarray(g.sum()).reshape(b.shape)))
    if a.ndim == 2 and b.ndim in (1, 2) and b.shape[-1] == a.shape[1] and b.data.size == a.shape[1]:
        return _emit(a.data + b.data.reshape(1, -1), (a, b),
                     lambda g: (g, g.sum(axis=0).reshape(b.shape)))
    raise _shape_error("add", a, b)


def mul(a, b):
    """Elementwise product of equal shapes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def total(a):
    """Sum of all entries as a scalar tensor."""
    a = _as_tensor(a)
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def concat(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise _shape_error("concat", *tensors)
    sizes = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=-1)))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # relu'(0) = 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a):
    a = _as_tensor(a)
    X = a.data
    return _emit(np.log(X), (a,), lambda g: (g / X,))


def dropout(a, p, train, rng=None):
    """Inverted dropout; identity when not training or ``p == 0``."""
    a = _as_tensor(a)
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _emit(a.data * keep, (a,), lambda g: (g * keep,))


def row_softmax(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise _shape_error("row_softmax", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _emit(s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def log_softmax(a):
    """Row-wise log-softmax via log-sum-exp."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise _shape_error("log_softmax", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def mean_over_vertices(a, weights=None):
    """(V, C) -> (1, C) mean over rows, optionally weighted (e.g. by mass)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise _shape_error("mean_over_vertices", a)
    if weights is None:
        w = np.full(a.shape[0], 1.0 / a.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (a.shape[0],):
            raise ValueError(f"mean_over_vertices: {w.shape} weights for {a.shape[0]} rows")
        w = w / w.sum()
    return _emit((w @ a.data)[None, :], (a,), lambda g: (np.outer(w, g[0]),))


def gather_rows(a, index):
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), back)


# --------------------------------------------------------------------------
# Geometric ops

class SplitSparse:
    """A constant sparse matrix with cached real/imaginary parts and transposes."""

    def __init__(self, S):
        S = sp.csr_matrix(S)
        self.shape = S.shape
        self.is_complex = np.iscomplexobj(S.data)
        self.real = S.real.tocsr() if self.is_complex else S
        self.imag = S.imag.tocsr() if self.is_complex else None
        self.real_T = self.real.T.tocsr()
        self.imag_T = self.imag.T.tocsr() if self.is_complex else None


def sparse_apply(S, x):
    """``S @ x`` for a constant sparse matrix (scipy sparse or :class:`SplitSparse`).

    A complex ``S`` yields ``(V, 2C)`` paired blocks ``[Re | Im]``; the
    backward pass applies the conjugate transpose.
    """
    x = _as_tensor(x)
    S = S if isinstance(S, SplitSparse) else SplitSparse(S)
    if x.ndim != 2 or S.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_apply: matrix {S.shape} vs input {x.shape}")
    X = x.data
    if S.is_complex:
        C = X.shape[1]
        return _emit(np.hstack([S.real @ X, S.imag @ X]), (x,),
                     lambda g: (S.real_T @ g[:, :C] + S.imag_T @ g[:, C:],))
    return _emit(np.asarray(S.real @ X), (x,), lambda g: (np.asarray(S.real_T @ g),))


def spectral_diffusion(u, times, evals, evecs, mass):
    """Per-channel diffusion ``Phi (exp(-lam t) * Phi^T M u)`` with learnable
    times ``t = max(times, 1e-8)``."""
    u, times = _as_tensor(u), _as_tensor(times)
    V, D = u.shape if u.ndim == 2 else (None, None)
    if u.ndim != 2 or times.shape != (D,) or evecs.shape[0] != V or mass.shape != (V,):
        raise ValueError(f"spectral_diffusion: u {u.shape}, times {times.shape}, "
                         f"evecs {evecs.shape}, mass {mass.shape}")
    raw = times.data
    clamped = raw < TIME_EPS
    if clamped.sum() > 0.5 * D:
        warnings.warn(f"diffusion time clamp active on {int(clamped.sum())}/{D} channels",
                      stacklevel=2)
    t = np.where(clamped, TIME_EPS, raw)
    coefs = evecs.T @ (mass[:, None] * u.data)  # (k, D)
    decay = np.exp(-np.outer(evals, t))
    out = evecs @ (decay * coefs)

    def back(g):
        gproj = evecs.T @ g  # (k, D)
        gu = mass[:, None] * (evecs @ (decay * gproj))
        gt = np.einsum("kd,kd->d", gproj, -evals[:, None] * decay * coefs)
        return gu, np.where(clamped, 0.0, gt)

    return _emit(out, (u, times), back)


def gradient_features(w, A, mode="complex"):
    """``tanh(Re(conj(w_i) * sum_j A_ij w_j))`` per vertex and channel.

    ``w`` is ``(V, 2D)`` paired real/imaginary gradient blocks. ``A`` is
    ``(D, D)`` in real mode and ``(2, D, D)`` (real, imaginary parts) in
    complex mode.
    """
    w, A = _as_tensor(w), _as_tensor(A)
    D = w.shape[1] // 2
    if mode == "complex":
        if A.shape != (2, D, D):
            raise ValueError(f"complex gradient features need A of shape (2, {D}, {D}), got {A.shape}")
        Ar, Ai = A.data[0], A.data[1]
    elif mode == "real":
        if A.shape != (D, D):
            raise ValueError(f"real gradient features need A of shape ({D}, {D}), got {A.shape}")
        Ar, Ai = A.data, None
    else:
        raise ValueError(f"unknown gradient feature mode {mode!r}")
    if w.ndim != 2 or w.shape[1] != 2 * D:
        raise _shape_error("gradient_features", w, A)
    Wr, Wi = w.data[:, :D], w.data[:, D:]
    Yr, Yi = Wr @ Ar.T, Wi @ Ar.T
    if Ai is not None:
        Yr = Yr - Wi @ Ai.T
        Yi = Yi + Wr @ Ai.T
    out = np.tanh(Wr * Yr + Wi * Yi)

    def back(g):
        gs = g * (1.0 - out * out)
        gYr, gYi = gs * Wr, gs * Wi
        gWr = gs * Yr + gYr @ Ar + (gYi @ Ai if Ai is not None else 0.0)
        gWi = gs * Yi + gYi @ Ar - (gYr @ Ai if Ai is not None else 0.0)
        gAr = gYr.T @ Wr + gYi.T @ Wi
        if Ai is None:
            gA = gAr
        else:
            gA = np.stack([gAr, gYi.T @ Wr - gYr.T @ Wi])
        return np.hstack([gWr, gWi]), gA

    return _emit(out, (w, A), back)


# --------------------------------------------------------------------------
# Finite-difference checking

def numerical_gradient(fn, tensor, eps=1e-6):
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor``."""
    flat = tensor.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(tensor.shape)


def gradient_check(fn, tensors, eps=1e-6, floor=1e-10):
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` builds a scalar from ``tensors`` (which must require grad).
    Returns ``{index or name: relative error}`` where the error is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)`` in the 2-norm.
    """
    for t in tensors:
        t.grad = None
    with Tape():
        loss = fn()
        backward(loss)
    errors = {}
    with no_grad():
        for i, t in enumerate(tensors):
            g_fd = numerical_gradient(fn, t, eps)
            g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
            scale = max(np.linalg.norm(g_ad), np.linalg.norm(g_fd), floor)
            errors[t.name or i] = float(np.linalg.norm(g_ad - g_fd) / scale)
    return errors
