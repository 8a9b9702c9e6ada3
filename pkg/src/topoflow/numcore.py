"""Dense float64 tensors, a fixed-vocabulary reverse-mode tape, and a portable RNG.

This module is deliberately small: a handful of dense operations with
hand-written gradients, recorded on an explicit :class:`Tape`.  There is no
general autodiff here; every differentiable operation belongs to a closed,
finite-difference-tested vocabulary.  All arithmetic is IEEE-754 double
precision and single-threaded, which keeps results bit-reproducible across
runs and platforms.

Random numbers come from :class:`Rng`, a PCG64 bit stream with explicit,
documented transforms (Marsaglia polar for normals, Marsaglia-Tsang for
gammas) so that the same seed yields the same bytes everywhere.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "Rng",
    "sample_gaussian",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "tanh",
    "square",
    "sum_all",
    "softmax_rows",
    "masked_softmax_rows",
    "gather_rows",
    "take",
    "reshape",
    "concat",
    "narrow",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_ACTIVE_TAPE: "Tape | None" = None


def _as_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    return arr


class Tensor:
    """Immutable dense tensor of float64 values in row-major order.

    Parameters
    ----------
    values : array-like
        Anything ``numpy`` can coerce to a float64 array (nested lists,
        scalars, ndarrays).  The data is copied.

    Notes
    -----
    Tensors are frozen at construction; operations always allocate new
    tensors.  Every constructed tensor is checked for non-finite entries,
    so NaN or infinity surfacing anywhere in a computation fails fast.
    """

    __slots__ = ("array",)

    def __init__(self, values, _wrap: np.ndarray | None = None):
        if _wrap is not None:
            arr = _wrap
        else:
            arr = _as_array(values)
        if not np.isfinite(arr).all():
            raise ValueError("Tensor contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major read-only view of the buffer."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def to_numpy(self) -> np.ndarray:
        """Writable copy of the underlying array."""
        return self.array.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return scale(sum_all(self), 1.0 / self.size)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], bwd: Callable):
        self.out = out
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Records operations for reverse-mode differentiation.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded in topological (execution) order.  Only one tape may be
    active at a time; the package is single-threaded by contract.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], bwd: Callable) -> None:
        self.nodes.append(_Node(out, parents, bwd))


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar loss for every tensor on the tape.

    Parameters
    ----------
    tape : Tape
        The tape the loss was recorded on.
    loss : Tensor
        A single-element tensor produced inside the tape's context.

    Returns
    -------
    dict
        Maps each tensor that influences ``loss`` (leaves included) to its
        gradient array.  Tensors with no path to the loss are absent; treat
        missing entries as zero.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.array)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        parent_grads = node.bwd(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else acc + pg
    return grads


def _emit(values: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    out = Tensor(None, _wrap=np.ascontiguousarray(values, dtype=np.float64))
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE._record(out, parents, bwd)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        values = a.array + b.array
    except ValueError as err:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from err
    return _emit(values, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    try:
        values = a.array - b.array
    except ValueError as err:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from err
    return _emit(values, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    try:
        values = a.array * b.array
    except ValueError as err:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from err
    return _emit(
        values,
        (a, b),
        lambda g: (_unbroadcast(g * b.array, a.shape), _unbroadcast(g * a.array, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every element by a python float (not differentiated in ``c``)."""
    c = float(c)
    return _emit(a.array * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    return _emit(
        a.array @ b.array,
        (a, b),
        lambda g: (g @ b.array.T, a.array.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _emit(a.array.T, (a,), lambda g: (g.T,))


def tanh(a: Tensor) -> Tensor:
    values = np.tanh(a.array)
    return _emit(values, (a,), lambda g: (g * (1.0 - values * values),))


def square(a: Tensor) -> Tensor:
    return _emit(a.array * a.array, (a,), lambda g: (2.0 * g * a.array,))


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements; the result has shape ``()``."""
    return _emit(np.asarray(a.array.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# -- softmax family ----------------------------------------------------------


def _softmax_backward(out_values: np.ndarray):
    def bwd(g):
        gs = g * out_values
        return (gs - out_values * gs.sum(axis=1, keepdims=True),)

    return bwd


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.array - x.array.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=1, keepdims=True)
    return _emit(values, (x,), _softmax_backward(values))


def masked_softmax_rows(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Row-wise softmax restricted to ``allowed`` cells.

    Disallowed cells receive an exact 0.0 weight (they are excluded from the
    normalisation entirely rather than given a large negative logit), and no
    gradient flows through them.

    Parameters
    ----------
    x : Tensor
        2-D logits.
    allowed : ndarray of bool
        Same shape as ``x``.  Every row must contain at least one True.
    """
    if x.ndim != 2:
        raise ShapeError(f"masked_softmax_rows needs a 2-D tensor, got {x.shape}")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != x.shape:
        raise ShapeError(f"mask shape {allowed.shape} does not match logits shape {x.shape}")
    if not allowed.any(axis=1).all():
        row = int(np.flatnonzero(~allowed.any(axis=1))[0])
        raise ValueError(f"masked_softmax_rows: row {row} has no allowed entries")
    neg = np.where(allowed, x.array, -np.inf)
    shifted = neg - neg.max(axis=1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) underflows to exactly 0.0
    values = e / e.sum(axis=1, keepdims=True)
    return _emit(values, (x,), _softmax_backward(values))


# -- indexing / reshaping ----------------------------------------------------


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-D table; gradient scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def bwd(g):
        out = np.zeros(table.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.array[idx], (table,), bwd)


def take(x: Tensor, flat_indices) -> Tensor:
    """Gather elements of ``x`` by flat (row-major) index.

    The result has the shape of ``flat_indices``; the gradient scatter-adds
    back into the source, so repeated indices accumulate.
    """
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise IndexError(f"take: flat index out of range for size {x.size}")
    flat = x.array.reshape(-1)

    def bwd(g):
        out = np.zeros(x.size)
        np.add.at(out, idx.reshape(-1), g.reshape(-1))
        return (out.reshape(x.shape),)

    return _emit(flat[idx], (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        values = x.array.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from err
    return _emit(values, (x,), lambda g: (g.reshape(x.shape),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Concatenate 2-D tensors along axis 0 or 1."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    for p in parts:
        if p.ndim != 2:
            raise ShapeError(f"concat needs 2-D tensors, got {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(parts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.array for p in parts], axis=axis), tuple(parts), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of length ``length`` along one axis of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"narrow needs a 2-D tensor, got {x.shape}")
    if axis not in (0, 1):
        raise ShapeError(f"narrow axis must be 0 or 1, got {axis}")
    stop = start + length
    if start < 0 or stop > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{stop}] out of range for shape {x.shape}")

    def bwd(g):
        out = np.zeros(x.shape)
        if axis == 0:
            out[start:stop, :] = g
        else:
            out[:, start:stop] = g
        return (out,)

    values = x.array[start:stop, :] if axis == 0 else x.array[:, start:stop]
    return _emit(values, (x,), bwd)


# -- random numbers ----------------------------------------------------------


class Rng:
    """Deterministic random stream with documented transforms.

    The raw bit source is numpy's PCG64, whose output stream for a given
    integer seed is fixed by the algorithm (not by numpy version-dependent
    distribution code).  On top of the 53-bit uniforms this class implements:

    * standard normals via the Marsaglia polar method,
    * gammas via Marsaglia-Tsang (2000) squeeze rejection,
    * betas as ``G1 / (G1 + G2)`` of two gammas,

    so the full stream of values is reproducible byte-for-byte across
    platforms and numpy releases.  Independent substreams are derived with
    :meth:`stream`, which XORs an index into the seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def stream(self, index: int) -> "Rng":
        """Independent child stream, e.g. one per episode: ``seed XOR index``."""
        return Rng(self.seed ^ int(index))

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(int(n))

    def integer(self, n: int) -> int:
        """Uniform draw from {0, ..., n-1} via floor(U * n)."""
        if n <= 0:
            raise ValueError("integer() needs n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by the uniform stream."""
        for i in range(len(items) - 1, 0, -1):
            j = min(int(self.uniform() * (i + 1)), i)
            items[i], items[j] = items[j], items[i]

    def standard_normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via the Marsaglia polar method.

        Candidate pairs (u, v) are drawn uniformly on [-1, 1)^2 in batches;
        pairs inside the open unit disc are transformed, in order, and any
        surplus values from the final batch are discarded.  The consumption
        pattern is therefore a pure function of the bit stream.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n)
        filled = 0
        while filled < n:
            k = max(n - filled, 16)
            u = 2.0 * self._gen.random(k) - 1.0
            v = 2.0 * self._gen.random(k) - 1.0
            s = u * u + v * v
            ok = (s > 0.0) & (s < 1.0)
            f = np.sqrt(-2.0 * np.log(s[ok]) / s[ok])
            z = np.concatenate([u[ok] * f, v[ok] * f])
            m = min(z.size, n - filled)
            out[filled:filled + m] = z[:m]
            filled += m
        return out.reshape(shape) if shape else out.reshape(())

    def _gamma(self, alpha: float) -> float:
        """Marsaglia-Tsang gamma(alpha, 1) sampler (scalar)."""
        if alpha < 1.0:
            # boost: Gamma(a) = Gamma(a + 1) * U^(1/a)
            return self._gamma(alpha + 1.0) * self.uniform() ** (1.0 / alpha)
        d = alpha - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = float(self.standard_normal(()))
            t = 1.0 + c * x
            if t <= 0.0:
                continue
            v = t * t * t
            u = self.uniform()
            if u < 1.0 - 0.0331 * x * x * x * x:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def beta(self, alpha: float, beta_: float) -> float:
        """Beta(alpha, beta) draw as a ratio of two gammas."""
        g1 = self._gamma(float(alpha))
        g2 = self._gamma(float(beta_))
        return g1 / (g1 + g2)


def sample_gaussian(rng: Rng, shape) -> Tensor:
    """Tensor of i.i.d. standard normal entries drawn from ``rng``."""
    return Tensor(rng.standard_normal(shape))
