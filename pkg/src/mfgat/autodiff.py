"""Dense 2-D tensors with a reverse-mode tape.

Every value is a float64 ``numpy`` array with exactly two dimensions; vectors
are ``1 x d`` rows.  A :class:`Tape` records each primitive as it runs and
:meth:`Tape.backward` replays the records in reverse, accumulating gradients
into the participating :class:`Var` objects.  A tape is used for a single
forward/backward pass and is consumed by ``backward``.

Randomness goes through :class:`RngStream` (numpy's PCG64 bit generator seeded
via ``SeedSequence``), so identical seeds give identical draws everywhere.
"""
from __future__ import annotations

import zlib
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "NonDeterministicError",
    "RngStream",
    "Tape",
    "Var",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "getitem",
    "hconcat",
    "vconcat",
    "sum_all",
    "row_sum",
    "col_mean",
    "mean",
    "relu",
    "leaky_relu",
    "elu",
    "masked_softmax",
    "layer_norm",
    "dropout",
    "cross_entropy_loss",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class NonDeterministicError(RuntimeError):
    """A function handed to :func:`grad_check` returned different values for the same input."""


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array (scalars become 1x1, vectors 1xd)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class RngStream:
    """Deterministic random stream: PCG64 seeded through ``numpy.random.SeedSequence``.

    Child streams are derived from a path of string keys hashed with CRC-32,
    so ``RngStream(7).child("dropout")`` is the same stream on every platform
    and in every process.
    """

    ALGORITHM = "PCG64"

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(key)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def child(self, *names: str | int) -> "RngStream":
        key = self.key + tuple(zlib.crc32(str(n).encode()) for n in names)
        return RngStream(self.seed, key)

    def random(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key}, algorithm={self.ALGORITHM})"


class Var:
    """A tensor enrolled on a tape: value, accumulated gradient and provenance."""

    __slots__ = ("value", "_grad", "tape", "op", "parents", "requires_grad", "name", "_backward")

    def __init__(self, value: np.ndarray, tape: "Tape", op: str = "leaf",
                 parents: tuple["Var", ...] = (), requires_grad: bool = False,
                 name: str | None = None):
        self.value = value
        self._grad: np.ndarray | None = None
        self.tape = tape
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def _accum(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    # operator sugar; the named functions below are the primitives
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(op={self.op}, shape={self.shape})"


class Tape:
    """Records primitives in execution order for one forward/backward pass."""

    def __init__(self):
        self.records: list[Var] = []
        self.leaves: dict[str, Var] = {}
        self.consumed = False

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Var:
        v = Var(as_tensor(value), self, requires_grad=requires_grad, name=name)
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = v
        return v

    def constant(self, value) -> Var:
        return Var(as_tensor(value), self, op="const")

    def params(self, params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Var]:
        return {k: self.leaf(v, name=k, requires_grad=requires_grad) for k, v in params.items()}

    def _emit(self, op: str, value: np.ndarray, parents: tuple[Var, ...],
              backward: Callable[[np.ndarray], None]) -> Var:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); start a new tape")
        req = any(p.requires_grad for p in parents)
        out = Var(value, self, op, parents, requires_grad=req)
        if req:
            out._backward = backward
            self.records.append(out)
        return out

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Back-propagate from a 1x1 ``loss``; returns gradients of named leaves.

        The tape is consumed afterwards.
        """
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 scalar loss, got {loss.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        loss._grad = np.ones((1, 1))
        for node in reversed(self.records):
            if node._grad is not None and node._backward is not None:
                node._backward(node._grad)
        self.consumed = True
        self.records = []
        return {k: v.grad for k, v in self.leaves.items() if v.requires_grad}


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands belong to different tapes")
    if tape is None:
        raise TypeError("at least one operand must be a Var")
    return tape


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (2-D broadcasting along unit dimensions)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return tape._emit("add", a.value + b.value, (a, b), backward)


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return tape._emit("sub", a.value - b.value, (a, b), backward)


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.shape))

    return tape._emit("mul", a.value * b.value, (a, b), backward)


def scale(x: Var, c: float) -> Var:
    c = float(c)

    def backward(g):
        x._accum(g * c)

    return x.tape._emit("scale", x.value * c, (x,), backward)


def neg(x: Var) -> Var:
    return scale(x, -1.0)


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.value.T)
        if b.requires_grad:
            b._accum(a.value.T @ g)

    return tape._emit("matmul", a.value @ b.value, (a, b), backward)


def transpose(x: Var) -> Var:
    def backward(g):
        x._accum(g.T)

    return x.tape._emit("transpose", np.ascontiguousarray(x.value.T), (x,), backward)


def getitem(x: Var, rows=slice(None), cols=slice(None)) -> Var:
    """Slice a block ``x[rows, cols]``; integer indices keep the dimension."""
    rows = slice(rows, rows + 1) if isinstance(rows, int) else rows
    cols = slice(cols, cols + 1) if isinstance(cols, int) else cols
    out = x.value[rows, cols]
    if out.size == 0:
        raise ShapeError(f"empty slice of tensor with shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.value)
        full[rows, cols] = g
        x._accum(full)

    return x.tape._emit("getitem", np.array(out), (x,), backward)


def hconcat(xs: Iterable[Var]) -> Var:
    """Concatenate along columns, ``[x1 || x2 || ...]``."""
    xs = list(xs)
    if not xs:
        raise ShapeError("hconcat of nothing")
    tape = _tape_of(*xs)
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise ShapeError(f"hconcat row counts differ: {sorted(rows)}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accum(g[:, lo:hi])

    return tape._emit("hconcat", np.hstack([x.value for x in xs]), tuple(xs), backward)


def vconcat(xs: Iterable[Var]) -> Var:
    xs = list(xs)
    if not xs:
        raise ShapeError("vconcat of nothing")
    tape = _tape_of(*xs)
    cols = {x.shape[1] for x in xs}
    if len(cols) != 1:
        raise ShapeError(f"vconcat column counts differ: {sorted(cols)}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accum(g[lo:hi, :])

    return tape._emit("vconcat", np.vstack([x.value for x in xs]), tuple(xs), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Var) -> Var:
    def backward(g):
        x._accum(np.broadcast_to(g, x.shape))

    return x.tape._emit("sum", np.array([[x.value.sum()]]), (x,), backward)


def row_sum(x: Var) -> Var:
    """Sum across columns: ``n x d -> n x 1``."""
    def backward(g):
        x._accum(np.broadcast_to(g, x.shape))

    return x.tape._emit("row_sum", x.value.sum(axis=1, keepdims=True), (x,), backward)


def col_mean(x: Var) -> Var:
    """Average the rows: ``n x d -> 1 x d``."""
    n = x.shape[0]

    def backward(g):
        x._accum(np.broadcast_to(g / n, x.shape))

    return x.tape._emit("col_mean", x.value.mean(axis=0, keepdims=True), (x,), backward)


def mean(x: Var) -> Var:
    size = x.value.size

    def backward(g):
        x._accum(np.broadcast_to(g / size, x.shape))

    return x.tape._emit("mean", np.array([[x.value.mean()]]), (x,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Var) -> Var:
    pos = x.value > 0

    def backward(g):
        x._accum(g * pos)

    return x.tape._emit("relu", np.where(pos, x.value, 0.0), (x,), backward)


def leaky_relu(x: Var, slope: float = 0.2) -> Var:
    """``x`` where ``x >= 0`` else ``slope * x``; derivative at 0 taken as 1."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    pos = x.value >= 0
    factor = np.where(pos, 1.0, slope)

    def backward(g):
        x._accum(g * factor)

    return x.tape._emit("leaky_relu", x.value * factor, (x,), backward)


def elu(x: Var, alpha: float = 1.0) -> Var:
    pos = x.value > 0
    em1 = np.expm1(np.minimum(x.value, 0.0))
    out = np.where(pos, x.value, alpha * em1)

    def backward(g):
        x._accum(g * np.where(pos, 1.0, alpha * (em1 + 1.0)))

    return x.tape._emit("elu", out, (x,), backward)


def masked_softmax(scores: Var, mask) -> Var:
    """Row-wise softmax restricted to ``mask``; masked-out entries are exactly 0.

    ``mask`` is a boolean array broadcastable to ``scores`` (a 1-D mask of
    length ``n`` applies to a ``1 x n`` score row).  Every row needs at least
    one ``True`` entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask.reshape(1, -1)
    mask = np.broadcast_to(mask, scores.shape)
    if not mask.any(axis=1).all():
        raise ValueError("masked_softmax: a row has an empty mask")
    s = np.where(mask, scores.value, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        scores._accum(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return scores.tape._emit("masked_softmax", y, (scores,), backward)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Row-wise ``(x - mean) / (std + eps) * gamma + beta`` with population std.

    ``eps`` is added to the standard deviation, not to the variance.
    """
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"gamma/beta must be 1x{d}, got {gamma.shape} and {beta.shape}")
    xc = x.value - x.value.mean(axis=1, keepdims=True)
    # rounding in the mean must not leak into constant rows
    xc[np.ptp(x.value, axis=1) == 0] = 0.0
    sigma = np.sqrt((xc * xc).mean(axis=1, keepdims=True))
    denom = sigma + eps
    xhat = xc / denom
    out = xhat * gamma.value + beta.value

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0, keepdims=True))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gh = g * gamma.value
            dxc = gh / denom
            # d sigma / d xc = xc / (d * sigma); zero when the row is constant
            safe = np.where(sigma > 0, sigma, 1.0)
            dsig = -(gh * xc).sum(axis=1, keepdims=True) / denom**2
            dxc = dxc + dsig * np.where(sigma > 0, xc / (d * safe), 0.0)
            x._accum(dxc - dxc.mean(axis=1, keepdims=True))

    return x.tape._emit("layer_norm", out, (x, gamma, beta), backward)


def dropout(x: Var, p: float, train: bool, rng: RngStream | None = None,
            rescale: bool = True) -> Var:
    """Zero each entry with probability ``p`` in training mode.

    Survivors are scaled by ``1/(1-p)`` unless ``rescale`` is False.  In eval
    mode (or with ``p == 0``) the input Var itself is returned.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngStream")
    keep = rng.random(x.shape) >= p
    factor = keep / (1.0 - p) if rescale else keep.astype(np.float64)

    def backward(g):
        x._accum(g * factor)

    return x.tape._emit("dropout", x.value * factor, (x,), backward)


def cross_entropy_loss(logits: Var, label: int) -> Var:
    """``-log softmax(logits)[label]`` for a single ``1 x C`` logit row."""
    if logits.shape[0] != 1:
        raise ShapeError(f"cross_entropy_loss takes a 1xC row, got {logits.shape}")
    c = logits.shape[1]
    if not 0 <= int(label) < c:
        raise ValueError(f"label {label} out of range for {c} classes")
    z = logits.value[0]
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    loss = lse - z[label]
    probs = np.exp(z - lse)

    def backward(g):
        grad = probs.copy()
        grad[label] -= 1.0
        logits._accum(g * grad.reshape(1, -1))

    return logits.tape._emit("cross_entropy", np.array([[loss]]), (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[Tape, dict[str, Var]], Var], params: Mapping[str, np.ndarray],
               h: float = 1e-5, details: bool = False):
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f(tape, leaves)`` must build its 1x1 output on ``tape`` from the named
    leaves.  Returns the max over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``; with
    ``details=True`` also a per-parameter dict of the same quantity.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: as_tensor(v).copy() for k, v in params.items()}

    def value(p: Mapping[str, np.ndarray]) -> float:
        tape = Tape()
        out = f(tape, tape.params(p, requires_grad=False))
        if out.shape != (1, 1):
            raise ShapeError(f"grad_check needs a scalar function, got {out.shape}")
        return float(out.value[0, 0])

    tape = Tape()
    loss = f(tape, tape.params(base))
    f0 = float(loss.value[0, 0])
    analytic = tape.backward(loss)
    if value(base) != f0:
        raise NonDeterministicError("function changed value between identical calls; fix its RNG state")

    errors: dict[str, float] = {}
    for name, theta in base.items():
        worst = 0.0
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            fp = value(base)
            theta[idx] = orig - h
            fm = value(base)
            theta[idx] = orig
            num = (fp - fm) / (2 * h)
            an = analytic[name][idx]
            worst = max(worst, abs(an - num) / max(1.0, abs(an), abs(num)))
        errors[name] = worst
    total = max(errors.values(), default=0.0)
    return (total, errors) if details else total
