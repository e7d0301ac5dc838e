"""Tape-based reverse-mode differentiation over dense double-precision arrays.

The engine is deliberately small: a fixed registry of primitives (dense
matrix products, 1D convolution building blocks, ReLU, soft-thresholding,
ball projection, norms, and a linear solve against a stored factorization)
is enough to differentiate unrolled splitting schemes and small
convolutional reconstruction networks with respect to their measurement
inputs and parameters.

Values attached to a live :class:`Tape` are wrapped in :class:`Var`.  Every
primitive applied to at least one tape variable records a node; nodes are
appended in creation order, which is a topological order by construction,
and :meth:`Tape.gradient` replays them exactly once in reverse.  Primitives
applied to plain arrays evaluate eagerly and return plain arrays, so the
same code path serves both recorded and unrecorded evaluation.

All arithmetic is float64.  Primitives verify that their outputs are
finite and raise :class:`~robustcs.errors.NumericalError` naming the
offending operation otherwise.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, NumericalError, UnsupportedOperationError

__all__ = [
    "Tape",
    "Var",
    "SpdFactor",
    "evaluate_and_gradient",
    "apply_primitive",
    "PRIMITIVES",
]


class Var:
    """A tensor value attached to a tape (or a detached constant)."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, tape={'live' if self.tape else 'none'})"

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
        return scale(self, -1.0)


class _Node:
    __slots__ = ("name", "out", "vjp")

    def __init__(self, name, out, vjp):
        self.name = name
        self.out = out
        self.vjp = vjp


class Tape:
    """Records primitive applications for a single reverse-mode sweep.

    A tape is single-owner: it must not be shared across concurrent
    tasks.  Nodes form a topological order because an operation can only
    consume values that already exist.
    """

    def __init__(self):
        self.nodes = []
        self.live = True

    def var(self, value):
        """Attach ``value`` to this tape so gradients can flow to it."""
        if not self.live:
            raise ContractError("cannot create variables on a closed tape")
        return Var(value, self)

    def close(self):
        self.live = False

    def release(self):
        """Drop recorded nodes so their buffers free immediately.

        Var/tape/node references form cycles that otherwise wait for the
        cycle collector while holding large arrays; hot loops call this
        once the gradients of a step are out.
        """
        self.live = False
        self.nodes.clear()

    def gradient(self, output, inputs):
        """Gradient of a scalar ``output`` with respect to ``inputs``.

        Walks the node list once in reverse creation order, accumulating
        vector-Jacobian products.  Returns one array per input (or a
        single array if ``inputs`` is a single Var); inputs the output
        does not depend on receive zero gradients.
        """
        if not self.live:
            raise ContractError("tape is not live")
        if not isinstance(output, Var) or output.tape is not self:
            raise ContractError("output is not recorded on this tape")
        if output.data.size != 1:
            raise ContractError("gradient target must be a scalar")
        single = isinstance(inputs, Var)
        targets = [inputs] if single else list(inputs)
        for v in targets:
            if not isinstance(v, Var) or v.tape is not self:
                raise ContractError("gradient inputs must be variables of this tape")

        grads = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for v, gin in node.vjp(g):
                if not np.all(np.isfinite(gin)):
                    raise NumericalError(
                        f"non-finite gradient produced by primitive '{node.name}'"
                    )
                acc = grads.get(id(v))
                grads[id(v)] = gin if acc is None else acc + gin
        out = [grads.get(id(v), np.zeros_like(v.data)) for v in targets]
        return out[0] if single else out


def _value(a):
    if isinstance(a, Var):
        return a.data
    return np.asarray(a, dtype=np.float64)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var) and a.tape is not None and a.tape.live:
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ContractError("operands belong to different live tapes")
    return tape


def _tracked(a, tape):
    return tape is not None and isinstance(a, Var) and a.tape is tape


def _emit(name, tape, out_data, vjp):
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"non-finite values produced by primitive '{name}'")
    if tape is None:
        return out_data
    out = Var(out_data, tape)
    tape.nodes.append(_Node(name, out, vjp))
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


PRIMITIVES = {}


def _primitive(fn):
    PRIMITIVES[fn.__name__] = fn
    return fn


def apply_primitive(name, *args, **kwargs):
    """Dispatch a primitive by name; unknown names are rejected."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise UnsupportedOperationError(
            f"'{name}' is not a registered differentiable primitive"
        ) from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# elementwise and shape primitives


@_primitive
def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av + bv

    def vjp(g):
        pairs = []
        if _tracked(a, tape):
            pairs.append((a, _unbroadcast(g, av.shape)))
        if _tracked(b, tape):
            pairs.append((b, _unbroadcast(g, bv.shape)))
        return pairs

    return _emit("add", tape, out, vjp)


@_primitive
def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av - bv

    def vjp(g):
        pairs = []
        if _tracked(a, tape):
            pairs.append((a, _unbroadcast(g, av.shape)))
        if _tracked(b, tape):
            pairs.append((b, _unbroadcast(-g, bv.shape)))
        return pairs

    return _emit("sub", tape, out, vjp)


@_primitive
def mul(a, b):
    """Elementwise (broadcasting) product; either factor may be tracked."""
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av * bv

    def vjp(g):
        pairs = []
        if _tracked(a, tape):
            pairs.append((a, _unbroadcast(g * bv, av.shape)))
        if _tracked(b, tape):
            pairs.append((b, _unbroadcast(g * av, bv.shape)))
        return pairs

    return _emit("mul", tape, out, vjp)


@_primitive
def scale(a, c):
    """Multiply by a constant python scalar."""
    tape = _tape_of(a)
    av = _value(a)
    c = float(c)
    out = av * c

    def vjp(g):
        return [(a, g * c)] if _tracked(a, tape) else []

    return _emit("scale", tape, out, vjp)


@_primitive
def relu(a):
    tape = _tape_of(a)
    av = _value(a)
    out = np.maximum(av, 0.0)

    def vjp(g):
        return [(a, g * (av > 0.0))] if _tracked(a, tape) else []

    return _emit("relu", tape, out, vjp)


@_primitive
def vexp(a):
    tape = _tape_of(a)
    av = _value(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericalError below
        out = np.exp(av)

    def vjp(g):
        return [(a, g * out)] if _tracked(a, tape) else []

    return _emit("vexp", tape, out, vjp)


@_primitive
def soft_threshold(a, tau):
    """Shrink towards zero: sign(a) * max(|a| - tau, 0), elementwise.

    The proximal map of ``tau * |.|_1``.  Differentiable almost
    everywhere with derivative 1 outside the dead zone, 0 inside.
    """
    tau = float(tau)
    if tau < 0:
        raise ContractError("soft_threshold requires tau >= 0")
    tape = _tape_of(a)
    av = _value(a)
    out = np.sign(av) * np.maximum(np.abs(av) - tau, 0.0)

    def vjp(g):
        return [(a, g * (np.abs(av) > tau))] if _tracked(a, tape) else []

    return _emit("soft_threshold", tape, out, vjp)


@_primitive
def project_l2_ball(p, center, radius):
    """Euclidean projection onto the ball of ``radius`` around ``center``.

    1D inputs are treated as a single vector; 2D inputs are projected
    column by column (each column owns its own center column).  Both the
    point and the center may carry gradients; the radius is constant.

    Points within a relative 1e-12 of the boundary count as inside, which
    makes the projection exactly idempotent in floating point.
    """
    radius = float(radius)
    if radius < 0:
        raise ContractError("project_l2_ball requires radius >= 0")
    rtol = radius * (1.0 + 1e-12)
    tape = _tape_of(p, center)
    pv, cv = _value(p), _value(center)
    d = pv - cv
    if d.ndim == 1:
        nrm = np.linalg.norm(d)
        s = 1.0 if nrm <= rtol else radius / nrm
        out = cv + s * d

        def vjp(g):
            if nrm <= rtol:
                gp = g
            else:
                gp = s * (g - d * (d @ g) / (nrm * nrm))
            pairs = []
            if _tracked(p, tape):
                pairs.append((p, gp))
            if _tracked(center, tape):
                pairs.append((center, g - gp))
            return pairs

    else:
        nrm = np.linalg.norm(d, axis=0)
        inside = nrm <= rtol
        s = np.where(inside, 1.0, radius / np.maximum(nrm, np.finfo(float).tiny))
        out = cv + s * d

        def vjp(g):
            dg = np.sum(d * g, axis=0)
            n2 = np.maximum(nrm * nrm, np.finfo(float).tiny)
            gp = np.where(inside, g, s * (g - d * (dg / n2)))
            pairs = []
            if _tracked(p, tape):
                pairs.append((p, gp))
            if _tracked(center, tape):
                pairs.append((center, g - gp))
            return pairs

    return _emit("project_l2_ball", tape, out, vjp)


@_primitive
def matmul(a, b):
    """Dense product of a 2D matrix with a vector or matrix."""
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av @ bv

    def vjp(g):
        pairs = []
        if _tracked(a, tape):
            ga = np.outer(g, bv) if bv.ndim == 1 else g @ bv.T
            pairs.append((a, ga))
        if _tracked(b, tape):
            pairs.append((b, av.T @ g))
        return pairs

    return _emit("matmul", tape, out, vjp)


@_primitive
def batch_matmul(w, x):
    """Product of a 2D weight (Co, Ci) with a batch (B, Ci, L) -> (B, Co, L)."""
    tape = _tape_of(w, x)
    wv, xv = _value(w), _value(x)
    out = np.matmul(wv, xv)

    def vjp(g):
        pairs = []
        if _tracked(w, tape):
            pairs.append((w, np.matmul(g, xv.transpose(0, 2, 1)).sum(axis=0)))
        if _tracked(x, tape):
            pairs.append((x, np.matmul(wv.T, g)))
        return pairs

    return _emit("batch_matmul", tape, out, vjp)


@_primitive
def unfold1d(x, kernel):
    """Zero-padded sliding windows: (B, C, L) -> (B, C*kernel, L).

    Column j of the output stacks x[:, :, j-p : j-p+kernel] with
    p = kernel // 2, the layout consumed by a matrix-product convolution.
    """
    kernel = int(kernel)
    if kernel % 2 != 1:
        raise ContractError("unfold1d requires an odd kernel")
    tape = _tape_of(x)
    xv = _value(x)
    if xv.ndim != 3:
        raise ContractError("unfold1d expects a (B, C, L) array")
    b, c, n = xv.shape
    p = kernel // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p)))
    # row i*kernel + k of a column holds channel i shifted by k - p, the
    # layout matched by reshaping (Co, Ci, K) weights to (Co, Ci*K)
    out = np.empty((b, c * kernel, n))
    for k in range(kernel):
        out[:, k::kernel, :] = xp[:, :, k : k + n]

    def vjp(g):
        if not _tracked(x, tape):
            return []
        gx = np.zeros((b, c, n + 2 * p))
        for k in range(kernel):
            gx[:, :, k : k + n] += g[:, k::kernel, :]
        return [(x, gx[:, :, p : p + n])]

    return _emit("unfold1d", tape, out, vjp)


@_primitive
def maxpool1d(x, width=2):
    """Non-overlapping max pooling along the last axis of (B, C, L)."""
    width = int(width)
    tape = _tape_of(x)
    xv = _value(x)
    b, c, n = xv.shape
    if n % width != 0:
        raise ContractError(f"length {n} not divisible by pool width {width}")
    xr = xv.reshape(b, c, n // width, width)
    idx = xr.argmax(axis=3)
    out = np.take_along_axis(xr, idx[..., None], axis=3)[..., 0]

    def vjp(g):
        if not _tracked(x, tape):
            return []
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=3)
        return [(x, gr.reshape(b, c, n))]

    return _emit("maxpool1d", tape, out, vjp)


@_primitive
def upsample1d(x, factor=2):
    """Nearest-neighbour repetition along the last axis of (B, C, L)."""
    factor = int(factor)
    tape = _tape_of(x)
    xv = _value(x)
    out = np.repeat(xv, factor, axis=2)

    def vjp(g):
        if not _tracked(x, tape):
            return []
        b, c, n = xv.shape
        return [(x, g.reshape(b, c, n, factor).sum(axis=3))]

    return _emit("upsample1d", tape, out, vjp)


@_primitive
def concat(a, b, axis=1):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = np.concatenate([av, bv], axis=axis)
    na = av.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [na], axis=axis)
        pairs = []
        if _tracked(a, tape):
            pairs.append((a, ga))
        if _tracked(b, tape):
            pairs.append((b, gb))
        return pairs

    return _emit("concat", tape, out, vjp)


@_primitive
def reshape(x, shape):
    tape = _tape_of(x)
    xv = _value(x)
    out = xv.reshape(shape)

    def vjp(g):
        return [(x, g.reshape(xv.shape))] if _tracked(x, tape) else []

    return _emit("reshape", tape, out, vjp)


@_primitive
def transpose2d(x):
    tape = _tape_of(x)
    xv = _value(x)
    out = xv.T.copy()

    def vjp(g):
        return [(x, g.T.copy())] if _tracked(x, tape) else []

    return _emit("transpose2d", tape, out, vjp)


@_primitive
def pick_rows(x, idx):
    """Select x[i, idx[i]] for each row of a 2D array -> 1D values."""
    tape = _tape_of(x)
    xv = _value(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take_along_axis(xv, idx[:, None], axis=1)[:, 0]

    def vjp(g):
        if not _tracked(x, tape):
            return []
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, idx[:, None], g[:, None], axis=1)
        return [(x, gx)]

    return _emit("pick_rows", tape, out, vjp)


@_primitive
def log_softmax(x):
    """Row-wise log-softmax of a 2D array (B, K)."""
    tape = _tape_of(x)
    xv = _value(x)
    shift = xv - xv.max(axis=1, keepdims=True)
    out = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))

    def vjp(g):
        if not _tracked(x, tape):
            return []
        sm = np.exp(out)
        return [(x, g - sm * g.sum(axis=1, keepdims=True))]

    return _emit("log_softmax", tape, out, vjp)


# ---------------------------------------------------------------------------
# reductions


@_primitive
def vsum(x):
    tape = _tape_of(x)
    xv = _value(x)
    out = np.asarray(xv.sum())

    def vjp(g):
        return [(x, np.broadcast_to(g, xv.shape).copy())] if _tracked(x, tape) else []

    return _emit("vsum", tape, out, vjp)


@_primitive
def sumsq(x):
    """Sum of squared entries (squared Frobenius norm)."""
    tape = _tape_of(x)
    xv = _value(x)
    out = np.asarray(np.sum(xv * xv))

    def vjp(g):
        return [(x, 2.0 * g * xv)] if _tracked(x, tape) else []

    return _emit("sumsq", tape, out, vjp)


@_primitive
def norm2(x):
    """Euclidean norm of all entries; gradient is taken as 0 at the origin."""
    tape = _tape_of(x)
    xv = _value(x)
    n = np.linalg.norm(xv.ravel())
    out = np.asarray(n)

    def vjp(g):
        if not _tracked(x, tape):
            return []
        if n == 0.0:
            return [(x, np.zeros_like(xv))]
        return [(x, g * xv / n)]

    return _emit("norm2", tape, out, vjp)


@_primitive
def dotprod(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = np.asarray(np.sum(av * bv))

    def vjp(g):
        pairs = []
        if _tracked(a, tape):
            pairs.append((a, g * bv))
        if _tracked(b, tape):
            pairs.append((b, g * av))
        return pairs

    return _emit("dotprod", tape, out, vjp)


# ---------------------------------------------------------------------------
# linear solve against a stored factorization


class SpdFactor:
    """Cholesky factorization of a symmetric positive-definite matrix.

    Factor once, then solve many right-hand sides.  The matrix itself is
    treated as a constant of the computation; gradients flow through the
    right-hand side via the (self-adjoint) inverse.
    """

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ContractError("SpdFactor requires a square matrix")
        try:
            self._cho = cho_factor(matrix)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises LinAlgError
            raise NumericalError(f"matrix is not positive definite: {exc}") from exc
        self.n = matrix.shape[0]

    def solve(self, b):
        # finiteness of inputs/outputs is enforced by the primitives
        return cho_solve(self._cho, np.asarray(b, dtype=np.float64),
                         check_finite=False)


@_primitive
def spd_solve(factor, b):
    """Solve K x = b where K is a stored SPD factorization."""
    if not isinstance(factor, SpdFactor):
        raise ContractError("spd_solve expects an SpdFactor")
    tape = _tape_of(b)
    bv = _value(b)
    out = factor.solve(bv)

    def vjp(g):
        return [(b, factor.solve(g))] if _tracked(b, tape) else []

    return _emit("spd_solve", tape, out, vjp)


# ---------------------------------------------------------------------------
# composite convolution


def conv1d(x, w, b=None):
    """1D convolution with zero padding, built from registered primitives.

    ``x`` is (B, Ci, L), ``w`` is (Co, Ci, K) with odd K, ``b`` is (Co,).
    Returns (B, Co, L).  Gradients flow to whichever of x, w, b are
    tracked.
    """
    wv = _value(w)
    co, ci, k = wv.shape
    cols = unfold1d(x, k)
    w2 = reshape(w, (co, ci * k))
    out = batch_matmul(w2, cols)
    if b is not None:
        out = add(out, reshape(b, (co, 1)))
    return out


def evaluate_and_gradient(program, x):
    """Evaluate a scalar program and its exact reverse-mode gradient.

    ``program`` must map a tape variable to a scalar using registered
    primitives only.  Returns ``(value, gradient)`` where the gradient is
    with respect to ``x``.
    """
    tape = Tape()
    xv = tape.var(x)
    out = program(xv)
    if not isinstance(out, Var) or out.tape is not tape:
        raise ContractError("program output is not recorded on the tape")
    if out.data.size != 1:
        raise ContractError("program must return a scalar")
    grad = tape.gradient(out, xv)
    return float(out.data), grad
