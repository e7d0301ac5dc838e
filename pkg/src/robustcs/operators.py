"""Dense measurement operators, discrete gradients, and Tikhonov inversion.

Everything here is stored as an explicit float64 matrix: the problems in
scope are small enough (N <= 1024) that dense storage buys exact adjoints,
cheap factorizations for the splitting solver, and closed-form inversion
layers.
"""

from __future__ import annotations

import numpy as np

from .container import load_container, save_container
from .errors import ConfigurationError, ContractError, NumericalError

__all__ = [
    "LinearOperator",
    "GradientOp1D",
    "GradientOp2D",
    "TikhonovInverse",
    "sample_gaussian_operator",
    "grad_1d",
    "grad_2d",
    "tikhonov_inverse",
    "save_operator",
    "load_operator",
]


class LinearOperator:
    """A dense forward map y = A x with explicit adjoint.

    ``apply``/``adjoint`` accept single vectors or column-stacked
    batches.  Instances are immutable after construction and safe to
    share across threads.
    """

    def __init__(self, matrix):
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ContractError("operator matrix must be 2D")

    @property
    def m(self):
        return self.matrix.shape[0]

    @property
    def N(self):
        return self.matrix.shape[1]

    def apply(self, x):
        return self.matrix @ np.asarray(x, dtype=np.float64)

    def adjoint(self, y):
        return self.matrix.T @ np.asarray(y, dtype=np.float64)


def sample_gaussian_operator(m, N, seed):
    """Draw a dense operator with i.i.d. Normal(0, 1/m) entries.

    Deterministic given the seed.  Restricted to the underdetermined
    regime m < N; the draw is verified to have full row rank (holds with
    probability one) so constrained recovery is always feasible.
    """
    if not (0 < m < N):
        raise ConfigurationError(f"need 0 < m < N, got m={m}, N={N}")
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((m, N)) / np.sqrt(m)
    if np.linalg.matrix_rank(matrix) < m:
        raise NumericalError("sampled operator is rank deficient")
    return LinearOperator(matrix)


class GradientOp1D:
    """Forward differences with one-sided (Neumann) boundary, plus a mean row.

    Square N x N: rows 0..N-2 are x[i+1] - x[i]; the last row has
    constant entries 1/N, so the final output entry equals the signal
    mean.  The mean row removes the constant vector from the kernel,
    which keeps regularized systems positive definite.
    """

    def __init__(self, N):
        N = int(N)
        if N < 2:
            raise ContractError("GradientOp1D requires N >= 2")
        self.N = N
        mat = np.zeros((N, N))
        idx = np.arange(N - 1)
        mat[idx, idx] = -1.0
        mat[idx, idx + 1] = 1.0
        mat[N - 1, :] = 1.0 / N
        self.matrix = mat

    def apply(self, x):
        return self.matrix @ np.asarray(x, dtype=np.float64)

    def adjoint(self, v):
        return self.matrix.T @ np.asarray(v, dtype=np.float64)


class GradientOp2D:
    """Periodic forward differences of an H x W image, stacked (2*H*W, H*W).

    The first H*W output entries are horizontal (along rows, wrapping),
    the second H*W are vertical.  A constant image maps to zero.
    """

    def __init__(self, H, W):
        H, W = int(H), int(W)
        if H < 2 or W < 2:
            raise ContractError("GradientOp2D requires H, W >= 2")
        self.H, self.W = H, W
        n = H * W
        grid = np.arange(n).reshape(H, W)
        right = np.roll(grid, -1, axis=1).ravel()
        down = np.roll(grid, -1, axis=0).ravel()
        mat = np.zeros((2 * n, n))
        rows = np.arange(n)
        mat[rows, rows] = -1.0
        mat[rows, right] = 1.0
        mat[n + rows, rows] = -1.0
        mat[n + rows, down] = 1.0
        self.matrix = mat

    @property
    def N(self):
        return self.H * self.W

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2 and x.shape == (self.H, self.W):
            x = x.ravel()
        return self.matrix @ x

    def adjoint(self, v):
        return self.matrix.T @ np.asarray(v, dtype=np.float64)


def grad_1d(x):
    """Finite differences of a 1D signal, final entry the mean."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ContractError("grad_1d expects a 1D signal of length >= 2")
    out = np.empty_like(x)
    out[:-1] = np.diff(x)
    out[-1] = x.mean()
    return out


def grad_2d(x):
    """Periodic forward differences of an image, horizontal then vertical."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 2:
        raise ContractError("grad_2d expects an H x W image with H, W >= 2")
    dh = np.roll(x, -1, axis=1) - x
    dv = np.roll(x, -1, axis=0) - x
    return np.concatenate([dh.ravel(), dv.ravel()])


class TikhonovInverse:
    """Regularized linear inversion T = (A^T A + alpha D^T D)^{-1} A^T.

    ``matrix`` is the explicit N x m map; applying it to measurements
    gives the model-based initial reconstruction used by the learned
    pipelines.
    """

    def __init__(self, matrix, alpha):
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        self.alpha = float(alpha)

    @property
    def N(self):
        return self.matrix.shape[0]

    @property
    def m(self):
        return self.matrix.shape[1]

    def apply(self, y):
        return self.matrix @ np.asarray(y, dtype=np.float64)


def tikhonov_inverse(A, grad, alpha):
    """Build the explicit Tikhonov inversion matrix for operator ``A``.

    ``grad`` supplies the smoothing penalty (its ``matrix`` attribute is
    used; pass a zero matrix for plain ridge inversion).  The result is
    checked against its defining equation to a relative Frobenius
    residual of 1e-8.
    """
    if alpha <= 0:
        raise ContractError("tikhonov_inverse requires alpha > 0")
    Am = A.matrix
    Dm = grad.matrix if hasattr(grad, "matrix") else np.asarray(grad, dtype=np.float64)
    K = Am.T @ Am + alpha * (Dm.T @ Dm)
    try:
        T = np.linalg.solve(K, Am.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"singular regularized system (cond ~ {np.linalg.cond(K):.3e})"
        ) from exc
    residual = np.linalg.norm(K @ T - Am.T) / np.linalg.norm(Am.T)
    if residual > 1e-8:
        raise NumericalError(
            f"inversion residual {residual:.3e} exceeds 1e-8 "
            f"(cond ~ {np.linalg.cond(K):.3e})"
        )
    return TikhonovInverse(T, alpha)


def save_operator(path, op, meta=None):
    info = {"kind": type(op).__name__}
    if isinstance(op, GradientOp2D):
        info["H"], info["W"] = op.H, op.W
    info.update(meta or {})
    save_container(path, {"matrix": op.matrix}, info)


def load_operator(path):
    arrays, meta = load_container(path)
    kind = meta.get("kind", "LinearOperator")
    mat = arrays["matrix"]
    if kind == "GradientOp1D":
        op = GradientOp1D(mat.shape[0])
    elif kind == "GradientOp2D":
        op = GradientOp2D(meta["H"], meta["W"])
    elif kind == "TikhonovInverse":
        return TikhonovInverse(mat, meta.get("alpha", 0.0))
    else:
        return LinearOperator(mat)
    if not np.array_equal(op.matrix, mat):
        op.matrix = mat
    return op
