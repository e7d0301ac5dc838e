import numpy as np
import pytest

from robustcs import operators as ops
from robustcs.errors import ConfigurationError, ContractError


def adjoint_gap(apply, adjoint, n_in, n_out, rng, trials=100):
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(n_in)
        y = rng.standard_normal(n_out)
        lhs = np.dot(apply(x), y)
        rhs = np.dot(x, adjoint(y))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return worst


def test_gaussian_operator_deterministic():
    a = ops.sample_gaussian_operator(100, 256, seed=7)
    b = ops.sample_gaussian_operator(100, 256, seed=7)
    assert np.array_equal(a.matrix, b.matrix)
    c = ops.sample_gaussian_operator(100, 256, seed=8)
    assert not np.array_equal(a.matrix, c.matrix)


def test_gaussian_operator_entry_variance():
    a = ops.sample_gaussian_operator(100, 256, seed=1)
    var = a.matrix.var()
    assert abs(var - 0.01) <= 0.001


def test_gaussian_operator_column_norms():
    a = ops.sample_gaussian_operator(100, 256, seed=2)
    mean_sq = np.mean(np.sum(a.matrix**2, axis=0))
    assert abs(mean_sq - 1.0) <= 0.1


def test_gaussian_operator_rejects_overdetermined():
    with pytest.raises(ConfigurationError):
        ops.sample_gaussian_operator(256, 100, seed=0)
    with pytest.raises(ConfigurationError):
        ops.sample_gaussian_operator(100, 100, seed=0)


def test_grad_1d_values():
    np.testing.assert_allclose(ops.grad_1d(np.array([1.0, 1, 1, 1])), [0, 0, 0, 1])
    np.testing.assert_allclose(ops.grad_1d(np.array([1.0, 2, 4, 4])), [1, 2, 0, 2.75])
    np.testing.assert_allclose(ops.grad_1d(np.zeros(5)), np.zeros(5))


def test_grad_1d_matches_matrix():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(12)
    op = ops.GradientOp1D(12)
    np.testing.assert_allclose(op.apply(x), ops.grad_1d(x), atol=1e-14)


def test_grad_1d_rejects_short():
    with pytest.raises(ContractError):
        ops.grad_1d(np.array([1.0]))


def test_grad_1d_jump_count():
    # piecewise constant with 2 jumps -> exactly 2 nonzero differences
    x = np.concatenate([np.zeros(4), np.full(5, 2.0), np.zeros(3)])
    g = ops.grad_1d(x)
    assert np.count_nonzero(g[:-1]) == 2


def test_grad_2d_constant_is_zero():
    np.testing.assert_array_equal(ops.grad_2d(np.full((4, 5), 3.3)), np.zeros(40))


def test_grad_2d_hand_value():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    g = ops.grad_2d(img)
    np.testing.assert_allclose(g[:4], [1, -1, 1, -1])
    np.testing.assert_allclose(g[4:], [0, 0, 0, 0])


def test_grad_2d_matches_matrix():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((4, 6))
    op = ops.GradientOp2D(4, 6)
    np.testing.assert_allclose(op.apply(img), ops.grad_2d(img), atol=1e-14)


def test_adjoint_identities():
    rng = np.random.default_rng(3)
    A = ops.sample_gaussian_operator(100, 256, seed=5)
    assert adjoint_gap(A.apply, A.adjoint, 256, 100, rng) <= 1e-10
    D1 = ops.GradientOp1D(64)
    assert adjoint_gap(D1.apply, D1.adjoint, 64, 64, rng) <= 1e-10
    D2 = ops.GradientOp2D(6, 8)
    assert adjoint_gap(D2.apply, D2.adjoint, 48, 96, rng) <= 1e-10


def test_tikhonov_identity_case():
    A = ops.LinearOperator(np.eye(2))
    zero_grad = ops.LinearOperator(np.zeros((2, 2)))
    tik = ops.tikhonov_inverse(A, zero_grad, alpha=1e-12)
    np.testing.assert_allclose(tik.matrix, np.eye(2), atol=1e-9)


def test_tikhonov_defining_equation():
    rng = np.random.default_rng(4)
    A = ops.LinearOperator(rng.standard_normal((6, 12)) / np.sqrt(6))
    D = ops.GradientOp1D(12)
    tik = ops.tikhonov_inverse(A, D, alpha=0.02)
    K = A.matrix.T @ A.matrix + 0.02 * D.matrix.T @ D.matrix
    resid = np.linalg.norm(K @ tik.matrix - A.matrix.T) / np.linalg.norm(A.matrix.T)
    assert resid <= 1e-8


def test_tikhonov_norm_decreases_with_alpha():
    A = ops.sample_gaussian_operator(6, 12, seed=9)
    D = ops.GradientOp1D(12)
    norms = [
        np.linalg.norm(ops.tikhonov_inverse(A, D, alpha=a).matrix, 2)
        for a in (0.02, 0.2, 2.0)
    ]
    assert norms[0] > norms[1] > norms[2]


def test_tikhonov_rejects_bad_alpha():
    A = ops.sample_gaussian_operator(6, 12, seed=9)
    with pytest.raises(ContractError):
        ops.tikhonov_inverse(A, ops.GradientOp1D(12), alpha=0.0)


def test_operator_roundtrip(tmp_path):
    A = ops.sample_gaussian_operator(10, 24, seed=11)
    path = tmp_path / "op.rxc"
    ops.save_operator(path, A, meta={"seed": 11})
    back = ops.load_operator(path)
    assert isinstance(back, ops.LinearOperator)
    np.testing.assert_array_equal(back.matrix, A.matrix)

    D = ops.GradientOp2D(3, 4)
    ops.save_operator(path, D)
    back = ops.load_operator(path)
    assert isinstance(back, ops.GradientOp2D)
    np.testing.assert_array_equal(back.matrix, D.matrix)
