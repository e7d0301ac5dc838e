import numpy as np
import pytest

from robustcs import autodiff as ad
from robustcs.errors import ContractError, NumericalError, UnsupportedOperationError

from oracles import central_diff_gradient, rel_err


def grad_of(program, x):
    _, g = ad.evaluate_and_gradient(program, x)
    return g


def check_against_fd(program, x, tol=1e-6, step=1e-5):
    value, g = ad.evaluate_and_gradient(program, x)
    fd = central_diff_gradient(lambda z: float(np.asarray(program_eager(program, z))), x, step)
    assert rel_err(g, fd) <= tol, f"autodiff {g} vs fd {fd}"
    return value


def program_eager(program, x):
    # primitives run eagerly on plain arrays, so the same program doubles
    # as the finite-difference target
    out = program(x)
    return out.data if isinstance(out, ad.Var) else out


def test_squared_norm_quadratic_identity():
    value, g = ad.evaluate_and_gradient(lambda v: ad.sumsq(v), np.array([1.0, 2.0]))
    assert value == 5.0
    np.testing.assert_allclose(g, [2.0, 4.0])


def test_relu_sum_mask():
    value, g = ad.evaluate_and_gradient(
        lambda v: ad.vsum(ad.relu(v)), np.array([-1.0, 3.0])
    )
    assert value == 3.0
    np.testing.assert_allclose(g, [0.0, 1.0])


def test_random_composite_matches_finite_differences():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((5, 7))
    b = rng.standard_normal(5)
    x0 = rng.standard_normal(7)

    def program(v):
        h = ad.matmul(M, v)
        h = ad.add(h, b)
        h = ad.relu(h)
        h = ad.soft_threshold(h, 0.3)
        return ad.sumsq(h)

    check_against_fd(program, x0, tol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = 6
    x0 = rng.standard_normal(n)   # constant baked into the programs
    xin = rng.standard_normal(n)  # probe point (must not alias x0)
    M = rng.standard_normal((4, n))
    w = rng.standard_normal(n)
    spd = rng.standard_normal((n, n))
    factor = ad.SpdFactor(spd @ spd.T + n * np.eye(n))
    center = rng.standard_normal(n)

    programs = {
        "add/scale": lambda v: ad.sumsq(ad.add(ad.scale(v, 1.7), x0)),
        "sub": lambda v: ad.sumsq(ad.sub(x0, v)),
        "mul": lambda v: ad.sumsq(ad.mul(v, w)),
        "matmul": lambda v: ad.sumsq(ad.matmul(M, v)),
        "relu": lambda v: ad.sumsq(ad.relu(v)),
        "soft_threshold": lambda v: ad.sumsq(ad.soft_threshold(v, 0.4)),
        "project_inside": lambda v: ad.sumsq(ad.project_l2_ball(v, center, 100.0)),
        "project_outside": lambda v: ad.sumsq(ad.project_l2_ball(v, center, 0.5)),
        "project_center": lambda v: ad.sumsq(ad.project_l2_ball(x0, v, 0.5)),
        "spd_solve": lambda v: ad.sumsq(ad.spd_solve(factor, v)),
        "norm2": lambda v: ad.norm2(ad.add(v, 0.1)),
        "dotprod": lambda v: ad.dotprod(v, w),
        "vexp": lambda v: ad.vsum(ad.vexp(ad.scale(v, 0.3))),
        "vsum": lambda v: ad.vsum(ad.mul(v, v)),
    }
    for name, program in programs.items():
        value, g = ad.evaluate_and_gradient(program, xin)
        fd = central_diff_gradient(lambda z: float(program_eager(program, z)), xin)
        assert rel_err(g, fd) <= 1e-6, f"{name}: {g} vs {fd}"


@pytest.mark.parametrize("seed", range(4))
def test_batched_conv_primitives_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    B, C, L = 2, 3, 8
    x0 = rng.standard_normal((B, C, L))
    w = rng.standard_normal((4, C, 3))
    bias = rng.standard_normal(4)

    def p_conv_x(v):
        return ad.sumsq(ad.conv1d(v, w, bias))

    def p_pool(v):
        return ad.sumsq(ad.maxpool1d(v, 2))

    def p_up(v):
        return ad.sumsq(ad.upsample1d(v, 2))

    other = rng.standard_normal((B, C, L))

    def p_cat(v):
        return ad.sumsq(ad.concat(v, other, axis=1))

    for name, program in [
        ("conv_x", p_conv_x),
        ("pool", p_pool),
        ("up", p_up),
        ("cat", p_cat),
    ]:
        _, g = ad.evaluate_and_gradient(program, x0)
        fd = central_diff_gradient(lambda z: float(program_eager(program, z)), x0)
        assert rel_err(g, fd) <= 1e-6, name

    # gradient with respect to the convolution weights and bias
    def p_conv_w(v):
        return ad.sumsq(ad.conv1d(x0, v, bias))

    _, gw = ad.evaluate_and_gradient(p_conv_w, w)
    fdw = central_diff_gradient(lambda z: float(program_eager(p_conv_w, z)), w)
    assert rel_err(gw, fdw) <= 1e-6

    def p_conv_b(v):
        return ad.sumsq(ad.conv1d(x0, w, v))

    _, gb = ad.evaluate_and_gradient(p_conv_b, bias)
    fdb = central_diff_gradient(lambda z: float(program_eager(p_conv_b, z)), bias)
    assert rel_err(gb, fdb) <= 1e-6


def test_rowwise_primitives_match_finite_differences():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((5, 4))
    idx = rng.integers(0, 4, size=5)

    def p_pick(v):
        return ad.sumsq(ad.pick_rows(v, idx))

    def p_lsm(v):
        return ad.sumsq(ad.log_softmax(v))

    def p_t(v):
        return ad.sumsq(ad.matmul(ad.transpose2d(v), np.arange(5.0)))

    def p_reshape(v):
        return ad.sumsq(ad.reshape(v, (2, 10)))

    for name, program in [
        ("pick_rows", p_pick),
        ("log_softmax", p_lsm),
        ("transpose", p_t),
        ("reshape", p_reshape),
    ]:
        _, g = ad.evaluate_and_gradient(program, x0)
        fd = central_diff_gradient(lambda z: float(program_eager(program, z)), x0)
        assert rel_err(g, fd) <= 1e-6, name


def test_eager_mode_returns_plain_arrays():
    x = np.array([1.0, -2.0])
    out = ad.relu(x)
    assert isinstance(out, np.ndarray)
    np.testing.assert_allclose(out, [1.0, 0.0])


def test_gradient_reaches_only_dependencies():
    tape = ad.Tape()
    a = tape.var(np.array([1.0, 2.0]))
    b = tape.var(np.array([3.0, 4.0]))
    loss = ad.sumsq(a)
    ga, gb = tape.gradient(loss, [a, b])
    np.testing.assert_allclose(ga, [2.0, 4.0])
    np.testing.assert_allclose(gb, [0.0, 0.0])


def test_unknown_primitive_rejected():
    with pytest.raises(UnsupportedOperationError):
        ad.apply_primitive("fft", np.zeros(4))


def test_non_finite_intermediate_names_the_node():
    tape = ad.Tape()
    v = tape.var(np.array([700.0, 800.0]))
    with pytest.raises(NumericalError, match="vexp"):
        ad.vexp(v)


def test_mixed_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.var(np.ones(2))
    b = t2.var(np.ones(2))
    with pytest.raises(ContractError):
        ad.add(a, b)


def test_scalar_output_enforced():
    tape = ad.Tape()
    v = tape.var(np.ones(3))
    out = ad.relu(v)
    with pytest.raises(ContractError):
        tape.gradient(out, v)


def test_grad_accumulates_over_reuse():
    # v used twice: d/dv sum((v + v)^2) = 8 v
    value, g = ad.evaluate_and_gradient(
        lambda v: ad.sumsq(ad.add(v, v)), np.array([1.0, -3.0])
    )
    np.testing.assert_allclose(g, [8.0, -24.0])
