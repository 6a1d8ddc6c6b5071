import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from evcal import nls, so3
from evcal.errors import InvalidArgumentError, InvalidProblemError


def rosenbrock_problem(x0, sparse=False):
    block = nls.ParameterBlock(np.array(x0, dtype=float))

    def evaluate(values, need_jac):
        x, y = values[0]
        r = np.array([10.0 * (y - x * x), 1.0 - x])
        if not need_jac:
            return r, None
        J = np.array([[-20.0 * x, 10.0], [-1.0, 0.0]])
        return r, sp.csr_matrix(J) if sparse else J

    return nls.Problem([block], evaluate)


@pytest.mark.parametrize("sparse", [False, True])
def test_rosenbrock(sparse):
    prob = rosenbrock_problem([-1.2, 1.0], sparse)
    report = nls.solve(prob, options=nls.SolverOptions(max_iterations=200, function_tolerance=1e-16))
    assert report.success
    assert np.allclose(prob.blocks[0].value, [1.0, 1.0], atol=1e-6)
    assert report.final_cost < report.initial_cost


def test_numeric_fallback_jacobian():
    block = nls.ParameterBlock([-1.2, 1.0])

    def evaluate(values, need_jac):
        x, y = values[0]
        return np.array([10.0 * (y - x * x), 1.0 - x]), None

    prob = nls.Problem([block], evaluate)
    nls.solve(prob, options=nls.SolverOptions(max_iterations=300, function_tolerance=1e-16))
    assert np.allclose(prob.blocks[0].value, [1.0, 1.0], atol=1e-4)


def chordal_mean(Rs):
    """Brute-force rotation average: minimize sum |log(R^T R_i)|^2 over a
    dense grid refined by coordinate search (an oracle independent of LM)."""
    best = so3.project_to_rotation(np.sum(Rs, axis=0))
    step = 0.05
    cost = lambda R: np.sum(np.linalg.norm(so3.so3_log(np.swapaxes(R, -1, -2) @ Rs, check=False), axis=1) ** 2)  # noqa: E731
    c_best = cost(best)
    while step > 1e-9:
        improved = False
        for a in range(3):
            for s in (1, -1):
                d = np.zeros(3)
                d[a] = s * step
                cand = best @ so3.so3_exp(d)
                c = cost(cand)
                if c < c_best:
                    best, c_best, improved = cand, c, True
        if not improved:
            step *= 0.5
    return best


def test_rotation_averaging_matches_brute_force():
    rng = np.random.default_rng(0)
    center = so3.so3_exp([0.4, -0.3, 1.0])
    Rs = center @ so3.so3_exp(rng.normal(0, 0.2, (15, 3)))
    block = nls.ParameterBlock(np.eye(3), nls.ROTATION)

    def evaluate(values, need_jac):
        R = values[0]
        r = so3.so3_log(np.swapaxes(R, -1, -2) @ Rs).ravel()
        return r, None

    prob = nls.Problem([block], evaluate, residual_block_size=3)
    nls.solve(prob, options=nls.SolverOptions(function_tolerance=1e-15))
    oracle = chordal_mean(Rs)
    assert so3.rotation_angle(prob.blocks[0].value.T @ oracle) < 1e-6


def test_stacked_rotation_block():
    rng = np.random.default_rng(1)
    targets = so3.so3_exp(rng.normal(size=(4, 3)))
    block = nls.ParameterBlock(np.repeat(np.eye(3)[None], 4, 0), nls.ROTATION)
    assert block.tangent_size == 12

    def evaluate(values, need_jac):
        return so3.so3_log(np.swapaxes(targets, -1, -2) @ values[0]).ravel(), None

    prob = nls.Problem([block], evaluate, residual_block_size=3)
    nls.solve(prob)
    assert np.allclose(prob.blocks[0].value, targets, atol=1e-6)


def test_constant_block_untouched():
    a = nls.ParameterBlock([0.0])
    b = nls.ParameterBlock([5.0], constant=True)

    def evaluate(values, need_jac):
        r = np.array([values[0][0] - 1.0, values[1][0] - 1.0])
        return r, (np.eye(2) if need_jac else None)

    prob = nls.Problem([a, b], evaluate)
    nls.solve(prob)
    assert prob.blocks[0].value[0] == pytest.approx(1.0)
    assert prob.blocks[1].value[0] == 5.0


@given(st.floats(0.1, 10.0), st.floats(0.0, 100.0))
def test_huber_properties(delta, s):
    loss = nls.huber(delta)
    rho, w = loss(np.array([s]))
    assert rho[0] <= s + 1e-9
    assert 0 < w[0] <= 1.0
    # continuity at the knee
    r_in, _ = loss(np.array([delta * delta * (1 - 1e-12)]))
    r_out, _ = loss(np.array([delta * delta * (1 + 1e-12)]))
    assert r_in[0] == pytest.approx(r_out[0], rel=1e-9)


def test_huber_resists_outliers():
    rng = np.random.default_rng(2)
    data = rng.normal(3.0, 0.1, 50)
    data[:5] = 100.0
    block = nls.ParameterBlock([0.0])

    def evaluate(values, need_jac):
        return data - values[0][0], (-np.ones((50, 1)) if need_jac else None)

    prob = nls.Problem([block], evaluate)
    nls.solve(prob, nls.huber(0.3))
    assert abs(prob.blocks[0].value[0] - 3.0) < 0.1


def test_soft_l1_weights():
    loss = nls.RobustLoss("soft_l1", 1.0)
    rho, w = loss(np.array([0.0, 3.0]))
    assert rho[0] == 0.0 and rho[1] == pytest.approx(2.0)
    assert w[0] == 1.0 and w[1] == pytest.approx(0.5)


def test_bad_inputs():
    with pytest.raises(InvalidArgumentError):
        nls.RobustLoss("cauchy")
    with pytest.raises(InvalidArgumentError):
        nls.ParameterBlock(np.ones((3, 3)), nls.ROTATION)
    prob = nls.Problem([nls.ParameterBlock([0.0])], lambda v, j: (np.array([np.nan]), None))
    with pytest.raises(InvalidProblemError):
        nls.solve(prob)


def test_nonfinite_trial_rejected():
    # residual is undefined for x < 0; the solver must back off, not fail
    block = nls.ParameterBlock([4.0])

    def evaluate(values, need_jac):
        x = values[0][0]
        if x < 0:
            return np.array([np.nan]), None
        return np.array([np.sqrt(x) - 0.1]), (np.array([[0.5 / np.sqrt(x)]]) if need_jac else None)

    prob = nls.Problem([block], evaluate)
    report = nls.solve(prob, options=nls.SolverOptions(initial_lambda=1e-8))
    assert report.success
    assert prob.blocks[0].value[0] == pytest.approx(0.01, rel=1e-6)


def test_check_jacobian():
    prob = rosenbrock_problem([0.3, 0.7])
    assert nls.check_jacobian(prob) < 1e-7
