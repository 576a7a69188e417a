import math

import numpy as np
import pytest
from conftest import assert_grad_close, central_difference
from scipy.linalg import expm

from latent_ecg.autodiff import Tensor, grad
from latent_ecg.nn import MlpVectorField, init_mlp
from latent_ecg.ode import (
    TSIT5_A,
    TSIT5_B,
    TSIT5_BTILDE,
    TSIT5_C,
    MaxStepsExceeded,
    OdeNumericError,
    OdeProblem,
    SolverConfig,
    SolverTrace,
    odeint,
    rk4_solve,
    solve_at,
    tsit5_step,
    write_trajectory_csv,
)

TIGHT = SolverConfig(rtol=1e-10, atol=1e-12)


def test_tableau_consistency():
    for c, row in zip(TSIT5_C, TSIT5_A):
        assert sum(row) == pytest.approx(c, abs=1e-14)
    assert sum(TSIT5_B) == pytest.approx(1.0, abs=1e-14)
    assert sum(TSIT5_BTILDE) == pytest.approx(0.0, abs=1e-14)
    # fifth-order quadrature conditions sum b_i c_i^k = 1/(k+1)
    c = np.asarray(TSIT5_C)
    for k in range(5):
        assert float(np.dot(TSIT5_B, c**k)) == pytest.approx(1 / (k + 1), abs=1e-13)


def test_exponential_decay():
    prob = OdeProblem(lambda t, y: -0.7 * y, np.array([2.0]), (0.0, 5.0))
    times = np.linspace(0, 5, 11)
    ys = solve_at(prob, TIGHT, times)
    np.testing.assert_allclose(ys[:, 0], 2.0 * np.exp(-0.7 * times), rtol=1e-8)


def test_solve_at_reproduces_e():
    prob = OdeProblem(lambda t, y: y, np.array([1.0]), (0.0, 1.0))
    y = solve_at(prob, SolverConfig(rtol=1e-9, atol=1e-12), [1.0])
    assert abs(y[0, 0] - math.e) < 1e-8


def test_rotation_preserves_norm():
    omega = 2.0
    prob = OdeProblem(lambda t, y: np.array([-omega * y[1], omega * y[0]]), np.array([1.0, 0.0]), (0.0, 10.0))
    times = np.linspace(0, 10, 41)
    ys = solve_at(prob, TIGHT, times)
    np.testing.assert_allclose(np.linalg.norm(ys, axis=1), 1.0, atol=1e-8)
    np.testing.assert_allclose(ys[:, 0], np.cos(omega * times), atol=1e-8)


def test_backward_integration():
    prob = OdeProblem(lambda t, y: y, np.array([math.e]), (1.0, 0.0))
    ys = solve_at(prob, TIGHT, [0.5, 0.0])
    np.testing.assert_allclose(ys[:, 0], [math.exp(0.5), 1.0], rtol=1e-9)


def test_linear_system_against_matrix_exponential(rng):
    A = rng.standard_normal((4, 4)) * 0.5
    y0 = rng.standard_normal(4)
    prob = OdeProblem(lambda t, y: A @ y, y0, (0.0, 2.0))
    times = [0.3, 1.0, 2.0]
    ys = solve_at(prob, TIGHT, times)
    for t, y in zip(times, ys):
        np.testing.assert_allclose(y, expm(A * t) @ y0, rtol=1e-7, atol=1e-9)


def test_agrees_with_fine_rk4(rng):
    f = lambda t, y: np.sin(t) - y**3  # noqa: E731
    prob = OdeProblem(f, np.array([0.5, -0.2]), (0.0, 3.0))
    times = np.linspace(0, 3, 7)
    ys = solve_at(prob, TIGHT, times)
    ref = rk4_solve(prob, 6000, times)
    np.testing.assert_allclose(ys, ref, atol=1e-9)


def test_fixed_step_global_error_slope():
    prob = OdeProblem(lambda t, y: y, np.array([1.0]), (0.0, 1.0))
    hs = [0.1, 0.05, 0.025, 0.0125]
    errors = []
    for h in hs:
        y = np.array([1.0])
        for i in range(round(1 / h)):
            y, _ = tsit5_step(prob, i * h, y, h)
        errors.append(abs(y[0] - math.e))
    slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
    assert 4.6 <= slope <= 5.3


def test_embedded_error_estimate_is_small_for_small_steps():
    prob = OdeProblem(lambda t, y: y, np.array([1.0]), (0.0, 1.0))
    _, err_big = tsit5_step(prob, 0.0, np.array([1.0]), 0.2)
    _, err_small = tsit5_step(prob, 0.0, np.array([1.0]), 0.1)
    assert err_small[0] < err_big[0]


def test_eval_times_outside_span_rejected():
    prob = OdeProblem(lambda t, y: y, np.array([1.0]), (0.0, 1.0))
    with pytest.raises(ValueError):
        solve_at(prob, TIGHT, [1.5])


def test_non_monotone_eval_times_rejected():
    prob = OdeProblem(lambda t, y: y, np.array([1.0]), (0.0, 1.0))
    with pytest.raises(ValueError):
        solve_at(prob, TIGHT, [0.5, 0.2])


def test_non_finite_dynamics_raise():
    prob = OdeProblem(lambda t, y: y * np.nan, np.array([1.0]), (0.0, 1.0))
    with pytest.raises(OdeNumericError):
        solve_at(prob, TIGHT, [1.0])


def test_step_budget_enforced():
    prob = OdeProblem(lambda t, y: y, np.array([1.0]), (0.0, 1.0))
    with pytest.raises(MaxStepsExceeded):
        solve_at(prob, SolverConfig(rtol=1e-12, atol=1e-14, max_steps=5), [1.0])


def test_eval_time_equal_to_start():
    prob = OdeProblem(lambda t, y: -y, np.array([3.0]), (0.0, 1.0))
    ys = solve_at(prob, TIGHT, [0.0, 1.0])
    assert ys[0, 0] == 3.0


def _field(rng, dim=3):
    mlp = init_mlp(rng, dim, dim, width=6, depth=2)
    for p in mlp.parameters():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    return MlpVectorField(mlp)


def test_odeint_gradient_matches_frozen_finite_differences(rng):
    field = _field(rng)
    y0 = rng.standard_normal((2, 3))
    times = [0.2, 0.5, 1.0]
    weights = rng.standard_normal((3, 2, 3))
    cfg = SolverConfig(rtol=1e-6, atol=1e-8)
    trace = SolverTrace()
    y = Tensor(y0, requires_grad=True)
    out, _ = odeint(field, y, times, 0.0, cfg, trace)
    params = field.parameters()
    analytic = grad((out * Tensor(weights)).sum(), [y] + params)
    trace.freeze()

    def run(v):
        trace._cursor = 0
        o, _ = odeint(field, Tensor(v), times, 0.0, cfg, trace)
        return float((o.data * weights).sum())

    assert_grad_close(analytic[0], central_difference(run, y0), rtol=1e-6)
    for p, g in zip(params, analytic[1:]):
        original = p.data.copy()

        def f(v, p=p):
            p.data = v
            return run(y0)

        numeric = central_difference(f, original)
        p.data = original
        assert_grad_close(g, numeric, rtol=1e-6)


def test_odeint_matches_plain_solver(rng):
    field = _field(rng)
    y0 = rng.standard_normal(3)
    cfg = SolverConfig(rtol=1e-8, atol=1e-10)
    out, _ = odeint(field, Tensor(y0), [0.5, 1.0], 0.0, cfg)
    prob = OdeProblem(lambda t, y: field(t, y)[0], y0, (0.0, 1.0))
    np.testing.assert_allclose(out.data, solve_at(prob, cfg, [0.5, 1.0]), rtol=1e-12)


def test_trajectory_csv(tmp_path):
    write_trajectory_csv(tmp_path / "t.csv", [0.0, 1.0], np.array([[1.0, 2.0], [3.0, 4.0]]))
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 3
