import dataclasses

import numpy as np
import pytest

from fbsde_nearopt import (
    BasisSpec,
    LQParams,
    RegressionError,
    constant_control,
    control_distance,
    make_control,
    make_lq_instance,
    make_lq_observation_instance,
    make_scalar_nonlinear_instance,
    make_time_grid,
    regress_conditional_expectation,
    riccati_lq,
    sample_noise,
    simulate_forward,
    solve_adjoint,
    solve_backward,
)

from _instances import linear_bsde_instance, linear_gamma_instance, pure_noise_instance


def _full_pipeline(spec, u, noise, basis=BasisSpec()):
    fwd = simulate_forward(spec, u, noise)
    bwd = solve_backward(spec, u, fwd, noise, basis)
    adj = solve_adjoint(spec, u, fwd, bwd, noise, basis)
    return fwd, bwd, adj


# ---------------------------------------------------------------------------
# regression primitive


def test_regression_reproduces_constants():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(500, 1))
    fit = regress_conditional_expectation(np.full(500, 5.0), features)
    assert np.allclose(fit(features), 5.0, atol=1e-10)


def test_regression_recovers_line_exactly():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(400, 1))
    fit = regress_conditional_expectation(2.0 * x[:, 0], x, BasisSpec(degree=1))
    probe = np.array([[0.0], [1.0]])
    vals = fit(probe)
    # ridge damping of 1e-10 shrinks the slope by about 2e-10
    assert abs(vals[0]) <= 1e-9           # intercept
    assert abs(vals[1] - vals[0] - 2.0) <= 1e-9  # slope


def test_regression_quadratic_with_noise():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10_000, 1))
    targets = x[:, 0] ** 2 + rng.normal(scale=0.1, size=10_000)
    fit = regress_conditional_expectation(targets, x, BasisSpec(degree=2))
    curvature = fit(np.array([[1.0]]))[0] + fit(np.array([[-1.0]]))[0] - 2.0 * fit(np.array([[0.0]]))[0]
    assert abs(curvature - 2.0) <= 0.1  # second difference of t^2 is 2


def test_regression_needs_enough_paths():
    with pytest.raises(RegressionError, match="paths"):
        regress_conditional_expectation(np.zeros(20), np.zeros((20, 1)), BasisSpec(degree=2))


def test_regression_degenerate_features_fall_back_to_mean():
    targets = np.arange(100.0)
    fit = regress_conditional_expectation(targets, np.ones((100, 1)), BasisSpec(degree=2))
    assert np.allclose(fit(np.ones((3, 1))), targets.mean(), atol=1e-8)


# ---------------------------------------------------------------------------
# backward solver


def test_martingale_representation():
    # f == 0, phi(x) = x, unit diffusion: y_i = x_i, z1 = 1, z2 = 0
    spec = dataclasses.replace(
        pure_noise_instance(sigma=1.0),
        terminal_phi=spec_phi(),
    )
    grid = make_time_grid(1.0, 64)
    noise = sample_noise(grid, 100_000, seed=3)
    u = constant_control([0.0], grid, spec.control_set)
    fwd = simulate_forward(spec, u, noise)
    bwd = solve_backward(spec, u, fwd, noise, BasisSpec(degree=2))
    # root-mean-square over paths and steps; pointwise tails carry fit noise
    assert np.sqrt(np.mean((bwd.y - fwd.x) ** 2)) <= 0.05
    assert np.sqrt(np.mean((bwd.z1 - 1.0) ** 2)) <= 0.05
    assert np.sqrt(np.mean(bwd.z2**2)) <= 0.05


def spec_phi():
    from fbsde_nearopt.model import TerminalCoefficient

    return TerminalCoefficient(
        value=lambda x: x.copy(), dx=lambda x: np.ones((x.shape[0], 1, 1))
    )


def test_constant_terminal_data():
    from fbsde_nearopt.model import TerminalCoefficient

    spec = dataclasses.replace(
        pure_noise_instance(sigma=1.0),
        terminal_phi=TerminalCoefficient(
            value=lambda x: np.full((x.shape[0], 1), 3.5),
            dx=lambda x: np.zeros((x.shape[0], 1, 1)),
        ),
    )
    grid = make_time_grid(1.0, 16)
    noise = sample_noise(grid, 2000, seed=4)
    u = constant_control([0.0], grid, spec.control_set)
    fwd = simulate_forward(spec, u, noise)
    bwd = solve_backward(spec, u, fwd, noise)
    # floor set by the 1e-10 ridge, amplified by 1/dt in the z extraction
    assert np.max(np.abs(bwd.y - 3.5)) <= 1e-8
    assert np.max(np.abs(bwd.z1)) <= 5e-8
    assert np.max(np.abs(bwd.z2)) <= 5e-8


def test_linear_driver_closed_form_small_scale():
    beta = 2.0
    spec = linear_bsde_instance(beta=beta)
    grid = make_time_grid(1.0, 32)
    noise = sample_noise(grid, 20_000, seed=5)
    u = constant_control([0.0], grid, spec.control_set)
    fwd = simulate_forward(spec, u, noise)
    bwd = solve_backward(spec, u, fwd, noise)
    exact = np.exp(-beta * (1.0 - grid.times))[:, None, None] * fwd.x
    rel = np.sqrt(np.mean((bwd.y - exact) ** 2)) / np.sqrt(np.mean(exact**2))
    assert rel <= 0.10


def test_terminal_pinning_exact():
    for spec in (make_lq_observation_instance(), make_scalar_nonlinear_instance()):
        grid = make_time_grid(1.0, 8)
        noise = sample_noise(grid, 1000, seed=6)
        u = constant_control([0.1], grid, spec.control_set)
        fwd = simulate_forward(spec, u, noise)
        bwd = solve_backward(spec, u, fwd, noise)
        assert np.array_equal(bwd.y[-1], fwd.x[-1])


def test_backward_diagnostics_recorded(lq_spec):
    grid = make_time_grid(1.0, 8)
    noise = sample_noise(grid, 1000, seed=7)
    u = constant_control([0.0], grid, lq_spec.control_set)
    fwd = simulate_forward(lq_spec, u, noise)
    bwd = solve_backward(lq_spec, u, fwd, noise)
    assert len(bwd.diagnostics.condition_numbers) == 8
    assert all(np.isfinite(bwd.diagnostics.condition_numbers))
    assert "basis_degree" in bwd.diagnostics.to_json()


# ---------------------------------------------------------------------------
# adjoint solver


def test_zero_cost_gives_zero_value_system():
    spec = make_lq_instance(LQParams(q=0.0, g=0.0))
    grid = make_time_grid(1.0, 8)
    noise = sample_noise(grid, 2000, seed=8)
    u = constant_control([0.0], grid, spec.control_set)
    fwd, bwd, adj = _full_pipeline(spec, u, noise)
    assert np.max(np.abs(adj.r)) <= 1e-8
    assert np.max(np.abs(adj.R1)) <= 1e-8
    assert np.max(np.abs(adj.R2)) <= 1e-8


def test_linear_gamma_pins_k():
    c = 0.7
    spec = linear_gamma_instance(c=c)
    grid = make_time_grid(1.0, 8)
    noise = sample_noise(grid, 2000, seed=9)
    u = constant_control([0.0], grid, spec.control_set)
    fwd, bwd, adj = _full_pipeline(spec, u, noise)
    assert np.all(adj.k[0] == -c)


def test_adjoint_pinning_invariants():
    spec = make_lq_observation_instance()
    grid = make_time_grid(1.0, 8)
    noise = sample_noise(grid, 1500, seed=10)
    u = constant_control([0.2], grid, spec.control_set)
    fwd, bwd, adj = _full_pipeline(spec, u, noise)

    x_T = fwd.x[-1]
    phi_big = np.asarray(spec.terminal_Phi.value(x_T))
    assert np.array_equal(adj.r[-1], phi_big)

    phi_x = np.asarray(spec.terminal_phi.dx(x_T))
    expected_p = np.asarray(spec.terminal_Phi.dx(x_T)) - np.einsum(
        "pij,pi->pj", phi_x, adj.k[-1]
    )
    assert np.allclose(adj.p[-1], expected_p, atol=1e-13)

    gamma_y = np.asarray(spec.initial_gamma.dy(bwd.y[0]))
    assert np.array_equal(adj.k[0], -gamma_y)


def test_lq_adjoint_tracks_riccati_small_scale(lq_params, lq_spec, lq_riccati):
    from fbsde_nearopt import riccati_open_loop_control

    grid = make_time_grid(1.0, 64)
    u = riccati_open_loop_control(lq_riccati, lq_params, grid, lq_spec.control_set)
    noise = sample_noise(grid, 30_000, seed=11)
    fwd, bwd, adj = _full_pipeline(lq_spec, u, noise)
    p_ref = lq_riccati.P_at(grid.times)[:, None, :] * fwd.x
    rel = np.sqrt(np.mean((adj.p - p_ref) ** 2)) / np.sqrt(np.mean(p_ref**2))
    assert rel <= 0.10


def test_adjoint_empirical_stability_bound():
    # difference of state and multiplier bundles controlled by the control
    # metric; one fixed pair family, noise seed varied
    spec = make_lq_instance(LQParams(a=0.3, q=1.0, sigma=0.2))
    grid = make_time_grid(1.0, 10)
    rng = np.random.default_rng(12)
    pairs = [
        (
            make_control(rng.uniform(-1, 1, (10, 1)), grid, spec.control_set),
            make_control(rng.uniform(-1, 1, (10, 1)), grid, spec.control_set),
        )
        for _ in range(6)
    ]
    fitted = []
    for seed in range(3):
        noise = sample_noise(grid, 1500, seed=seed)
        worst = 0.0
        for ua, ub in pairs:
            fa, ba, aa = _full_pipeline(spec, ua, noise)
            fb, bb, ab = _full_pipeline(spec, ub, noise)
            num = _bundle_distance_sq(grid, fa, ba, aa, fb, bb, ab)
            worst = max(worst, num / control_distance(ua, ub) ** 2)
        fitted.append(worst)
    assert np.all(np.isfinite(fitted))
    assert max(fitted) / min(fitted) < 2.0


def _bundle_distance_sq(grid, fa, ba, aa, fb, bb, ab):
    dt = grid.dt

    def sup_sq(d):
        return float(np.mean(np.max(np.sum(d * d, axis=2), axis=0)))

    def int_sq(d):
        return float(np.mean(np.sum(np.sum(d * d, axis=2), axis=0) * dt))

    theta = (
        sup_sq(fa.x - fb.x)
        + sup_sq(ba.y - bb.y)
        + int_sq(ba.z1 - bb.z1)
        + int_sq(ba.z2 - bb.z2)
    )
    lam = (
        sup_sq(aa.k - ab.k)
        + sup_sq(aa.p - ab.p)
        + int_sq(aa.q1 - ab.q1)
        + int_sq(aa.q2 - ab.q2)
    )
    r2 = float(np.mean(np.sum((aa.R2 - ab.R2) ** 2, axis=0) * dt))
    return theta + lam + r2
