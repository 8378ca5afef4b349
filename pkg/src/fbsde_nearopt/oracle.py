"""Independent ground truth: exact lattice enumeration and the Riccati oracle.

The binomial lattice walks every joint sign path of the two noises, so
expectations are exact sums and backward values are exact conditional
averages over the four children of each node; no regression enters.  The
Riccati oracle covers the degenerate full-observation LQ family.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import OracleError
from .model import ControlProcess, ControlSet, LQParams, ProblemSpec, make_control
from .paths import MAX_BINOMIAL_PATHS, TimeGrid

SW_CHILD = np.array([-1.0, 1.0, -1.0, 1.0])
SY_CHILD = np.array([-1.0, -1.0, 1.0, 1.0])


@dataclass(frozen=True)
class LatticeSolution:
    """Exact discretized cost and nodewise backward values.

    ``y_levels[i]`` holds the exact y at the 4**i depth-i nodes; weights are
    the uniform terminal path weights 4**-N.
    """

    cost: float
    running: float
    terminal: float
    initial: float
    y_levels: list
    z1_levels: list
    z2_levels: list
    x_levels: list
    rho_levels: list
    weights: np.ndarray
    grid: TimeGrid

    def to_json(self) -> str:
        return json.dumps(
            {
                "J": self.cost,
                "parts": {
                    "running": self.running,
                    "terminal": self.terminal,
                    "initial": self.initial,
                },
                "steps": self.grid.steps,
                "paths": int(self.weights.shape[0]),
            },
            indent=2,
            sort_keys=True,
        )


def _expand(values: np.ndarray) -> np.ndarray:
    """Repeat each parent row for its four children (prefix order)."""
    return np.repeat(values, 4, axis=0)


def enumerate_lattice(spec: ProblemSpec, u: ControlProcess, grid: TimeGrid) -> LatticeSolution:
    """Exact expectation of the discretized cost over all 4**N sign paths.

    The forward recursion mirrors the Euler/log-density scheme of the
    Monte-Carlo simulator term for term (same expression grouping), so the
    cost agrees bitwise with the pipeline fed the enumerated bundle.
    """
    N = grid.steps
    if 4**N > MAX_BINOMIAL_PATHS:
        raise OracleError(
            f"lattice needs 4^{N} = {4**N} paths, over the {MAX_BINOMIAL_PATHS} budget"
        )
    if not u.grid.matches(grid):
        raise OracleError("control grid does not match the lattice grid")
    n, m = spec.dim_x, spec.dim_y
    dt = grid.dt
    sqdt = np.sqrt(dt)
    times = grid.times

    x_levels = [np.broadcast_to(spec.initial_x, (1, n)).astype(float)]
    log_rho_levels = [np.zeros(1)]
    for i in range(N):
        xi = x_levels[i]
        Q = xi.shape[0]
        ui = u.values[i]
        b = np.broadcast_to(np.asarray(spec.drift_b.value(times[i], xi, ui), float), (Q, n))
        s1 = np.broadcast_to(
            np.asarray(spec.diffusion_sigma1.value(times[i], xi, ui), float), (Q, n)
        )
        s2 = np.broadcast_to(
            np.asarray(spec.diffusion_sigma2.value(times[i], xi, ui), float), (Q, n)
        )
        h = np.broadcast_to(
            np.asarray(spec.observation_h.value(times[i], xi, ui), float), (Q,)
        )
        dw = np.tile(SW_CHILD, Q) * sqdt
        dy = np.tile(SY_CHILD, Q) * sqdt
        x_levels.append(
            _expand(xi)
            + _expand((b - s2 * h[:, None]) * dt)
            + _expand(s1) * dw[:, None]
            + _expand(s2) * dy[:, None]
        )
        h_rep = _expand(h[:, None])[:, 0]
        log_rho_levels.append(
            _expand(log_rho_levels[i][:, None])[:, 0]
            + h_rep * dy
            - 0.5 * h_rep * h_rep * dt
        )
    rho_levels = [np.exp(lr) for lr in log_rho_levels]

    # exact backward induction: average over the four children of each node
    y_levels: list = [None] * (N + 1)
    z1_levels: list = [None] * N
    z2_levels: list = [None] * N
    y_levels[N] = np.broadcast_to(
        np.asarray(spec.terminal_phi.value(x_levels[N]), float), (4**N, m)
    ).copy()
    for i in reversed(range(N)):
        Q = 4**i
        y_next = y_levels[i + 1].reshape(Q, 4, m)
        y_hat = y_next.mean(axis=1)
        z1 = (y_next * SW_CHILD[None, :, None]).mean(axis=1) * sqdt / dt
        z2 = (y_next * SY_CHILD[None, :, None]).mean(axis=1) * sqdt / dt
        xi = x_levels[i]
        ui = u.values[i]
        h = np.broadcast_to(
            np.asarray(spec.observation_h.value(times[i], xi, ui), float), (Q,)
        )
        z2h = z2 * h[:, None]
        y_arg = y_hat
        for _ in range(2):
            f_val = np.broadcast_to(
                np.asarray(spec.backward_f.value(times[i], xi, y_arg, z1, z2, ui), float),
                (Q, m),
            )
            y_arg = y_hat - (f_val - z2h) * dt
        y_levels[i] = y_arg
        z1_levels[i] = z1
        z2_levels[i] = z2

    # cost reduction, expression-for-expression the Monte-Carlo one
    P = 4**N
    running = np.zeros(P)
    for i in range(N):
        Q = 4**i
        l_val = np.broadcast_to(
            np.asarray(
                spec.running_l.value(
                    times[i],
                    x_levels[i],
                    y_levels[i],
                    z1_levels[i],
                    z2_levels[i],
                    u.values[i],
                ),
                float,
            ),
            (Q,),
        )
        contrib = rho_levels[i] * l_val * dt
        running = running + np.repeat(contrib, P // Q)
    terminal = rho_levels[N] * np.broadcast_to(
        np.asarray(spec.terminal_Phi.value(x_levels[N]), float), (P,)
    )
    run_mean = math.fsum(running) / P
    term_mean = math.fsum(terminal) / P
    initial = float(np.asarray(spec.initial_gamma.value(y_levels[0]), float)[0])
    cost = run_mean + term_mean + initial
    return LatticeSolution(
        cost=cost,
        running=run_mean,
        terminal=term_mean,
        initial=initial,
        y_levels=y_levels,
        z1_levels=z1_levels,
        z2_levels=z2_levels,
        x_levels=x_levels,
        rho_levels=rho_levels,
        weights=np.full(P, 4.0**-N),
        grid=grid,
    )


def exhaustive_control_search(
    spec: ProblemSpec,
    candidates_per_step,
    grid: TimeGrid,
    control_set: ControlSet | None = None,
) -> tuple[ControlProcess, float]:
    """Brute-force the deterministic control mesh against the exact lattice.

    Ties keep the first assignment in lexicographic product order.
    """
    control_set = control_set or spec.control_set
    per_step = [
        [np.atleast_1d(np.asarray(c, dtype=float)) for c in step_candidates]
        for step_candidates in candidates_per_step
    ]
    if len(per_step) != grid.steps:
        raise OracleError(
            f"need candidate lists for each of the {grid.steps} steps, got {len(per_step)}"
        )
    total = math.prod(len(cands) for cands in per_step)
    if total > MAX_BINOMIAL_PATHS:
        raise OracleError(f"search budget exceeded: {total} assignments > {MAX_BINOMIAL_PATHS}")
    best_cost = math.inf
    best_control = None
    for assignment in itertools.product(*per_step):
        control = make_control(np.stack(assignment), grid, control_set)
        cost = enumerate_lattice(spec, control, grid).cost
        if cost < best_cost:
            best_cost = cost
            best_control = control
    return best_control, best_cost


@dataclass(frozen=True)
class RiccatiSolution:
    """Diagonal Riccati solution on a fine grid, with the induced open-loop data."""

    times: np.ndarray
    P: np.ndarray
    gain: np.ndarray
    optimal_cost: float
    ode_steps: int
    max_residual: float

    def P_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.shape[0], self.P.shape[1]))
        for j in range(self.P.shape[1]):
            out[:, j] = np.interp(t, self.times, self.P[:, j])
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "optimal_cost": self.optimal_cost,
                "P0": self.P[0].tolist(),
                "ode_steps": self.ode_steps,
                "max_residual": self.max_residual,
            },
            indent=2,
            sort_keys=True,
        )


def _riccati_rhs(P, a, q, b2_over_r):
    # dP/dtau with tau = T - t (integrating away from the terminal condition)
    return 2.0 * a * P + q - b2_over_r * P * P


def riccati_lq(params: LQParams, ode_steps: int = 4000) -> RiccatiSolution:
    """Classical LQ oracle for the h == 0, sigma2 == 0 degenerate family.

    Integrates the (diagonal) Riccati equation backward from P(T) = g with
    classical fourth-order one-step integration and returns the optimal cost
    0.5 x0' P(0) x0 + 0.5 * sum_i sigma_i^2 * integral of P_i.
    """
    if ode_steps < 1000:
        raise OracleError("riccati_lq needs ode_steps >= 1000")
    if np.any(np.asarray(params.r) <= 0.0):
        raise OracleError("Riccati oracle requires r > 0")
    arr = params.arrays()
    a, q, g = arr["a"], arr["q"], arr["g"]
    b2_over_r = arr["b_coef"] ** 2 / arr["r"]
    T = params.horizon
    dtau = T / ode_steps

    P_tau = np.empty((ode_steps + 1, params.dim))
    P_tau[0] = g
    for s in range(ode_steps):
        p0 = P_tau[s]
        k1 = _riccati_rhs(p0, a, q, b2_over_r)
        k2 = _riccati_rhs(p0 + 0.5 * dtau * k1, a, q, b2_over_r)
        k3 = _riccati_rhs(p0 + 0.5 * dtau * k2, a, q, b2_over_r)
        k4 = _riccati_rhs(p0 + dtau * k3, a, q, b2_over_r)
        P_tau[s + 1] = p0 + dtau / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if np.any(np.abs(P_tau[s + 1]) > 1e8):
            raise OracleError(f"Riccati blow-up at tau step {s + 1}")

    P_t = P_tau[::-1].copy()
    times = np.linspace(0.0, T, ode_steps + 1)
    gain = -(arr["b_coef"] / arr["r"])[None, :] * P_t

    # residual of the dt-form ODE at grid midpoints (central difference)
    dP_dt = (P_t[1:] - P_t[:-1]) / (T / ode_steps)
    P_mid = 0.5 * (P_t[1:] + P_t[:-1])
    resid = dP_dt + (2.0 * a * P_mid + q - b2_over_r * P_mid * P_mid)
    max_residual = float(np.max(np.abs(resid)))

    trace_term = np.trapezoid(arr["sigma"] ** 2 * P_t, times, axis=0)
    optimal_cost = float(
        0.5 * np.sum(P_t[0] * arr["initial_x"] ** 2) + 0.5 * np.sum(trace_term)
    )
    return RiccatiSolution(
        times=times,
        P=P_t,
        gain=gain,
        optimal_cost=optimal_cost,
        ode_steps=ode_steps,
        max_residual=max_residual,
    )


def riccati_open_loop_control(
    sol: RiccatiSolution,
    params: LQParams,
    grid: TimeGrid,
    control_set: ControlSet,
) -> ControlProcess:
    """Deterministic optimal control: the Riccati gain along the mean path.

    Integrates the closed-loop mean dynamics on the fine oracle grid and
    samples gain * mean at the left node of every simulation step.
    """
    arr = params.arrays()
    a, b = arr["a"], arr["b_coef"]
    fine_dt = sol.times[1] - sol.times[0]
    mean = np.empty_like(sol.P)
    mean[0] = arr["initial_x"]
    for s in range(sol.times.shape[0] - 1):
        mean[s + 1] = mean[s] + (a * mean[s] + b * sol.gain[s] * mean[s]) * fine_dt
    values = np.empty((grid.steps, params.dim))
    for i, t in enumerate(grid.times[:-1]):
        s = min(int(round(t / fine_dt)), sol.times.shape[0] - 1)
        values[i] = sol.gain[s] * mean[s]
    return make_control(values, grid, control_set, project=True)
