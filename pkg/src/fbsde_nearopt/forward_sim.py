"""Forward Euler simulation under the reference measure, costs, control metric.

The state advances with drift b - sigma2*h against the two reference-measure
noises; the density weight rho is advanced in log space so that it stays
positive and is exact for constant observation drift.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import FbsdeError, GridMismatchError, SimulationError
from .model import ControlProcess, ProblemSpec, without_observation
from .paths import NoiseBundle, TimeGrid, sample_noise

BLOWUP_THRESHOLD = 1e8


def _bcast(values, n_paths: int, *trailing: int) -> np.ndarray:
    out = np.asarray(values, dtype=float)
    return np.broadcast_to(out, (n_paths, *trailing))


def _check_same_grid(a: TimeGrid, b: TimeGrid, what: str) -> None:
    if not a.matches(b):
        raise GridMismatchError(f"{what}: grids differ ({a} vs {b})")


@dataclass(frozen=True)
class ForwardTrajectories:
    """States x and density weights rho, time-major: x[i] is (paths, n)."""

    x: np.ndarray
    rho: np.ndarray
    grid: TimeGrid
    control: ControlProcess
    noise: NoiseBundle

    @property
    def n_paths(self) -> int:
        return self.x.shape[1]


def simulate_forward(
    spec: ProblemSpec, u: ControlProcess, noise: NoiseBundle
) -> ForwardTrajectories:
    """Euler step for x, exact exponential-martingale step for rho."""
    _check_same_grid(u.grid, noise.grid, "simulate_forward")
    if u.dim != spec.dim_u:
        raise FbsdeError(f"control dim {u.dim} != spec dim_u {spec.dim_u}")
    grid = noise.grid
    P, N, n = noise.n_paths, grid.steps, spec.dim_x
    dt = grid.dt
    times = grid.times

    x = np.empty((N + 1, P, n))
    log_rho = np.empty((N + 1, P))
    x[0] = spec.initial_x[None, :]
    log_rho[0] = 0.0

    for i in range(N):
        t = times[i]
        xi = x[i]
        ui = u.values[i]
        b = _bcast(spec.drift_b.value(t, xi, ui), P, n)
        s1 = _bcast(spec.diffusion_sigma1.value(t, xi, ui), P, n)
        s2 = _bcast(spec.diffusion_sigma2.value(t, xi, ui), P, n)
        h = _bcast(spec.observation_h.value(t, xi, ui), P)
        x[i + 1] = (
            xi
            + (b - s2 * h[:, None]) * dt
            + s1 * noise.dW[:, i, None]
            + s2 * noise.dY[:, i, None]
        )
        log_rho[i + 1] = log_rho[i] + h * noise.dY[:, i] - 0.5 * h * h * dt
        bad = ~np.isfinite(x[i + 1]).all(axis=1)
        bad |= np.abs(x[i + 1]).max(axis=1) > BLOWUP_THRESHOLD
        if bad.any():
            j = int(np.argmax(bad))
            raise SimulationError(
                f"state blow-up or non-finite value at step {i + 1}, path {j}: "
                f"x = {x[i + 1, j]}"
            )

    return ForwardTrajectories(x=x, rho=np.exp(log_rho), grid=grid, control=u, noise=noise)


@dataclass(frozen=True)
class CostReport:
    """Monte-Carlo cost estimate with its decomposition.

    running + terminal + initial == value exactly;  initial_bias records the
    gap between the per-path mean of gamma(y_0) and gamma applied to the
    cross-path mean of y_0 (the estimator actually used).
    """

    value: float
    stderr: float
    n_paths: int
    running: float
    terminal: float
    initial: float
    initial_bias: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "J": self.value,
                "stderr": self.stderr,
                "n_paths": self.n_paths,
                "parts": {
                    "running": self.running,
                    "terminal": self.terminal,
                    "initial": self.initial,
                },
                "initial_bias": self.initial_bias,
            },
            indent=2,
            sort_keys=True,
        )


def _mean(v: np.ndarray) -> float:
    return math.fsum(v) / v.shape[0]


def _per_path_cost_parts(spec, u, fwd, bwd):
    """Per-path density-weighted running and terminal cost contributions."""
    grid = fwd.grid
    P, N = fwd.n_paths, grid.steps
    dt = grid.dt
    times = grid.times
    running = np.zeros(P)
    for i in range(N):
        l = _bcast(
            spec.running_l.value(
                times[i], fwd.x[i], bwd.y[i], bwd.z1[i], bwd.z2[i], u.values[i]
            ),
            P,
        )
        running = running + fwd.rho[i] * l * dt
    terminal = fwd.rho[N] * _bcast(spec.terminal_Phi.value(fwd.x[N]), P)
    return running, terminal


def evaluate_cost_strong(
    spec: ProblemSpec, u: ControlProcess, fwd: ForwardTrajectories, bwd
) -> CostReport:
    """Density-weighted cost under the reference measure (Bayes form)."""
    _check_same_grid(fwd.grid, u.grid, "evaluate_cost_strong")
    if fwd.n_paths != bwd.y.shape[1] or bwd.y.shape[0] != fwd.grid.steps + 1:
        raise GridMismatchError("forward and backward bundles do not match")
    if not np.array_equal(fwd.control.values, u.values):
        raise GridMismatchError("forward trajectories were simulated under a different control")

    running, terminal = _per_path_cost_parts(spec, u, fwd, bwd)
    P = fwd.n_paths

    y0_mean = bwd.y[0].mean(axis=0)
    initial = float(np.asarray(spec.initial_gamma.value(y0_mean[None, :]), dtype=float)[0])
    gamma_per_path = np.asarray(spec.initial_gamma.value(bwd.y[0]), dtype=float)
    initial_bias = _mean(np.broadcast_to(gamma_per_path, (P,))) - initial

    core = running + terminal
    run_mean = _mean(running)
    term_mean = _mean(terminal)
    value = run_mean + term_mean + initial
    stderr = float(np.std(core, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return CostReport(
        value=value,
        stderr=stderr,
        n_paths=P,
        running=run_mean,
        terminal=term_mean,
        initial=initial,
        initial_bias=initial_bias,
    )


def evaluate_cost_weak(
    spec: ProblemSpec,
    u: ControlProcess,
    seed: int,
    n_paths: int,
    grid: TimeGrid,
    basis=None,
) -> CostReport:
    """Unweighted cost under the control-dependent measure.

    Realized by simulating the original dynamics with (W, W^u) independent,
    which is the strong pipeline applied to the h == 0 view of the instance.
    """
    from .bsde import BasisSpec, solve_backward

    _check_same_grid(u.grid, grid, "evaluate_cost_weak")
    weak_spec = without_observation(spec)
    noise = sample_noise(grid, n_paths, seed)
    fwd = simulate_forward(weak_spec, u, noise)
    bwd = solve_backward(weak_spec, u, fwd, noise, basis or BasisSpec())
    return evaluate_cost_strong(weak_spec, u, fwd, bwd)


def control_distance(u: ControlProcess, v: ControlProcess) -> float:
    """L2-in-time distance (sum_i |u_i - v_i|^2 dt)^(1/2)."""
    _check_same_grid(u.grid, v.grid, "control_distance")
    if u.dim != v.dim:
        raise GridMismatchError("controls have different dimensions")
    diff = u.values - v.values
    return float(np.sqrt(np.sum(diff * diff) * u.grid.dt))


def trajectories_to_csv(fwd: ForwardTrajectories, path: str) -> None:
    """Rows (path, step, x components, rho)."""
    n_nodes, P, n = fwd.x.shape
    with open(path, "w", newline="") as handle:
        handle.write("path,step," + ",".join(f"x{j}" for j in range(n)) + ",rho\n")
        for p in range(P):
            for i in range(n_nodes):
                xs = ",".join(repr(float(v)) for v in fwd.x[i, p])
                handle.write(f"{p},{i},{xs},{repr(float(fwd.rho[i, p]))}\n")
