"""Stochastic-maximum-principle descent producing near-optimal controls.

Conditional-gradient iteration: the linear subproblem over the control set
is exactly the per-step minimizer of the necessary-condition gap, so the
duality gap recorded each iteration is the certificate quantity itself.
Common random numbers are held fixed across iterations, and the proposed
step is backtracked until the cost decreases (sufficient-decrease rule),
which keeps the cost trace monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bsde import BasisSpec, solve_adjoint, solve_backward
from .errors import FbsdeError, OptimizerError
from .forward_sim import control_distance, evaluate_cost_strong, simulate_forward
from .model import ControlProcess, ProblemSpec, make_control, project_onto_U
from .nearopt import min_gap_over_A
from .paths import sample_noise


@dataclass(frozen=True)
class DescentParams:
    max_iter: int = 100
    step_rule: str = "fw"  # "fw" | "fw-raw" | "pg"
    n_paths: int = 100_000
    seed: int = 0
    tol_gap: float = 1e-3
    basis: BasisSpec = field(default_factory=BasisSpec)
    armijo_c: float = 0.1
    max_halvings: int = 25
    pg_step: float = 1.0


@dataclass(frozen=True)
class DescentRow:
    iteration: int
    cost: float
    cost_stderr: float
    min_gap: float
    gap_stderr: float
    step_size: float
    distance: float


@dataclass
class DescentTrace:
    rows: list[DescentRow]
    controls: list[ControlProcess]
    converged: bool
    stop_reason: str

    @property
    def final_control(self) -> ControlProcess:
        return self.controls[-1]

    @property
    def final_cost(self) -> float:
        return self.rows[-1].cost

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as handle:
            handle.write("iteration,cost,cost_stderr,min_gap,gap_stderr,step,distance\n")
            for row in self.rows:
                handle.write(
                    f"{row.iteration},{row.cost!r},{row.cost_stderr!r},"
                    f"{row.min_gap!r},{row.gap_stderr!r},{row.step_size!r},{row.distance!r}\n"
                )


def _evaluate(spec, u, noise, basis):
    fwd = simulate_forward(spec, u, noise)
    bwd = solve_backward(spec, u, fwd, noise, basis)
    cost = evaluate_cost_strong(spec, u, fwd, bwd)
    return fwd, bwd, cost


def smp_descent(spec: ProblemSpec, u0: ControlProcess, params: DescentParams) -> DescentTrace:
    """Iterate toward a gap-certified control from an admissible start."""
    for i, v in enumerate(u0.values):
        if not spec.control_set.contains(v):
            raise FbsdeError(f"u0 is not admissible at step {i}")
    noise = sample_noise(u0.grid, params.n_paths, params.seed)
    dt = u0.grid.dt

    u = u0
    fwd, bwd, cost = _evaluate(spec, u, noise, params.basis)
    rows: list[DescentRow] = []
    controls: list[ControlProcess] = [u]
    increase_streak = 0
    converged = False
    stop_reason = "max_iter reached"

    for j in range(params.max_iter + 1):
        adj = solve_adjoint(spec, u, fwd, bwd, noise, params.basis)
        gap = min_gap_over_A(spec, u, fwd, bwd, adj, noise)

        if abs(gap.gap) <= params.tol_gap:
            rows.append(
                DescentRow(j, cost.value, cost.stderr, gap.gap, gap.stderr, 0.0, 0.0)
            )
            converged = True
            stop_reason = "gap below tolerance"
            break
        if j == params.max_iter:
            rows.append(
                DescentRow(j, cost.value, cost.stderr, gap.gap, gap.stderr, 0.0, 0.0)
            )
            break

        weighted = None
        if params.step_rule == "pg":
            # mean gradient density drives a projected step
            from .nearopt import weighted_hamiltonian_gradient

            weighted = weighted_hamiltonian_gradient(spec, u, fwd, bwd, adj).mean(axis=1)

        accepted = None
        step_taken = 0.0
        proposal = 2.0 / (j + 2.0)
        halvings = params.max_halvings if params.step_rule != "fw-raw" else 0
        for h in range(halvings + 1):
            if params.step_rule == "pg":
                eta = params.pg_step * 0.5**h
                cand_vals = np.stack(
                    [
                        project_onto_U(u.values[i] - eta * weighted[i], spec.control_set)
                        for i in range(u.values.shape[0])
                    ]
                )
                predicted = float(
                    np.sum((cand_vals - u.values) * weighted) * dt
                )
                step = eta
            else:
                step = proposal * 0.5**h
                cand_vals = u.values + step * (gap.minimizer.values - u.values)
                predicted = step * gap.gap
            candidate = ControlProcess(values=cand_vals, grid=u.grid)
            fwd_c, bwd_c, cost_c = _evaluate(spec, candidate, noise, params.basis)
            if params.step_rule == "fw-raw" or cost_c.value <= cost.value + params.armijo_c * predicted:
                accepted = (candidate, fwd_c, bwd_c, cost_c)
                step_taken = step
                break
        if accepted is None:
            rows.append(
                DescentRow(j, cost.value, cost.stderr, gap.gap, gap.stderr, 0.0, 0.0)
            )
            stop_reason = "line search stalled at the noise floor"
            break

        candidate, fwd_c, bwd_c, cost_c = accepted
        moved = control_distance(candidate, u)
        rows.append(
            DescentRow(
                j, cost.value, cost.stderr, gap.gap, gap.stderr, step_taken, moved
            )
        )
        if cost_c.value > cost.value + 3.0 * math.hypot(cost_c.stderr, cost.stderr):
            increase_streak += 1
            if increase_streak >= 5:
                raise OptimizerError(
                    "cost increased beyond 3 stderr for 5 consecutive iterations; "
                    "step rule or path count inadequate"
                )
        else:
            increase_streak = 0
        u, fwd, bwd, cost = candidate, fwd_c, bwd_c, cost_c
        controls.append(u)

    return DescentTrace(
        rows=rows, controls=controls, converged=converged, stop_reason=stop_reason
    )


def perturbation_family(
    spec: ProblemSpec,
    u_star: ControlProcess,
    deltas,
    direction: ControlProcess,
    oracle_cost: float | None,
    *,
    n_paths: int = 100_000,
    seed: int = 0,
    basis: BasisSpec | None = None,
) -> list[tuple[ControlProcess, float]]:
    """Controls u* + delta * direction (projected into U) with measured epsilon.

    epsilon_delta = J(u_delta) - oracle value, clamped at zero; costs share
    one noise bundle so the family is comparable member to member.
    """
    if oracle_cost is None:
        raise FbsdeError("perturbation_family needs an oracle value for epsilon")
    if not direction.grid.matches(u_star.grid):
        raise FbsdeError("direction lives on a different grid")
    basis = basis or BasisSpec()
    noise = sample_noise(u_star.grid, n_paths, seed)
    family = []
    for delta in deltas:
        values = u_star.values + float(delta) * direction.values
        control = make_control(values, u_star.grid, spec.control_set, project=True)
        fwd = simulate_forward(spec, control, noise)
        bwd = solve_backward(spec, control, fwd, noise, basis)
        cost = evaluate_cost_strong(spec, control, fwd, bwd)
        family.append((control, max(cost.value - oracle_cost, 0.0)))
    return family
