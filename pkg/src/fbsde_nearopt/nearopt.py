"""Near-optimality certificates built on the Hamiltonian gap.

The necessary-condition gap is the density-weighted time integral of
H_u . (u - u_eps) along the candidate's trajectories; its infimum over the
admissible class decouples per time step for deterministic piecewise
controls and is realized by exact linear minimization over the control set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import hamiltonian as ham
from .bsde import AdjointTrajectories, BackwardTrajectories, BasisSpec, solve_adjoint, solve_backward
from .errors import FbsdeError, GridMismatchError, PreconditionError
from .forward_sim import ForwardTrajectories, evaluate_cost_strong, simulate_forward
from .hamiltonian import ConvexityReport, check_H_convexity
from .model import ControlProcess, ProblemSpec, linear_minimize_over_U, make_control
from .paths import NoiseBundle, sample_noise


def weighted_hamiltonian_gradient(
    spec: ProblemSpec,
    u_eps: ControlProcess,
    fwd: ForwardTrajectories,
    bwd: BackwardTrajectories,
    adj: AdjointTrajectories,
) -> np.ndarray:
    """Per-path, per-step rho_i * H_u(t_i), shape (P, N, k)."""
    grid = fwd.grid
    P, N, k = fwd.n_paths, grid.steps, spec.dim_u
    times = grid.times
    out = np.empty((N, P, k))
    for i in range(N):
        mult = ham.MultiplierPoint(
            k=adj.k[i], p=adj.p[i], q1=adj.q1[i], q2=adj.q2[i], R2=adj.R2[i]
        )
        hu = ham.partial_u(
            spec, times[i], fwd.x[i], bwd.y[i], bwd.z1[i], bwd.z2[i], u_eps.values[i], mult
        )
        out[i] = fwd.rho[i][:, None] * hu
    return out


def _gap_statistics(weighted_hu: np.ndarray, direction: np.ndarray, dt: float):
    """Mean and stderr of sum_i dt * <rho_i H_u_i, d_i> over paths."""
    per_path = np.einsum("ipk,ik->p", weighted_hu, direction) * dt
    P = per_path.shape[0]
    gap = math.fsum(per_path) / P
    stderr = float(np.std(per_path, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    return gap, stderr


def necessary_gap(
    spec: ProblemSpec,
    u_eps: ControlProcess,
    u: ControlProcess,
    fwd: ForwardTrajectories,
    bwd: BackwardTrajectories,
    adj: AdjointTrajectories,
    noise: NoiseBundle,
) -> tuple[float, float]:
    """Gap of the candidate u against the base control u_eps."""
    if not u.grid.matches(u_eps.grid):
        raise GridMismatchError("candidate control lives on a different grid")
    weighted = weighted_hamiltonian_gradient(spec, u_eps, fwd, bwd, adj)
    return _gap_statistics(weighted, u.values - u_eps.values, fwd.grid.dt)


class GapResult(NamedTuple):
    gap: float
    stderr: float
    minimizer: ControlProcess


def min_gap_over_A(
    spec: ProblemSpec,
    u_eps: ControlProcess,
    fwd: ForwardTrajectories,
    bwd: BackwardTrajectories,
    adj: AdjointTrajectories,
    noise: NoiseBundle,
) -> GapResult:
    """Infimum of the gap over deterministic admissible controls.

    Decouples per step: v_i minimizes <mean(rho_i H_u_i), .> over U, so the
    result is never positive (u_eps itself is feasible).
    """
    weighted = weighted_hamiltonian_gradient(spec, u_eps, fwd, bwd, adj)
    g_bar = weighted.mean(axis=1)
    v = np.stack(
        [linear_minimize_over_U(g_bar[i], spec.control_set) for i in range(g_bar.shape[0])]
    )
    minimizer = ControlProcess(values=v, grid=u_eps.grid)
    gap, stderr = _gap_statistics(weighted, v - u_eps.values, fwd.grid.dt)
    return GapResult(gap=gap, stderr=stderr, minimizer=minimizer)


@dataclass(frozen=True)
class Certificate:
    """Outcome of a necessary or sufficient near-optimality check."""

    gap: float
    gap_stderr: float
    epsilon: float
    constant_C: float
    order_lambda: float
    verdict: str
    provenance: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "gap": self.gap,
                "gap_stderr": self.gap_stderr,
                "epsilon": self.epsilon,
                "C": self.constant_C,
                "lambda": self.order_lambda,
                "verdict": self.verdict,
                "provenance": self.provenance,
            },
            indent=2,
            sort_keys=True,
        )


def run_pipeline(
    spec: ProblemSpec,
    u: ControlProcess,
    noise: NoiseBundle,
    basis: BasisSpec = BasisSpec(),
):
    """Forward, backward and adjoint bundles under one control and noise."""
    fwd = simulate_forward(spec, u, noise)
    bwd = solve_backward(spec, u, fwd, noise, basis)
    adj = solve_adjoint(spec, u, fwd, bwd, noise, basis)
    return fwd, bwd, adj


def certify_necessary(
    spec: ProblemSpec,
    u_eps: ControlProcess,
    epsilon: float,
    C: float,
    *,
    n_paths: int = 100_000,
    seed: int = 0,
    basis: BasisSpec = BasisSpec(),
) -> Certificate:
    """Check the order-epsilon^(1/2) lower bound on the minimal gap."""
    if epsilon < 0.0:
        raise FbsdeError("epsilon must be >= 0")
    if C <= 0.0:
        raise FbsdeError("C must be positive")
    noise = sample_noise(u_eps.grid, n_paths, seed)
    fwd, bwd, adj = run_pipeline(spec, u_eps, noise, basis)
    result = min_gap_over_A(spec, u_eps, fwd, bwd, adj, noise)
    threshold = -C * math.sqrt(epsilon) - 3.0 * result.stderr
    verdict = "necessary-holds" if result.gap >= threshold else "necessary-violated"
    return Certificate(
        gap=result.gap,
        gap_stderr=result.stderr,
        epsilon=epsilon,
        constant_C=C,
        order_lambda=0.5,
        verdict=verdict,
        provenance={
            "instance": spec.label,
            "seed": seed,
            "n_paths": n_paths,
            "grid": {"horizon": u_eps.grid.horizon, "steps": u_eps.grid.steps},
            "threshold": threshold,
        },
    )


def _require_sufficient_structure(spec: ProblemSpec) -> None:
    if not spec.h_control_free:
        raise PreconditionError(
            "sufficient condition needs an observation drift free of state and control"
        )
    if not spec.phi_linear:
        raise PreconditionError("sufficient condition needs a linear terminal map phi")


def certify_sufficient(
    spec: ProblemSpec,
    u_eps: ControlProcess,
    epsilon: float,
    lambda_exp: float,
    C: float,
    *,
    n_paths: int = 100_000,
    seed: int = 0,
    basis: BasisSpec = BasisSpec(),
    convexity: ConvexityReport | None = None,
    convexity_probes: int = 24,
) -> Certificate:
    """Convexity plus gap condition under the control-free observation density.

    Verdict is sufficient-near-optimal only when every sampled convexity
    probe passes and the minimal gap clears -C eps^lambda; a convexity
    witness or a failed gap both yield inconclusive.
    """
    _require_sufficient_structure(spec)
    if epsilon < 0.0 or C <= 0.0:
        raise FbsdeError("need epsilon >= 0 and C > 0")
    report = convexity or check_H_convexity(spec, n_probes=convexity_probes, seed=seed)
    noise = sample_noise(u_eps.grid, n_paths, seed)
    fwd, bwd, adj = run_pipeline(spec, u_eps, noise, basis)
    result = min_gap_over_A(spec, u_eps, fwd, bwd, adj, noise)
    threshold = -C * epsilon**lambda_exp - 3.0 * result.stderr

    if not report.passed:
        verdict = "inconclusive"
        reason = "convexity probe failed"
    elif result.gap >= threshold:
        verdict = "sufficient-near-optimal"
        reason = ""
    else:
        verdict = "inconclusive"
        reason = "gap condition failed at the supplied constants"
    return Certificate(
        gap=result.gap,
        gap_stderr=result.stderr,
        epsilon=epsilon,
        constant_C=C,
        order_lambda=lambda_exp,
        verdict=verdict,
        provenance={
            "instance": spec.label,
            "seed": seed,
            "n_paths": n_paths,
            "grid": {"horizon": u_eps.grid.horizon, "steps": u_eps.grid.steps},
            "threshold": threshold,
            "convexity": json.loads(report.to_json()),
            "reason": reason,
        },
    )


@dataclass(frozen=True)
class CostDifferenceReport:
    """Both sides of the cost-difference representation, with noise scales."""

    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    diff_stderr: float

    @property
    def combined_stderr(self) -> float:
        return math.hypot(self.lhs_stderr, self.rhs_stderr)


def cost_difference_representation(
    spec: ProblemSpec,
    u: ControlProcess,
    u_eps: ControlProcess,
    noise: NoiseBundle,
    basis: BasisSpec = BasisSpec(),
) -> CostDifferenceReport:
    """J(u) - J(u_eps) against its Hamiltonian-bracket expansion.

    Uses the u_eps adjoints as frozen multipliers (with the shifted last
    slot evaluated along the u_eps pair) and the control-free density as
    the common weight; exact as an identity in expectation.
    """
    _require_sufficient_structure(spec)
    if not u.grid.matches(u_eps.grid):
        raise GridMismatchError("controls live on different grids")
    grid = noise.grid
    dt = grid.dt
    times = grid.times
    P, N = noise.n_paths, grid.steps

    fwd_e, bwd_e, adj_e = run_pipeline(spec, u_eps, noise, basis)
    fwd_u = simulate_forward(spec, u, noise)
    bwd_u = solve_backward(spec, u, fwd_u, noise, basis)
    if not np.allclose(fwd_u.rho[N], fwd_e.rho[N], rtol=1e-10):
        raise PreconditionError(
            "density weights differ between controls; observation drift is "
            "not actually control-free"
        )

    cost_u = evaluate_cost_strong(spec, u, fwd_u, bwd_u)
    cost_e = evaluate_cost_strong(spec, u_eps, fwd_e, bwd_e)
    lhs = cost_u.value - cost_e.value

    per_path_rhs = np.zeros(P)
    per_path_lhs = np.zeros(P)
    for i in range(N):
        t = times[i]
        xe, ye = fwd_e.x[i], bwd_e.y[i]
        z1e, z2e = bwd_e.z1[i], bwd_e.z2[i]
        xu, yu = fwd_u.x[i], bwd_u.y[i]
        z1u, z2u = bwd_u.z1[i], bwd_u.z2[i]
        mult = ham.MultiplierPoint(
            k=adj_e.k[i], p=adj_e.p[i], q1=adj_e.q1[i], q2=adj_e.q2[i], R2=adj_e.R2[i]
        )
        r2s = ham.shifted_slot(spec, t, xe, u_eps.values[i], z2e, mult)
        frozen = ham.MultiplierPoint(k=mult.k, p=mult.p, q1=mult.q1, q2=mult.q2, R2=r2s)
        h_u_pt = ham.eval_H(spec, t, xu, yu, z1u, z2u, u.values[i], frozen)
        h_e_pt = ham.eval_H(spec, t, xe, ye, z1e, z2e, u_eps.values[i], frozen)
        parts = ham.eval_H_partials(spec, t, xe, ye, z1e, z2e, u_eps.values[i], mult)
        bracket = (
            h_u_pt
            - h_e_pt
            - np.einsum("pi,pi->p", parts.dx, xu - xe)
            - np.einsum("pi,pi->p", parts.dy, yu - ye)
            - np.einsum("pi,pi->p", parts.dz1, z1u - z1e)
            - np.einsum("pi,pi->p", parts.dz2, z2u - z2e)
        )
        per_path_rhs += fwd_e.rho[i] * bracket * dt

        l_u = np.broadcast_to(
            np.asarray(spec.running_l.value(t, xu, yu, z1u, z2u, u.values[i]), float), (P,)
        )
        l_e = np.broadcast_to(
            np.asarray(spec.running_l.value(t, xe, ye, z1e, z2e, u_eps.values[i]), float),
            (P,),
        )
        per_path_lhs += fwd_e.rho[i] * (l_u - l_e) * dt

    xu_T, xe_T = fwd_u.x[N], fwd_e.x[N]
    phi_u = np.broadcast_to(np.asarray(spec.terminal_Phi.value(xu_T), float), (P,))
    phi_e = np.broadcast_to(np.asarray(spec.terminal_Phi.value(xe_T), float), (P,))
    phi_x_e = np.broadcast_to(np.asarray(spec.terminal_Phi.dx(xe_T), float), (P, spec.dim_x))
    terminal_bracket = phi_u - phi_e - np.einsum("pi,pi->p", phi_x_e, xu_T - xe_T)
    per_path_rhs += fwd_e.rho[N] * terminal_bracket
    per_path_lhs += fwd_e.rho[N] * (phi_u - phi_e)

    y0_u = bwd_u.y[0].mean(axis=0)
    y0_e = bwd_e.y[0].mean(axis=0)
    g_u = float(np.asarray(spec.initial_gamma.value(y0_u[None, :]), float)[0])
    g_e = float(np.asarray(spec.initial_gamma.value(y0_e[None, :]), float)[0])
    g_dy = np.asarray(spec.initial_gamma.dy(y0_e[None, :]), float).reshape(spec.dim_y)
    gamma_bracket = g_u - g_e - float(g_dy @ (y0_u - y0_e))

    rhs = math.fsum(per_path_rhs) / P + gamma_bracket
    rhs_stderr = float(np.std(per_path_rhs, ddof=1) / np.sqrt(P))
    lhs_stderr = float(np.std(per_path_lhs, ddof=1) / np.sqrt(P))
    diff = per_path_lhs - per_path_rhs
    diff_stderr = float(np.std(diff, ddof=1) / np.sqrt(P))
    return CostDifferenceReport(
        lhs=lhs,
        rhs=rhs,
        lhs_stderr=lhs_stderr,
        rhs_stderr=rhs_stderr,
        diff_stderr=diff_stderr,
    )


def estimate_order(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Fit -min_gap ~ C * eps^s in log-log; returns (s, C).

    Points with non-negative gap or non-positive epsilon are excluded.
    """
    usable = [(eps, gap) for eps, gap in points if eps > 0.0 and gap < 0.0]
    if len(usable) < 3:
        raise FbsdeError(
            f"order fit needs at least 3 usable (eps > 0, gap < 0) points, got {len(usable)}"
        )
    log_eps = np.log([eps for eps, _ in usable])
    log_gap = np.log([-gap for _, gap in usable])
    slope, intercept = np.polyfit(log_eps, log_gap, 1)
    return float(slope), float(np.exp(intercept))
