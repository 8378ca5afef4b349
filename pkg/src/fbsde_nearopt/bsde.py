"""Least-squares Monte-Carlo backward solvers.

Conditional expectations given the state are fitted per time step on a
polynomial basis (standardized features, tiny ridge).  The backward state
recursion extracts the martingale integrands by regressing the product of
the next value with each noise increment; the adjoint system reuses the
same recursion for its backward components and integrates the forward
component by explicit Euler.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from . import hamiltonian as ham
from .errors import FbsdeError, GridMismatchError, RegressionError
from .forward_sim import ForwardTrajectories, _bcast
from .model import ControlProcess, ProblemSpec
from .paths import NoiseBundle

RIDGE = 1e-10
MAX_CONDITION = 1e14


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial basis in the state, all monomials up to total degree."""

    degree: int = 2

    def __post_init__(self) -> None:
        if not 0 <= self.degree <= 4:
            raise RegressionError(f"basis degree must be in [0, 4], got {self.degree}")

    def exponent_tuples(self, dim: int) -> list[tuple[int, ...]]:
        combos = []
        for total in range(self.degree + 1):
            combos.extend(combinations_with_replacement(range(dim), total))
        return combos

    def size(self, dim: int) -> int:
        return len(self.exponent_tuples(dim))


def _design_matrix(xc: np.ndarray, combos) -> np.ndarray:
    cols = [np.ones(xc.shape[0])]
    for combo in combos[1:]:
        col = np.ones(xc.shape[0])
        for idx in combo:
            col = col * xc[:, idx]
        cols.append(col)
    return np.column_stack(cols)


class _StepFit:
    """One time step's design matrix and normal-equation factorization."""

    def __init__(self, x: np.ndarray, basis: BasisSpec):
        P, d = x.shape
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.scale = np.where(std > 1e-12, std, 1.0)
        self.combos = basis.exponent_tuples(d)
        n_basis = len(self.combos)
        if P < 10 * n_basis:
            raise RegressionError(
                f"need at least {10 * n_basis} paths for a basis of size {n_basis}, got {P}"
            )
        self.A = _design_matrix((x - self.mean) / self.scale, self.combos)
        gram = self.A.T @ self.A / P + RIDGE * np.eye(n_basis)
        self.condition = float(np.linalg.cond(gram))
        if not np.isfinite(self.condition) or self.condition > MAX_CONDITION:
            raise RegressionError(
                f"design rank-deficient beyond ridge rescue, condition {self.condition:.3e}"
            )
        self.gram = gram
        self.n_paths = P

    def fit(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (fitted values, coefficients); targets (P,) or (P, T)."""
        flat = targets.ndim == 1
        tg = targets[:, None] if flat else targets
        rhs = self.A.T @ tg / self.n_paths
        coef = np.linalg.solve(self.gram, rhs)
        fitted = self.A @ coef
        if flat:
            return fitted[:, 0], coef[:, 0]
        return fitted, coef


@dataclass(frozen=True)
class FittedRegression:
    """A fitted conditional-expectation map, evaluable at new states."""

    coefficients: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    combos: tuple
    condition_number: float
    residual_rms: float

    def __call__(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        A = _design_matrix((features - self.mean) / self.scale, self.combos)
        out = A @ self.coefficients
        return out


def regress_conditional_expectation(
    targets: np.ndarray, features: np.ndarray, basis: BasisSpec = BasisSpec()
) -> FittedRegression:
    """Least-squares fit of E[target | features] on the polynomial basis."""
    targets = np.asarray(targets, dtype=float)
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if features.shape[0] != targets.shape[0]:
        features = features.T
    step = _StepFit(features, basis)
    fitted, coef = step.fit(targets)
    residual = float(np.sqrt(np.mean((targets - fitted) ** 2)))
    return FittedRegression(
        coefficients=coef,
        mean=step.mean,
        scale=step.scale,
        combos=tuple(step.combos),
        condition_number=step.condition,
        residual_rms=residual,
    )


@dataclass
class RegressionDiagnostics:
    basis_degree: int
    basis_size: int
    condition_numbers: list[float] = field(default_factory=list)
    residual_rms: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "basis_degree": self.basis_degree,
                "basis_size": self.basis_size,
                "max_condition": max(self.condition_numbers, default=0.0),
                "condition_numbers": self.condition_numbers,
                "residual_rms": self.residual_rms,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class BackwardTrajectories:
    """Backward state, time-major: y[i] is (paths, m); z's live on steps."""

    y: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    diagnostics: RegressionDiagnostics


@dataclass(frozen=True)
class AdjointTrajectories:
    """Multipliers (k, p, q1, q2) and value system (r, R1, R2), time-major."""

    k: np.ndarray
    p: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    r: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    diagnostics: RegressionDiagnostics


def _check_bundles(u: ControlProcess, fwd: ForwardTrajectories, noise: NoiseBundle) -> None:
    if not fwd.grid.matches(noise.grid) or not u.grid.matches(noise.grid):
        raise GridMismatchError("control, forward trajectories and noise must share a grid")
    if fwd.n_paths != noise.n_paths:
        raise GridMismatchError("forward trajectories and noise have different path counts")
    if not np.array_equal(fwd.control.values, u.values):
        raise GridMismatchError("forward trajectories were simulated under a different control")
    if fwd.noise is not noise and not np.array_equal(fwd.noise.dW[:, 0], noise.dW[:, 0]):
        raise GridMismatchError("forward trajectories were simulated under different noise")


def solve_backward(
    spec: ProblemSpec,
    u: ControlProcess,
    fwd: ForwardTrajectories,
    noise: NoiseBundle,
    basis: BasisSpec = BasisSpec(),
) -> BackwardTrajectories:
    """Backward regression recursion for (y, z1, z2).

    Per step: z's from martingale-increment regressions, then the value
    update with the driver's y-argument resolved by an explicit predictor
    and one corrector evaluation.
    """
    _check_bundles(u, fwd, noise)
    grid = noise.grid
    P, N, m = fwd.n_paths, grid.steps, spec.dim_y
    dt = grid.dt
    times = grid.times

    y = np.empty((N + 1, P, m))
    z1 = np.empty((N, P, m))
    z2 = np.empty((N, P, m))
    y[N] = _bcast(spec.terminal_phi.value(fwd.x[N]), P, m)
    diag = RegressionDiagnostics(
        basis_degree=basis.degree, basis_size=basis.size(spec.dim_x)
    )

    for i in reversed(range(N)):
        t = times[i]
        xi = fwd.x[i]
        ui = u.values[i]
        step = _StepFit(xi, basis)
        y_next = y[i + 1]
        y_hat, _ = step.fit(y_next)
        # center the increment targets on the fitted mean (variance reduction
        # with the same conditional expectation)
        resid = y_next - y_hat
        fitted_z, _ = step.fit(
            np.concatenate(
                [resid * noise.dW[:, i, None], resid * noise.dY[:, i, None]], axis=1
            )
        )
        z1[i] = fitted_z[:, :m] / dt
        z2[i] = fitted_z[:, m:] / dt

        h = _bcast(spec.observation_h.value(t, xi, ui), P)
        z2h = z2[i] * h[:, None]

        y_arg = y_hat
        for _ in range(2):
            f_val = _bcast(spec.backward_f.value(t, xi, y_arg, z1[i], z2[i], ui), P, m)
            y_arg = y_hat - (f_val - z2h) * dt
        y[i] = y_arg

        diag.condition_numbers.append(step.condition)
        diag.residual_rms.append(float(np.sqrt(np.mean((y_next - y_hat) ** 2))))

    diag.condition_numbers.reverse()
    diag.residual_rms.reverse()
    return BackwardTrajectories(y=y, z1=z1, z2=z2, diagnostics=diag)


def solve_adjoint(
    spec: ProblemSpec,
    u: ControlProcess,
    fwd: ForwardTrajectories,
    bwd: BackwardTrajectories,
    noise: NoiseBundle,
    basis: BasisSpec = BasisSpec(),
) -> AdjointTrajectories:
    """Solve the multiplier system along a given admissible pair.

    Order: the scalar value system (r, R1, R2) first, because R2 enters the
    Hamiltonian partials through the shifted slot; then the forward k
    equation (whose drift and diffusions involve no other multiplier); then
    the backward p system, which consumes both.  Increments of the rotated
    observation noise are reconstructed pathwise as dY - h dt.
    """
    _check_bundles(u, fwd, noise)
    if bwd.y.shape[1] != fwd.n_paths or bwd.y.shape[0] != fwd.grid.steps + 1:
        raise GridMismatchError("backward trajectories do not match the forward bundle")
    grid = noise.grid
    P, N = fwd.n_paths, grid.steps
    n, m = spec.dim_x, spec.dim_y
    dt = grid.dt
    times = grid.times

    diag = RegressionDiagnostics(
        basis_degree=basis.degree, basis_size=basis.size(spec.dim_x)
    )

    h_all = np.empty((N, P))
    for i in range(N):
        h_all[i] = _bcast(spec.observation_h.value(times[i], fwd.x[i], u.values[i]), P)

    # value system: dr = -l dt + R1 dW + R2 dW^u, r(T) = Phi(x(T))
    r = np.empty((N + 1, P))
    R1 = np.empty((N, P))
    R2 = np.empty((N, P))
    r[N] = _bcast(spec.terminal_Phi.value(fwd.x[N]), P)
    for i in reversed(range(N)):
        xi = fwd.x[i]
        step = _StepFit(xi, basis)
        r_next = r[i + 1]
        r_hat, _ = step.fit(r_next)
        resid = r_next - r_hat
        fitted_R, _ = step.fit(
            np.column_stack([resid * noise.dW[:, i], resid * noise.dY[:, i]])
        )
        R1[i] = fitted_R[:, 0] / dt
        R2[i] = fitted_R[:, 1] / dt
        l_val = _bcast(
            spec.running_l.value(times[i], xi, bwd.y[i], bwd.z1[i], bwd.z2[i], u.values[i]),
            P,
        )
        r[i] = r_hat + (l_val + R2[i] * h_all[i]) * dt
        diag.condition_numbers.append(step.condition)
        diag.residual_rms.append(float(np.sqrt(np.mean((r_next - r_hat) ** 2))))

    # forward multiplier: dk = -H_y dt - H_z1 dW - H_z2 dW^u, k(0) = -gamma_y(y(0))
    k = np.empty((N + 1, P, m))
    k[0] = -_bcast(spec.initial_gamma.dy(bwd.y[0]), P, m)
    for i in range(N):
        t = times[i]
        xi = fwd.x[i]
        yi, z1i, z2i = bwd.y[i], bwd.z1[i], bwd.z2[i]
        ui = u.values[i]
        ki = k[i]
        h_y = ham.partial_y(spec, t, xi, yi, z1i, z2i, ui, ki)
        h_z1 = ham.partial_z1(spec, t, xi, yi, z1i, z2i, ui, ki)
        h_z2 = ham.partial_z2(spec, t, xi, yi, z1i, z2i, ui, ki)
        for name, arr in (("H_y", h_y), ("H_z1", h_z1), ("H_z2", h_z2)):
            if not np.isfinite(arr).all():
                raise FbsdeError(f"non-finite Hamiltonian partial {name} at step {i}")
        dwu = noise.dY[:, i] - h_all[i] * dt
        k[i + 1] = ki - h_y * dt - h_z1 * noise.dW[:, i, None] - h_z2 * dwu[:, None]

    # state multiplier: dp = -H_x dt + q1 dW + q2 dW^u,
    # p(T) = Phi_x(x(T)) - phi_x(x(T))^T k(T)
    p = np.empty((N + 1, P, n))
    q1 = np.empty((N, P, n))
    q2 = np.empty((N, P, n))
    phi_x = _bcast(spec.terminal_phi.dx(fwd.x[N]), P, m, n)
    p[N] = _bcast(spec.terminal_Phi.dx(fwd.x[N]), P, n) - np.einsum(
        "pij,pi->pj", phi_x, k[N]
    )
    for i in reversed(range(N)):
        t = times[i]
        xi = fwd.x[i]
        yi, z1i, z2i = bwd.y[i], bwd.z1[i], bwd.z2[i]
        ui = u.values[i]
        step = _StepFit(xi, basis)
        p_next = p[i + 1]
        p_hat, _ = step.fit(p_next)
        resid = p_next - p_hat
        fitted_q, _ = step.fit(
            np.concatenate(
                [resid * noise.dW[:, i, None], resid * noise.dY[:, i, None]], axis=1
            )
        )
        q1[i] = fitted_q[:, :n] / dt
        q2[i] = fitted_q[:, n:] / dt

        q2h = q2[i] * h_all[i, :, None]
        p_arg = p_hat
        for _ in range(2):
            mult = ham.MultiplierPoint(k=k[i], p=p_arg, q1=q1[i], q2=q2[i], R2=R2[i])
            h_x = ham.partial_x(spec, t, xi, yi, z1i, z2i, ui, mult)
            if not np.isfinite(h_x).all():
                raise FbsdeError(f"non-finite Hamiltonian partial H_x at step {i}")
            p_arg = p_hat + (h_x + q2h) * dt
        p[i] = p_arg
        diag.condition_numbers.append(step.condition)
        diag.residual_rms.append(float(np.sqrt(np.mean((p_next - p_hat) ** 2))))

    return AdjointTrajectories(k=k, p=p, q1=q1, q2=q2, r=r, R1=R1, R2=R2, diagnostics=diag)


def backward_to_csv(bwd: BackwardTrajectories, path: str) -> None:
    n_nodes, P, m = bwd.y.shape
    with open(path, "w", newline="") as handle:
        cols = (
            [f"y{j}" for j in range(m)]
            + [f"z1_{j}" for j in range(m)]
            + [f"z2_{j}" for j in range(m)]
        )
        handle.write("path,step," + ",".join(cols) + "\n")
        for pth in range(P):
            for i in range(n_nodes):
                ys = ",".join(repr(float(v)) for v in bwd.y[i, pth])
                if i < n_nodes - 1:
                    zs = ",".join(
                        repr(float(v)) for v in np.concatenate([bwd.z1[i, pth], bwd.z2[i, pth]])
                    )
                else:
                    zs = ",".join(["nan"] * (2 * m))
                handle.write(f"{pth},{i},{ys},{zs}\n")


def adjoint_to_csv(adj: AdjointTrajectories, path: str) -> None:
    n_nodes, P, m = adj.k.shape
    n = adj.p.shape[2]
    with open(path, "w", newline="") as handle:
        cols = (
            [f"k{j}" for j in range(m)]
            + [f"p{j}" for j in range(n)]
            + ["r"]
        )
        handle.write("path,step," + ",".join(cols) + "\n")
        for pth in range(P):
            for i in range(n_nodes):
                ks = ",".join(repr(float(v)) for v in adj.k[i, pth])
                ps = ",".join(repr(float(v)) for v in adj.p[i, pth])
                handle.write(f"{pth},{i},{ks},{ps},{repr(float(adj.r[i, pth]))}\n")
