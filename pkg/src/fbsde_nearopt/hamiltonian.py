"""Hamiltonian evaluation, analytic partials, and sampled convexity checks.

The Hamiltonian pairs the running cost with every dynamics coefficient:

    H = l + <b, p> + <sigma1, q1> + <sigma2, q2> + <f, k> + <R2, h>.

Adjoint drifts need its partials evaluated with the last multiplier slot
shifted to R2 - sigma2^T p - z2^T k; the shift only matters for the x- and
u-partials, which carry the observation-drift gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FbsdeError
from .model import ProblemSpec

Array = np.ndarray


def _rows(a, P: int, *trailing: int) -> Array:
    return np.broadcast_to(np.asarray(a, dtype=float), (P, *trailing))


@dataclass(frozen=True)
class MultiplierPoint:
    """Adjoint multipliers (k, p, q1, q2, R2), vectorized over paths."""

    k: Array
    p: Array
    q1: Array
    q2: Array
    R2: Array

    @staticmethod
    def single(k, p, q1, q2, R2) -> "MultiplierPoint":
        return MultiplierPoint(
            k=np.atleast_2d(np.asarray(k, dtype=float)),
            p=np.atleast_2d(np.asarray(p, dtype=float)),
            q1=np.atleast_2d(np.asarray(q1, dtype=float)),
            q2=np.atleast_2d(np.asarray(q2, dtype=float)),
            R2=np.atleast_1d(np.asarray(R2, dtype=float)),
        )

    def scaled(self, factor: float) -> "MultiplierPoint":
        return MultiplierPoint(
            k=factor * self.k,
            p=factor * self.p,
            q1=factor * self.q1,
            q2=factor * self.q2,
            R2=factor * self.R2,
        )


def eval_H(spec: ProblemSpec, t, x, y, z1, z2, u, mult: MultiplierPoint) -> Array:
    """The six-term pairing, per path."""
    P, n = x.shape
    terms = {
        "running_l": _rows(spec.running_l.value(t, x, y, z1, z2, u), P),
        "drift_b": np.einsum(
            "pi,pi->p", _rows(spec.drift_b.value(t, x, u), P, n), _rows(mult.p, P, n)
        ),
        "diffusion_sigma1": np.einsum(
            "pi,pi->p",
            _rows(spec.diffusion_sigma1.value(t, x, u), P, n),
            _rows(mult.q1, P, n),
        ),
        "diffusion_sigma2": np.einsum(
            "pi,pi->p",
            _rows(spec.diffusion_sigma2.value(t, x, u), P, n),
            _rows(mult.q2, P, n),
        ),
        "backward_f": np.einsum(
            "pi,pi->p",
            _rows(spec.backward_f.value(t, x, y, z1, z2, u), P, spec.dim_y),
            _rows(mult.k, P, spec.dim_y),
        ),
        "observation_h": _rows(mult.R2, P) * _rows(spec.observation_h.value(t, x, u), P),
    }
    total = np.zeros(P)
    for name, term in terms.items():
        if not np.all(np.isfinite(term)):
            raise FbsdeError(f"non-finite Hamiltonian term from {name}")
        total = total + term
    return total


def shifted_slot(spec: ProblemSpec, t, x, u, z2, mult: MultiplierPoint) -> Array:
    """R2 - <sigma2(t,x,u), p> - <z2, k>, per path."""
    P, n = x.shape
    s2 = _rows(spec.diffusion_sigma2.value(t, x, u), P, n)
    return (
        _rows(mult.R2, P)
        - np.einsum("pi,pi->p", s2, _rows(mult.p, P, n))
        - np.einsum("pi,pi->p", _rows(z2, P, spec.dim_y), _rows(mult.k, P, spec.dim_y))
    )


def partial_y(spec: ProblemSpec, t, x, y, z1, z2, u, k: Array) -> Array:
    P, m = x.shape[0], spec.dim_y
    f_y = _rows(spec.backward_f.dy(t, x, y, z1, z2, u), P, m, m)
    return _rows(spec.running_l.dy(t, x, y, z1, z2, u), P, m) + np.einsum(
        "pij,pi->pj", f_y, _rows(k, P, m)
    )


def partial_z1(spec: ProblemSpec, t, x, y, z1, z2, u, k: Array) -> Array:
    P, m = x.shape[0], spec.dim_y
    f_z = _rows(spec.backward_f.dz1(t, x, y, z1, z2, u), P, m, m)
    return _rows(spec.running_l.dz1(t, x, y, z1, z2, u), P, m) + np.einsum(
        "pij,pi->pj", f_z, _rows(k, P, m)
    )


def partial_z2(spec: ProblemSpec, t, x, y, z1, z2, u, k: Array) -> Array:
    P, m = x.shape[0], spec.dim_y
    f_z = _rows(spec.backward_f.dz2(t, x, y, z1, z2, u), P, m, m)
    return _rows(spec.running_l.dz2(t, x, y, z1, z2, u), P, m) + np.einsum(
        "pij,pi->pj", f_z, _rows(k, P, m)
    )


def partial_x(spec: ProblemSpec, t, x, y, z1, z2, u, mult: MultiplierPoint) -> Array:
    """x-gradient with the shifted last slot in the observation term."""
    P, n, m = x.shape[0], spec.dim_x, spec.dim_y
    r2s = shifted_slot(spec, t, x, u, z2, mult)
    out = (
        _rows(spec.running_l.dx(t, x, y, z1, z2, u), P, n)
        + np.einsum("pij,pi->pj", _rows(spec.drift_b.dx(t, x, u), P, n, n), _rows(mult.p, P, n))
        + np.einsum(
            "pij,pi->pj",
            _rows(spec.diffusion_sigma1.dx(t, x, u), P, n, n),
            _rows(mult.q1, P, n),
        )
        + np.einsum(
            "pij,pi->pj",
            _rows(spec.diffusion_sigma2.dx(t, x, u), P, n, n),
            _rows(mult.q2, P, n),
        )
        + np.einsum(
            "pij,pi->pj",
            _rows(spec.backward_f.dx(t, x, y, z1, z2, u), P, m, n),
            _rows(mult.k, P, m),
        )
        + r2s[:, None] * _rows(spec.observation_h.dx(t, x, u), P, n)
    )
    return out


def partial_u(spec: ProblemSpec, t, x, y, z1, z2, u, mult: MultiplierPoint) -> Array:
    """u-gradient with the shifted last slot in the observation term."""
    P, n, m, kdim = x.shape[0], spec.dim_x, spec.dim_y, spec.dim_u
    r2s = shifted_slot(spec, t, x, u, z2, mult)
    out = (
        _rows(spec.running_l.du(t, x, y, z1, z2, u), P, kdim)
        + np.einsum("pik,pi->pk", _rows(spec.drift_b.du(t, x, u), P, n, kdim), _rows(mult.p, P, n))
        + np.einsum(
            "pik,pi->pk",
            _rows(spec.diffusion_sigma1.du(t, x, u), P, n, kdim),
            _rows(mult.q1, P, n),
        )
        + np.einsum(
            "pik,pi->pk",
            _rows(spec.diffusion_sigma2.du(t, x, u), P, n, kdim),
            _rows(mult.q2, P, n),
        )
        + np.einsum(
            "pik,pi->pk",
            _rows(spec.backward_f.du(t, x, y, z1, z2, u), P, m, kdim),
            _rows(mult.k, P, m),
        )
        + r2s[:, None] * _rows(spec.observation_h.du(t, x, u), P, kdim)
    )
    return out


@dataclass(frozen=True)
class HPartials:
    dx: Array
    dy: Array
    dz1: Array
    dz2: Array
    du: Array


def eval_H_partials(spec: ProblemSpec, t, x, y, z1, z2, u, mult: MultiplierPoint) -> HPartials:
    """All five partials, each at the shifted multiplier point."""
    parts = HPartials(
        dx=partial_x(spec, t, x, y, z1, z2, u, mult),
        dy=partial_y(spec, t, x, y, z1, z2, u, mult.k),
        dz1=partial_z1(spec, t, x, y, z1, z2, u, mult.k),
        dz2=partial_z2(spec, t, x, y, z1, z2, u, mult.k),
        du=partial_u(spec, t, x, y, z1, z2, u, mult),
    )
    for name in ("dx", "dy", "dz1", "dz2", "du"):
        if not np.all(np.isfinite(getattr(parts, name))):
            raise FbsdeError(f"non-finite Hamiltonian partial H_{name[1:]}")
    return parts


# ---------------------------------------------------------------------------
# sampled convexity diagnosis


@dataclass
class ConvexityReport:
    hamiltonian_ok: bool
    worst_eigenvalue: float
    witness: dict | None
    phi_ok: bool
    worst_phi_violation: float
    gamma_ok: bool
    worst_gamma_violation: float
    n_probes: int
    eig_tol: float

    @property
    def passed(self) -> bool:
        return self.hamiltonian_ok and self.phi_ok and self.gamma_ok

    def to_json(self) -> str:
        payload = {
            "passed": self.passed,
            "hamiltonian_ok": self.hamiltonian_ok,
            "worst_eigenvalue": self.worst_eigenvalue,
            "witness": self.witness,
            "phi_ok": self.phi_ok,
            "worst_phi_violation": self.worst_phi_violation,
            "gamma_ok": self.gamma_ok,
            "worst_gamma_violation": self.worst_gamma_violation,
            "n_probes": self.n_probes,
            "eig_tol": self.eig_tol,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _fd_hessian(fn, v: Array, step: float = 1e-4) -> Array:
    dim = v.shape[0]
    hess = np.empty((dim, dim))
    for i in range(dim):
        for j in range(i, dim):
            vpp = v.copy(); vpp[i] += step; vpp[j] += step
            vpm = v.copy(); vpm[i] += step; vpm[j] -= step
            vmp = v.copy(); vmp[i] -= step; vmp[j] += step
            vmm = v.copy(); vmm[i] -= step; vmm[j] -= step
            hess[i, j] = hess[j, i] = (fn(vpp) - fn(vpm) - fn(vmp) + fn(vmm)) / (
                4.0 * step * step
            )
    return hess


def check_H_convexity(
    spec: ProblemSpec,
    mult_samples: int = 6,
    state_samples: int = 6,
    n_probes: int = 24,
    seed: int = 0,
    eig_tol: float = -1e-6,
    scale: float = 1.0,
) -> ConvexityReport:
    """Probe positive semidefiniteness of the joint (x,y,z1,z2,u) Hessian.

    Report-only: a failing probe is returned as a witness, never raised.
    Midpoint convexity of the terminal and initial costs is probed alongside.
    """
    if n_probes < 1:
        raise FbsdeError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    n, m, kdim = spec.dim_x, spec.dim_y, spec.dim_u
    states = {
        "x": rng.normal(scale=scale, size=(state_samples, n)),
        "y": rng.normal(scale=scale, size=(state_samples, m)),
        "z1": rng.normal(scale=scale, size=(state_samples, m)),
        "z2": rng.normal(scale=scale, size=(state_samples, m)),
        "u": spec.control_set.sample(rng, state_samples),
    }
    mults = [
        MultiplierPoint.single(
            k=rng.normal(scale=scale, size=m),
            p=rng.normal(scale=scale, size=n),
            q1=rng.normal(scale=scale, size=n),
            q2=rng.normal(scale=scale, size=n),
            R2=rng.normal(scale=scale),
        )
        for _ in range(mult_samples)
    ]

    slices = {
        "x": slice(0, n),
        "y": slice(n, n + m),
        "z1": slice(n + m, n + 2 * m),
        "z2": slice(n + 2 * m, n + 3 * m),
        "u": slice(n + 3 * m, n + 3 * m + kdim),
    }
    dim = n + 3 * m + kdim

    worst_eig = np.inf
    witness = None
    for _ in range(n_probes):
        si = int(rng.integers(state_samples))
        mi = int(rng.integers(mult_samples))
        t = float(rng.uniform(0.0, spec.horizon))
        v0 = np.concatenate(
            [states[name][si] for name in ("x", "y", "z1", "z2", "u")]
        )
        mult = mults[mi]

        def h_of(v):
            return float(
                eval_H(
                    spec,
                    t,
                    v[slices["x"]][None, :],
                    v[slices["y"]][None, :],
                    v[slices["z1"]][None, :],
                    v[slices["z2"]][None, :],
                    v[slices["u"]],
                    mult,
                )[0]
            )

        eigs = np.linalg.eigvalsh(_fd_hessian(h_of, v0))
        if eigs[0] < worst_eig:
            worst_eig = float(eigs[0])
            witness = {
                "t": t,
                "x": states["x"][si].tolist(),
                "y": states["y"][si].tolist(),
                "z1": states["z1"][si].tolist(),
                "z2": states["z2"][si].tolist(),
                "u": states["u"][si].tolist(),
                "eigenvalue": float(eigs[0]),
            }

    def midpoint_violation(value_fn, points: Array) -> float:
        worst = 0.0
        for _ in range(n_probes):
            i, j = rng.integers(points.shape[0], size=2)
            a, b = points[i], points[j]
            lhs = float(np.asarray(value_fn(((a + b) / 2.0)[None, :]))[0])
            rhs = 0.5 * (
                float(np.asarray(value_fn(a[None, :]))[0])
                + float(np.asarray(value_fn(b[None, :]))[0])
            )
            worst = max(worst, lhs - rhs)
        return worst

    phi_gap = midpoint_violation(spec.terminal_Phi.value, states["x"])
    gamma_gap = midpoint_violation(spec.initial_gamma.value, states["y"])

    hamiltonian_ok = worst_eig >= eig_tol
    return ConvexityReport(
        hamiltonian_ok=hamiltonian_ok,
        worst_eigenvalue=float(worst_eig),
        witness=None if hamiltonian_ok else witness,
        phi_ok=phi_gap <= 1e-9,
        worst_phi_violation=phi_gap,
        gamma_ok=gamma_gap <= 1e-9,
        worst_gamma_violation=gamma_gap,
        n_probes=n_probes,
        eig_tol=eig_tol,
    )
