"""Problem instances: coefficient maps, control sets, admissible controls.

Coefficient callables are vectorized over a leading path axis: state
arguments arrive as (P, n) arrays (y, z1, z2 as (P, m)), the control as a
flat (k,) vector shared by all paths, and outputs may be returned in any
shape broadcastable to the documented one.  All maps must be pure.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import FbsdeError, InvalidControlError
from .paths import TimeGrid

Array = np.ndarray

PROJECTION_TOL = 1e-12


# ---------------------------------------------------------------------------
# control sets


class ControlSet:
    """Convex compact subset of R^k with exact projection and linear minimization."""

    dim: int

    def project(self, point: Array) -> Array:
        raise NotImplementedError

    def linear_minimize(self, g: Array) -> Array:
        raise NotImplementedError

    def center(self) -> Array:
        raise NotImplementedError

    def contains(self, point: Array, tol: float = PROJECTION_TOL) -> bool:
        point = np.asarray(point, dtype=float)
        return bool(np.linalg.norm(point - self.project(point)) <= tol)

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        raise NotImplementedError


@dataclass(frozen=True)
class Box(ControlSet):
    lower: Array
    upper: Array

    def __post_init__(self) -> None:
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise FbsdeError("box bounds must be 1-d arrays of equal length")
        if np.any(lower > upper):
            raise FbsdeError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def project(self, point: Array) -> Array:
        return np.clip(np.asarray(point, dtype=float), self.lower, self.upper)

    def linear_minimize(self, g: Array) -> Array:
        g = np.asarray(g, dtype=float)
        mid = 0.5 * (self.lower + self.upper)
        return np.where(g > 0.0, self.lower, np.where(g < 0.0, self.upper, mid))

    def center(self) -> Array:
        return 0.5 * (self.lower + self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


@dataclass(frozen=True)
class Ball(ControlSet):
    center_point: Array
    radius: float

    def __post_init__(self) -> None:
        center = np.atleast_1d(np.asarray(self.center_point, dtype=float))
        if self.radius <= 0.0:
            raise FbsdeError("ball radius must be positive")
        object.__setattr__(self, "center_point", center)

    @property
    def dim(self) -> int:
        return self.center_point.shape[0]

    def project(self, point: Array) -> Array:
        point = np.asarray(point, dtype=float)
        offset = point - self.center_point
        norm = np.linalg.norm(offset)
        if norm <= self.radius:
            return point.copy()
        return self.center_point + offset * (self.radius / norm)

    def linear_minimize(self, g: Array) -> Array:
        g = np.asarray(g, dtype=float)
        norm = np.linalg.norm(g)
        if norm == 0.0:
            return self.center_point.copy()
        return self.center_point - g * (self.radius / norm)

    def center(self) -> Array:
        return self.center_point.copy()

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        raw = rng.standard_normal((n, self.dim))
        raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-300)
        radii = self.radius * rng.random(n) ** (1.0 / self.dim)
        return self.center_point + raw * radii[:, None]


def project_onto_U(point: Array, control_set: ControlSet) -> Array:
    """Euclidean projection onto the control set."""
    point = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(point)):
        raise FbsdeError("cannot project a non-finite point")
    return control_set.project(point)


def linear_minimize_over_U(g: Array, control_set: ControlSet) -> Array:
    """argmin over v in U of <g, v>; ties resolved to the set center."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise FbsdeError("linear minimization needs a finite objective vector")
    return control_set.linear_minimize(g)


# ---------------------------------------------------------------------------
# controls


@dataclass(frozen=True)
class ControlProcess:
    """Deterministic piecewise-constant control on a time grid."""

    values: Array
    grid: TimeGrid

    def __post_init__(self) -> None:
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] != self.grid.steps:
            raise FbsdeError(
                f"control needs one value per step: got {values.shape[0]} for N={self.grid.steps}"
            )
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def make_control(
    values: Array,
    grid: TimeGrid,
    control_set: ControlSet,
    project: bool = False,
) -> ControlProcess:
    """Build an admissible control, optionally projecting values into U."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.ndim != 2:
        raise FbsdeError("control values must be a (steps, dim) array")
    if values.shape == (1, grid.steps) and control_set.dim == 1:
        values = values.T
    if project:
        values = np.stack([control_set.project(v) for v in values])
    for i, v in enumerate(values):
        if not control_set.contains(v):
            raise InvalidControlError(
                f"control value at step {i} lies outside U by more than {PROJECTION_TOL}: {v}"
            )
    return ControlProcess(values=values, grid=grid)


def constant_control(value, grid: TimeGrid, control_set: ControlSet) -> ControlProcess:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return make_control(np.tile(value, (grid.steps, 1)), grid, control_set)


def control_to_csv(control: ControlProcess, path: str) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step"] + [f"u{j}" for j in range(control.dim)])
        for i, row in enumerate(control.values):
            writer.writerow([i] + [repr(float(v)) for v in row])


def control_from_csv(path: str, grid: TimeGrid, control_set: ControlSet) -> ControlProcess:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    return make_control(np.asarray(rows), grid, control_set)


# ---------------------------------------------------------------------------
# coefficient containers


@dataclass(frozen=True)
class Coefficient:
    """Map (t, x, u) with partials in x and u.

    value: (P, out); dx: (P, out, n); du: (P, out, k).  A scalar map (the
    observation drift h) uses out-free shapes (P,), (P, n), (P, k).
    """

    value: Callable[[float, Array, Array], Array]
    dx: Callable[[float, Array, Array], Array]
    du: Callable[[float, Array, Array], Array]


@dataclass(frozen=True)
class DriverCoefficient:
    """Map (t, x, y, z1, z2, u) with partials in each state slot."""

    value: Callable
    dx: Callable
    dy: Callable
    dz1: Callable
    dz2: Callable
    du: Callable


@dataclass(frozen=True)
class TerminalCoefficient:
    """Map x -> value with Jacobian dx."""

    value: Callable[[Array], Array]
    dx: Callable[[Array], Array]


@dataclass(frozen=True)
class InitialCoefficient:
    """Map y -> scalar with gradient dy."""

    value: Callable[[Array], Array]
    dy: Callable[[Array], Array]


def zero_coefficient(out_dim: int | None = None) -> Coefficient:
    """Coefficient identically zero (scalar when out_dim is None)."""

    def value(t, x, u):
        P = x.shape[0]
        return np.zeros(P) if out_dim is None else np.zeros((P, out_dim))

    def dx(t, x, u):
        P, n = x.shape
        return np.zeros((P, n)) if out_dim is None else np.zeros((P, out_dim, n))

    def du(t, x, u):
        P = x.shape[0]
        k = np.atleast_1d(u).shape[-1]
        return np.zeros((P, k)) if out_dim is None else np.zeros((P, out_dim, k))

    return Coefficient(value=value, dx=dx, du=du)


def zero_driver(out_dim: int | None = None) -> DriverCoefficient:
    def value(t, x, y, z1, z2, u):
        P = x.shape[0]
        return np.zeros(P) if out_dim is None else np.zeros((P, out_dim))

    def d_wrt(cols: str):
        def deriv(t, x, y, z1, z2, u):
            P, n = x.shape
            m = y.shape[1]
            k = np.atleast_1d(u).shape[-1]
            width = {"x": n, "y": m, "z": m, "u": k}[cols]
            return (
                np.zeros((P, width))
                if out_dim is None
                else np.zeros((P, out_dim, width))
            )

        return deriv

    return DriverCoefficient(
        value=value,
        dx=d_wrt("x"),
        dy=d_wrt("y"),
        dz1=d_wrt("z"),
        dz2=d_wrt("z"),
        du=d_wrt("u"),
    )


# ---------------------------------------------------------------------------
# problem spec


@dataclass(frozen=True)
class ProblemSpec:
    """A full problem instance: dynamics, observation, costs, control set."""

    dim_x: int
    dim_y: int
    dim_u: int
    horizon: float
    drift_b: Coefficient
    diffusion_sigma1: Coefficient
    diffusion_sigma2: Coefficient
    backward_f: DriverCoefficient
    observation_h: Coefficient
    terminal_phi: TerminalCoefficient
    running_l: DriverCoefficient
    terminal_Phi: TerminalCoefficient
    initial_gamma: InitialCoefficient
    initial_x: Array
    control_set: ControlSet
    bound_sigma2_h: float = 100.0
    h_control_free: bool = False
    phi_linear: bool = False
    label: str = "custom"

    def __post_init__(self) -> None:
        if min(self.dim_x, self.dim_y, self.dim_u) < 1:
            raise FbsdeError("dimensions must be positive")
        if self.horizon <= 0.0:
            raise FbsdeError("horizon must be positive")
        x0 = np.atleast_1d(np.asarray(self.initial_x, dtype=float))
        if x0.shape != (self.dim_x,):
            raise FbsdeError(f"initial_x must have shape ({self.dim_x},)")
        if self.control_set.dim != self.dim_u:
            raise FbsdeError("control set dimension must equal dim_u")
        object.__setattr__(self, "initial_x", x0)


def without_observation(spec: ProblemSpec) -> ProblemSpec:
    """The same instance with h replaced by zero (weak-formulation view)."""
    return replace(
        spec,
        observation_h=zero_coefficient(None),
        h_control_free=True,
        label=spec.label + "+h0",
    )


# ---------------------------------------------------------------------------
# validation


@dataclass
class CoefficientCheck:
    name: str
    max_discrepancy: float
    worst_partial: str
    worst_point: list[float]
    finite: bool
    bounded: bool
    message: str = ""

    def passed(self, tol: float) -> bool:
        return self.finite and self.bounded and self.max_discrepancy <= tol


@dataclass
class ValidationReport:
    passed: bool
    tol: float
    samples: int
    seed: int
    checks: list[CoefficientCheck] = field(default_factory=list)

    def failing(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed(self.tol)]

    def to_json(self) -> str:
        payload = {
            "passed": self.passed,
            "tol": self.tol,
            "samples": self.samples,
            "seed": self.seed,
            "checks": [
                {
                    "name": c.name,
                    "max_discrepancy": c.max_discrepancy,
                    "worst_partial": c.worst_partial,
                    "worst_point": c.worst_point,
                    "finite": c.finite,
                    "bounded": c.bounded,
                    "message": c.message,
                }
                for c in self.checks
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


_FD_STEP = 1e-5


def _central_diff(fn: Callable[[Array], Array], point: Array, col: int) -> Array:
    bumped_up = point.copy()
    bumped_up[:, col] += _FD_STEP
    bumped_dn = point.copy()
    bumped_dn[:, col] -= _FD_STEP
    return (fn(bumped_up) - fn(bumped_dn)) / (2.0 * _FD_STEP)


def _check_partials(
    name: str,
    value_of: Callable[[dict[str, Array]], Array],
    partials: dict[str, tuple[Callable[[dict[str, Array]], Array], str]],
    points: dict[str, Array],
    bound: float | None,
) -> CoefficientCheck:
    """Compare declared partials against central differences at sampled points."""
    vals = np.asarray(value_of(points), dtype=float)
    finite = bool(np.all(np.isfinite(vals)))
    bounded = True
    if bound is not None and finite:
        bounded = bool(np.max(np.abs(vals)) <= bound)
    worst = 0.0
    worst_partial = ""
    worst_point: list[float] = []
    message = "" if finite else "non-finite value at a sampled point"
    if finite:
        for pname, (declared_fn, slot) in partials.items():
            declared = np.asarray(declared_fn(points), dtype=float)
            if not np.all(np.isfinite(declared)):
                finite = False
                message = f"non-finite partial {pname}"
                break
            width = points[slot].shape[1]
            for col in range(width):
                def slice_fn(bumped, _slot=slot):
                    local = dict(points)
                    local[_slot] = bumped
                    return np.asarray(value_of(local), dtype=float)

                fd = _central_diff(slice_fn, points[slot], col)
                exact = declared[..., col] if declared.ndim > fd.ndim else declared
                disc = np.abs(exact - fd) / (1.0 + np.abs(exact))
                j = int(np.argmax(disc))
                if disc.flat[j] > worst:
                    worst = float(disc.flat[j])
                    worst_partial = f"{pname}[col {col}]"
                    row = j if disc.ndim == 1 else np.unravel_index(j, disc.shape)[0]
                    worst_point = [float(v) for v in points[slot][row]]
    if not finite and not message:
        message = "non-finite value"
    return CoefficientCheck(
        name=name,
        max_discrepancy=worst,
        worst_partial=worst_partial,
        worst_point=worst_point,
        finite=finite,
        bounded=bounded,
        message=message,
    )


def validate_problem(
    spec: ProblemSpec, samples: int = 100, seed: int = 0, tol: float = 1e-4
) -> ValidationReport:
    """Finite-difference audit of every declared partial, plus bound checks."""
    if samples < 1:
        raise FbsdeError("samples must be >= 1")
    if tol <= 0.0:
        raise FbsdeError("tol must be positive")
    rng = np.random.default_rng(seed)
    n, m = spec.dim_x, spec.dim_y
    ts = rng.uniform(0.0, spec.horizon, size=samples)
    pts = {
        "x": rng.normal(scale=1.0, size=(samples, n)),
        "y": rng.normal(scale=1.0, size=(samples, m)),
        "z1": rng.normal(scale=1.0, size=(samples, m)),
        "z2": rng.normal(scale=1.0, size=(samples, m)),
        "u": spec.control_set.sample(rng, samples),
    }

    checks: list[CoefficientCheck] = []

    def eval_rows(fn, p, with_state: bool):
        # coefficient maps take one shared control; loop over sampled points
        out = []
        for j in range(p["x"].shape[0]):
            row = {key: p[key][j : j + 1] for key in p}
            t = ts[min(j, samples - 1)]
            if with_state:
                out.append(
                    np.asarray(
                        fn(t, row["x"], row["y"], row["z1"], row["z2"], p["u"][j]),
                        dtype=float,
                    )[0]
                )
            else:
                out.append(np.asarray(fn(t, row["x"], p["u"][j]), dtype=float)[0])
        return np.asarray(out)

    for name, coeff, bound in (
        ("drift_b", spec.drift_b, None),
        ("diffusion_sigma1", spec.diffusion_sigma1, None),
        ("diffusion_sigma2", spec.diffusion_sigma2, spec.bound_sigma2_h),
        ("observation_h", spec.observation_h, spec.bound_sigma2_h),
    ):
        checks.append(
            _check_partials(
                name,
                lambda p, c=coeff: eval_rows(c.value, p, False),
                {
                    "dx": ((lambda p, c=coeff: eval_rows(c.dx, p, False)), "x"),
                    "du": ((lambda p, c=coeff: eval_rows(c.du, p, False)), "u"),
                },
                pts,
                bound,
            )
        )

    for name, drv in (("backward_f", spec.backward_f), ("running_l", spec.running_l)):
        checks.append(
            _check_partials(
                name,
                lambda p, c=drv: eval_rows(c.value, p, True),
                {
                    "dx": ((lambda p, c=drv: eval_rows(c.dx, p, True)), "x"),
                    "dy": ((lambda p, c=drv: eval_rows(c.dy, p, True)), "y"),
                    "dz1": ((lambda p, c=drv: eval_rows(c.dz1, p, True)), "z1"),
                    "dz2": ((lambda p, c=drv: eval_rows(c.dz2, p, True)), "z2"),
                    "du": ((lambda p, c=drv: eval_rows(c.du, p, True)), "u"),
                },
                pts,
                None,
            )
        )

    for name, term in (("terminal_phi", spec.terminal_phi), ("terminal_Phi", spec.terminal_Phi)):
        checks.append(
            _check_partials(
                name,
                lambda p, c=term: np.asarray(c.value(p["x"]), dtype=float),
                {"dx": ((lambda p, c=term: np.asarray(c.dx(p["x"]), dtype=float)), "x")},
                pts,
                None,
            )
        )

    checks.append(
        _check_partials(
            "initial_gamma",
            lambda p: np.asarray(spec.initial_gamma.value(p["y"]), dtype=float),
            {"dy": ((lambda p: np.asarray(spec.initial_gamma.dy(p["y"]), dtype=float)), "y")},
            pts,
            None,
        )
    )

    passed = all(c.passed(tol) for c in checks)
    return ValidationReport(passed=passed, tol=tol, samples=samples, seed=seed, checks=checks)


# ---------------------------------------------------------------------------
# built-in instance families


@dataclass(frozen=True)
class LQParams:
    """Diagonal linear-quadratic family: b = a x + b_coef u, sigma1 constant.

    h == 0, sigma2 == 0, f == 0, phi(x) = x and gamma == 0, so the classical
    Riccati oracle applies.  All entries may be scalars or length-n vectors.
    """

    a: float = 0.0
    b_coef: float = 1.0
    sigma: float = 0.02
    q: float = 0.0
    r: float = 1.0
    g: float = 1.0
    horizon: float = 1.0
    initial_x: float = 1.0
    control_lower: float = -1.0
    control_upper: float = 1.0
    dim: int = 1

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key in ("a", "b_coef", "sigma", "q", "r", "g", "initial_x"):
            out[key] = np.broadcast_to(
                np.asarray(getattr(self, key), dtype=float), (self.dim,)
            ).copy()
        return out


def _quadratic_form(weight: Array, v: Array) -> Array:
    return 0.5 * np.sum(weight * v * v, axis=-1)


def make_lq_instance(params: LQParams | None = None, **overrides) -> ProblemSpec:
    """Benchmark LQ instance (full-observation degenerate case)."""
    if params is None:
        params = LQParams(**overrides)
    elif overrides:
        params = replace(params, **overrides)
    if np.any(np.asarray(params.r) <= 0.0):
        raise FbsdeError("LQ family requires r > 0 (Riccati oracle)")
    if np.any(np.asarray(params.q) < 0.0) or np.any(np.asarray(params.g) < 0.0):
        raise FbsdeError("LQ family requires q >= 0 and g >= 0")
    arr = params.arrays()
    n = params.dim
    a, b_coef, sigma = arr["a"], arr["b_coef"], arr["sigma"]
    q, r, g = arr["q"], arr["r"], arr["g"]

    def b_val(t, x, u):
        return a * x + b_coef * np.atleast_1d(u)[None, :]

    def b_dx(t, x, u):
        return np.broadcast_to(np.diag(a), (x.shape[0], n, n))

    def b_du(t, x, u):
        return np.broadcast_to(np.diag(b_coef), (x.shape[0], n, n))

    drift = Coefficient(value=b_val, dx=b_dx, du=b_du)

    def s1_val(t, x, u):
        return np.broadcast_to(sigma, x.shape)

    sig1 = Coefficient(
        value=s1_val,
        dx=lambda t, x, u: np.zeros((x.shape[0], n, n)),
        du=lambda t, x, u: np.zeros((x.shape[0], n, n)),
    )

    def l_val(t, x, y, z1, z2, u):
        uu = np.atleast_1d(u)[None, :]
        return _quadratic_form(q, x) + np.broadcast_to(
            _quadratic_form(r, uu), (x.shape[0],)
        ).copy()

    def l_dx(t, x, y, z1, z2, u):
        return q * x

    def l_du(t, x, y, z1, z2, u):
        return np.broadcast_to(r * np.atleast_1d(u)[None, :], (x.shape[0], n)).copy()

    def l_dzero(t, x, y, z1, z2, u):
        return np.zeros((x.shape[0], n))

    running = DriverCoefficient(
        value=l_val, dx=l_dx, dy=l_dzero, dz1=l_dzero, dz2=l_dzero, du=l_du
    )

    phi = TerminalCoefficient(
        value=lambda x: x.copy(),
        dx=lambda x: np.broadcast_to(np.eye(n), (x.shape[0], n, n)),
    )
    big_phi = TerminalCoefficient(
        value=lambda x: _quadratic_form(g, x), dx=lambda x: g * x
    )
    gamma = InitialCoefficient(
        value=lambda y: np.zeros(y.shape[0]), dy=lambda y: np.zeros_like(y)
    )

    return ProblemSpec(
        dim_x=n,
        dim_y=n,
        dim_u=n,
        horizon=params.horizon,
        drift_b=drift,
        diffusion_sigma1=sig1,
        diffusion_sigma2=zero_coefficient(n),
        backward_f=zero_driver(n),
        observation_h=zero_coefficient(None),
        terminal_phi=phi,
        running_l=running,
        terminal_Phi=big_phi,
        initial_gamma=gamma,
        initial_x=arr["initial_x"],
        control_set=Box(
            lower=np.full(n, params.control_lower),
            upper=np.full(n, params.control_upper),
        ),
        bound_sigma2_h=1.0,
        h_control_free=True,
        phi_linear=True,
        label="lq",
    )


def make_lq_observation_instance(
    params: LQParams | None = None,
    h_const: float = 0.5,
    sigma2: float = 0.3,
    **overrides,
) -> ProblemSpec:
    """LQ dynamics with a constant observation drift and sigma2 != 0.

    No Riccati oracle applies; this family exercises the density weights.
    """
    if params is None:
        params = LQParams(sigma=0.2, q=1.0, **overrides)
    elif overrides:
        params = replace(params, **overrides)
    base = make_lq_instance(params)
    n = params.dim
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (n,)).copy()

    sig2 = Coefficient(
        value=lambda t, x, u: np.broadcast_to(s2, x.shape),
        dx=lambda t, x, u: np.zeros((x.shape[0], n, n)),
        du=lambda t, x, u: np.zeros((x.shape[0], n, n)),
    )
    h = Coefficient(
        value=lambda t, x, u: np.full(x.shape[0], float(h_const)),
        dx=lambda t, x, u: np.zeros((x.shape[0], n)),
        du=lambda t, x, u: np.zeros((x.shape[0], n)),
    )
    return replace(
        base,
        diffusion_sigma2=sig2,
        observation_h=h,
        bound_sigma2_h=max(abs(float(h_const)), float(np.max(np.abs(s2)))) + 1.0,
        h_control_free=True,
        label="lq_obs",
    )


def make_scalar_nonlinear_instance(
    a: float = 0.3,
    b_coef: float = 1.0,
    sigma0: float = 0.2,
    sigma1_x: float = 0.05,
    sigma2_amp: float = 0.1,
    h_amp: float = 0.4,
    f_decay: float = 0.5,
    f_amp: float = 0.2,
    q: float = 1.0,
    r: float = 1.0,
    g: float = 1.0,
    horizon: float = 1.0,
    initial_x: float = 0.5,
    control_radius: float = 1.0,
) -> ProblemSpec:
    """Scalar instance with bounded nonlinear coefficients and h = h(x).

    The state-dependent observation drift makes the density weights
    non-trivial; the sufficient-condition certificate is not applicable here.
    """

    def b_val(t, x, u):
        return a * np.tanh(x) + b_coef * np.atleast_1d(u)[None, :]

    def b_dx(t, x, u):
        return (a * (1.0 - np.tanh(x) ** 2))[:, :, None]

    def b_du(t, x, u):
        return np.full((x.shape[0], 1, 1), b_coef)

    def s1_val(t, x, u):
        return sigma0 + sigma1_x * np.sin(x)

    def s1_dx(t, x, u):
        return (sigma1_x * np.cos(x))[:, :, None]

    def s2_val(t, x, u):
        return sigma2_amp * np.cos(x)

    def s2_dx(t, x, u):
        return (-sigma2_amp * np.sin(x))[:, :, None]

    def h_val(t, x, u):
        return h_amp * np.tanh(x[:, 0])

    def h_dx(t, x, u):
        return h_amp * (1.0 - np.tanh(x) ** 2)

    def f_val(t, x, y, z1, z2, u):
        return -f_decay * y + f_amp * np.sin(x)

    def f_dx(t, x, y, z1, z2, u):
        return (f_amp * np.cos(x))[:, :, None]

    def f_dy(t, x, y, z1, z2, u):
        return np.full((x.shape[0], 1, 1), -f_decay)

    def f_dzero(t, x, y, z1, z2, u):
        return np.zeros((x.shape[0], 1, 1))

    def l_val(t, x, y, z1, z2, u):
        uu = np.atleast_1d(u)
        return 0.5 * q * x[:, 0] ** 2 + 0.5 * r * float(uu @ uu)

    def l_dx(t, x, y, z1, z2, u):
        return q * x

    def l_du(t, x, y, z1, z2, u):
        return np.broadcast_to(r * np.atleast_1d(u)[None, :], (x.shape[0], 1)).copy()

    def l_dzero(t, x, y, z1, z2, u):
        return np.zeros((x.shape[0], 1))

    zero_du = lambda t, x, u: np.zeros((x.shape[0], 1, 1))

    return ProblemSpec(
        dim_x=1,
        dim_y=1,
        dim_u=1,
        horizon=horizon,
        drift_b=Coefficient(value=b_val, dx=b_dx, du=b_du),
        diffusion_sigma1=Coefficient(value=s1_val, dx=s1_dx, du=zero_du),
        diffusion_sigma2=Coefficient(value=s2_val, dx=s2_dx, du=zero_du),
        backward_f=DriverCoefficient(
            value=f_val, dx=f_dx, dy=f_dy, dz1=f_dzero, dz2=f_dzero, du=f_dzero
        ),
        observation_h=Coefficient(
            value=h_val, dx=h_dx, du=lambda t, x, u: np.zeros((x.shape[0], 1))
        ),
        terminal_phi=TerminalCoefficient(
            value=lambda x: x.copy(), dx=lambda x: np.ones((x.shape[0], 1, 1))
        ),
        running_l=DriverCoefficient(
            value=l_val, dx=l_dx, dy=l_dzero, dz1=l_dzero, dz2=l_dzero, du=l_du
        ),
        terminal_Phi=TerminalCoefficient(
            value=lambda x: 0.5 * g * x[:, 0] ** 2, dx=lambda x: g * x
        ),
        initial_gamma=InitialCoefficient(
            value=lambda y: np.zeros(y.shape[0]), dy=lambda y: np.zeros_like(y)
        ),
        initial_x=np.array([initial_x]),
        control_set=Ball(center_point=np.zeros(1), radius=control_radius),
        bound_sigma2_h=max(abs(sigma2_amp), abs(h_amp)) + 0.5,
        h_control_free=False,
        phi_linear=True,
        label="scalar_nonlinear",
    )


def make_double_well_instance(
    a: float = 0.2,
    b_coef: float = 1.0,
    sigma: float = 0.25,
    q: float = 1.0,
    well: float = 0.8,
    weight: float = 1.0,
    g: float = 1.0,
    horizon: float = 1.0,
    initial_x: float = 1.0,
) -> ProblemSpec:
    """Convexity counterexample: running cost with a double well in u."""
    base = make_lq_instance(
        LQParams(a=a, b_coef=b_coef, sigma=sigma, q=q, r=1.0, g=g,
                 horizon=horizon, initial_x=initial_x)
    )

    def l_val(t, x, y, z1, z2, u):
        uu = float(np.atleast_1d(u)[0])
        return 0.5 * q * x[:, 0] ** 2 + 0.25 * weight * np.full(
            x.shape[0], (uu * uu - well * well) ** 2
        )

    def l_dx(t, x, y, z1, z2, u):
        return q * x

    def l_du(t, x, y, z1, z2, u):
        uu = float(np.atleast_1d(u)[0])
        return np.full((x.shape[0], 1), weight * uu * (uu * uu - well * well))

    def l_dzero(t, x, y, z1, z2, u):
        return np.zeros((x.shape[0], 1))

    running = DriverCoefficient(
        value=l_val, dx=l_dx, dy=l_dzero, dz1=l_dzero, dz2=l_dzero, du=l_du
    )
    return replace(base, running_l=running, label="double_well")


BUILTIN_FAMILIES = {
    "lq": make_lq_instance,
    "lq_obs": make_lq_observation_instance,
    "scalar_nonlinear": make_scalar_nonlinear_instance,
    "double_well": make_double_well_instance,
}


def builtin_instance(name: str, **params) -> ProblemSpec:
    if name not in BUILTIN_FAMILIES:
        raise FbsdeError(
            f"unknown instance family {name!r}; available: {sorted(BUILTIN_FAMILIES)}"
        )
    return BUILTIN_FAMILIES[name](**params)
