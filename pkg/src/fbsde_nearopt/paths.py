"""Time grids and driving-noise generation.

Two one-dimensional noise streams drive every simulation: increments of the
internal Brownian motion W and of the observation process Y, independent
under the reference measure.  Bundles are either Gaussian Monte-Carlo draws
or the exhaustive binomial (+/- sqrt(dt)) enumeration used by the oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import FbsdeError

MAX_BINOMIAL_PATHS = 10**6


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * dt on [0, T] with N steps."""

    horizon: float
    steps: int

    def __post_init__(self) -> None:
        if not (self.horizon > 0.0 and np.isfinite(self.horizon)):
            raise FbsdeError(f"horizon must be a positive real, got {self.horizon}")
        if self.steps < 1:
            raise FbsdeError(f"steps must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def matches(self, other: "TimeGrid") -> bool:
        return self.steps == other.steps and abs(self.horizon - other.horizon) <= 1e-12


def make_time_grid(horizon: float, steps: int) -> TimeGrid:
    return TimeGrid(horizon=float(horizon), steps=int(steps))


@dataclass(frozen=True)
class NoiseBundle:
    """Per-path increment matrices for (W, Y), plus provenance.

    ``weights`` is None for equally weighted Monte-Carlo paths; the binomial
    enumeration carries exact uniform weights 4**-N (summing to 1 exactly,
    being a power of two).
    """

    grid: TimeGrid
    dW: np.ndarray
    dY: np.ndarray
    seed: int | None = None
    kind: str = "gaussian"
    weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.dW.shape != self.dY.shape:
            raise FbsdeError("dW and dY must have identical shape")
        if self.dW.ndim != 2 or self.dW.shape[1] != self.grid.steps:
            raise FbsdeError(
                f"increment matrices must be (paths, {self.grid.steps}), got {self.dW.shape}"
            )

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]


def sample_noise(grid: TimeGrid, n_paths: int, seed: int) -> NoiseBundle:
    """Draw Gaussian increments, reproducibly.

    W and Y come from two spawned Philox substreams, each filled path-major,
    so a bundle with fewer paths is a bitwise prefix of a larger one drawn
    from the same seed.
    """
    if n_paths < 1:
        raise FbsdeError(f"n_paths must be >= 1, got {n_paths}")
    ss = np.random.SeedSequence(seed)
    child_w, child_y = ss.spawn(2)
    scale = np.sqrt(grid.dt)
    dW = np.random.Generator(np.random.Philox(child_w)).standard_normal((n_paths, grid.steps))
    dY = np.random.Generator(np.random.Philox(child_y)).standard_normal((n_paths, grid.steps))
    dW *= scale
    dY *= scale
    return NoiseBundle(grid=grid, dW=dW, dY=dY, seed=seed, kind="gaussian")


def binomial_signs(steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Sign matrices (+/-1) of all 4**steps joint (W, Y) sign paths.

    Path index encodes step 0 in the most significant crumb, so paths
    sharing a history prefix occupy contiguous index blocks.
    """
    n_paths = 4**steps
    idx = np.arange(n_paths, dtype=np.int64)
    shifts = 2 * (steps - 1 - np.arange(steps, dtype=np.int64))
    crumbs = (idx[:, None] >> shifts[None, :]) & 3
    sw = 2 * (crumbs & 1) - 1
    sy = 2 * ((crumbs >> 1) & 1) - 1
    return sw.astype(np.float64), sy.astype(np.float64)


def enumerate_binomial(grid: TimeGrid) -> NoiseBundle:
    """All 4**N sign paths with increments +/- sqrt(dt) and exact weights."""
    n_paths = 4**grid.steps
    if n_paths > MAX_BINOMIAL_PATHS:
        raise FbsdeError(
            f"binomial enumeration needs 4^{grid.steps} = {n_paths} paths, "
            f"over the {MAX_BINOMIAL_PATHS} budget (use N <= 9)"
        )
    sw, sy = binomial_signs(grid.steps)
    scale = np.sqrt(grid.dt)
    weights = np.full(n_paths, 4.0 ** -grid.steps)
    return NoiseBundle(
        grid=grid,
        dW=sw * scale,
        dY=sy * scale,
        seed=None,
        kind="binomial",
        weights=weights,
    )


def save_noise_csv(bundle: NoiseBundle, path: str) -> None:
    """Write one row per path: dW_0..dW_{N-1}, dY_0..dY_{N-1}."""
    steps = bundle.grid.steps
    header = [f"dW_{i}" for i in range(steps)] + [f"dY_{i}" for i in range(steps)]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["horizon", bundle.grid.horizon, "steps", steps])
        writer.writerow(header)
        for j in range(bundle.n_paths):
            writer.writerow(
                [repr(float(v)) for v in bundle.dW[j]] + [repr(float(v)) for v in bundle.dY[j]]
            )


def load_noise_csv(path: str) -> NoiseBundle:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        meta = next(reader)
        horizon, steps = float(meta[1]), int(meta[3])
        next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows)
    grid = make_time_grid(horizon, steps)
    return NoiseBundle(
        grid=grid, dW=data[:, :steps], dY=data[:, steps:], seed=None, kind="imported"
    )


def save_noise_npz(bundle: NoiseBundle, path: str) -> None:
    np.savez(
        path,
        horizon=bundle.grid.horizon,
        steps=bundle.grid.steps,
        dW=bundle.dW,
        dY=bundle.dY,
    )


def load_noise_npz(path: str) -> NoiseBundle:
    data = np.load(path)
    grid = make_time_grid(float(data["horizon"]), int(data["steps"]))
    return NoiseBundle(
        grid=grid, dW=data["dW"], dY=data["dY"], seed=None, kind="imported"
    )
