"""Sub-probability flows, empirical records, and the distances between them.

The population state of the game at time t is a measure with total mass
<= 1: survivors carry density, absorbed players contribute only to the
loss fraction.  Flows live on a fixed rectangular (time x state) grid;
empirical records keep per-particle absorption times and (optionally)
full paths.  Distances between flow rows are reported as a pair
(W1 between survivor-conditioned laws, gap between survivor masses),
because transport distance alone is undefined between measures of
different mass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

# Mass below which a flow row is treated as extinct for conditioning.
MASS_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Equispaced time grid 0..T and state grid threshold..x_max.

    State node 0 sits exactly at the absorbing threshold; densities are
    interpreted as cell averages on cells of width dx centred at the
    nodes, so the total mass of a row is ``dx * row.sum()``.
    """

    time_grid: np.ndarray
    state_grid: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.time_grid, dtype=float)
        x = np.asarray(self.state_grid, dtype=float)
        if t.ndim != 1 or t.size < 2 or x.ndim != 1 or x.size < 2:
            raise ConfigError("grids need at least two time and two state nodes")
        for name, g in (("time", t), ("state", x)):
            steps = np.diff(g)
            if steps.min() <= 0:
                raise ConfigError(f"{name} grid must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise ConfigError(f"{name} grid must be equispaced")
        object.__setattr__(self, "time_grid", t)
        object.__setattr__(self, "state_grid", x)

    @classmethod
    def regular(cls, horizon: float, time_steps: int, threshold: float,
                x_max: float, space_cells: int) -> "GridSpec":
        if time_steps < 1 or space_cells < 2:
            raise ConfigError("time_steps >= 1 and space_cells >= 2 required")
        if x_max <= threshold:
            raise ConfigError("x_max must exceed the absorbing threshold")
        return cls(np.linspace(0.0, horizon, time_steps + 1),
                   np.linspace(threshold, x_max, space_cells + 1))

    @property
    def dt(self) -> float:
        return float(self.time_grid[1] - self.time_grid[0])

    @property
    def dx(self) -> float:
        return float(self.state_grid[1] - self.state_grid[0])

    @property
    def threshold(self) -> float:
        return float(self.state_grid[0])

    @property
    def x_max(self) -> float:
        return float(self.state_grid[-1])

    @property
    def num_steps(self) -> int:
        return self.time_grid.size - 1

    @property
    def num_cells(self) -> int:
        return self.state_grid.size - 1

    def time_index(self, t: float) -> int:
        k = int(round((t - self.time_grid[0]) / self.dt))
        if k < 0 or k >= self.time_grid.size or abs(self.time_grid[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"t={t} is not on the time grid")
        return k

    def same_grids(self, other: "GridSpec") -> bool:
        return (self.time_grid.shape == other.time_grid.shape
                and self.state_grid.shape == other.state_grid.shape
                and np.allclose(self.time_grid, other.time_grid, rtol=1e-12, atol=1e-12)
                and np.allclose(self.state_grid, other.state_grid, rtol=1e-12, atol=1e-12))


# ---------------------------------------------------------------------------
# Sub-probability flows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubProbFlow:
    """Time-indexed sub-probability densities plus derived traces.

    density[k, j] is the survivor density at time_grid[k], state node j.
    Node 0 (the absorbing threshold) is forced to zero.  survivor_mass is
    the row quadrature, loss_trace = 1 - survivor_mass, and mean_trace is
    the quadrature of the interaction weight against the row.
    """

    grid: GridSpec
    density: np.ndarray
    survivor_mass: np.ndarray
    loss_trace: np.ndarray
    mean_trace: np.ndarray
    clipped: int = 0

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        expected = (self.grid.time_grid.size, self.grid.state_grid.size)
        if d.shape != expected:
            raise ConfigError(f"density shape {d.shape} != grid shape {expected}")
        if d.min() < -1e-12:
            raise ConfigError(f"negative density {d.min():.3e}")
        if np.abs(d[:, 0]).max() > 0.0:
            raise ConfigError("threshold column of the density must be zero")
        object.__setattr__(self, "density", d)

    @classmethod
    def from_density(cls, grid: GridSpec, density: np.ndarray,
                     weight_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                     mean_trace: np.ndarray | None = None,
                     clipped: int = 0) -> "SubProbFlow":
        density = np.array(density, dtype=float)
        density[:, 0] = 0.0
        mass = density.sum(axis=1) * grid.dx
        if mean_trace is None:
            if weight_fn is None:
                mean_trace = np.zeros_like(mass)
            else:
                wvals = np.asarray(weight_fn(grid.state_grid), dtype=float)
                mean_trace = density @ wvals * grid.dx
        return cls(grid, density, mass, 1.0 - mass, np.asarray(mean_trace, float), clipped)

    def check_invariants(self, *, require_initial_mass: bool = True,
                         atol: float = 1e-12) -> None:
        """Assert the structural flow invariants, raising ConfigError on failure."""
        mass = self.survivor_mass
        if np.abs(mass + self.loss_trace - 1.0).max() > 1e-12 * mass.size:
            raise ConfigError("survivor_mass + loss_trace != 1")
        if mass.min() < -atol or mass.max() > 1.0 + 1e-9:
            raise ConfigError("survivor mass outside [0, 1]")
        if np.diff(mass).max() > 1e-10:
            raise ConfigError("survivor mass must be non-increasing")
        if require_initial_mass and abs(mass[0] - 1.0) > 1e-9:
            raise ConfigError(f"initial survivor mass {mass[0]} != 1")

    def conditional_cdf(self, k: int) -> np.ndarray:
        """Cumulative mass (normalised to 1) at cell right edges for row k."""
        mass = self.survivor_mass[k]
        if mass <= MASS_FLOOR:
            raise DomainError(f"row {k} has (near) zero mass; conditional law undefined")
        cdf = np.cumsum(self.density[k]) * self.grid.dx / mass
        # round-off in conservative solves can leave ~1e-18 dips
        return np.maximum.accumulate(cdf)

    def conditional_quantiles(self, k: int, q: np.ndarray) -> np.ndarray:
        """Inverse conditional CDF at levels q via in-cell linear interpolation."""
        cdf = self.conditional_cdf(k)
        x = self.grid.state_grid
        dx = self.grid.dx
        edges = np.concatenate(([x[0] - 0.5 * dx], x + 0.5 * dx))
        full = np.concatenate(([0.0], cdf))
        q = np.clip(np.asarray(q, float), 0.0, 1.0)
        idx = np.searchsorted(full, q, side="left")
        idx = np.clip(idx, 1, full.size - 1)
        lo, hi = full[idx - 1], full[idx]
        frac = np.where(hi > lo, (q - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
        return edges[idx - 1] + frac * dx


@dataclass(frozen=True)
class EmpiricalRecord:
    """Output of a particle simulation.

    absorption_times uses +inf for players still alive at the horizon.
    positions holds the full (K+1, N) path matrix only when the
    simulation was asked to store it; final_positions is always present.
    Absorbed players are frozen at the threshold from the step after
    their recorded exit time (stopped-path convention).
    """

    time_grid: np.ndarray
    absorption_times: np.ndarray
    final_positions: np.ndarray
    loss_trace: np.ndarray
    mean_trace: np.ndarray
    seed: int
    positions: np.ndarray | None = None
    sup_abs: np.ndarray | None = None

    @property
    def num_players(self) -> int:
        return self.absorption_times.size

    def alive_at(self, t: float) -> np.ndarray:
        return self.absorption_times > t

    def positions_at(self, k: int) -> np.ndarray:
        if self.positions is None:
            if k == self.time_grid.size - 1:
                return self.final_positions
            raise DomainError("record does not store full paths")
        return self.positions[k]


def loss_at(record: EmpiricalRecord, t: float) -> float:
    """Fraction of players absorbed by time t (tau <= t)."""
    return float(np.mean(record.absorption_times <= t))


def mean_at(record: EmpiricalRecord, weight_fn: Callable[[np.ndarray], np.ndarray],
            t: float) -> float:
    """Average of the weight over survivors, normalised by the full count.

    Absorbed players contribute zero; the sum is divided by N, never by
    the survivor count.
    """
    k = _record_time_index(record, t)
    alive = record.alive_at(t)
    if not alive.any():
        return 0.0
    pos = record.positions_at(k)
    return float(np.sum(weight_fn(pos[alive])) / record.num_players)


def _record_time_index(record: EmpiricalRecord, t: float) -> int:
    dt = record.time_grid[1] - record.time_grid[0]
    k = int(round((t - record.time_grid[0]) / dt))
    if k < 0 or k >= record.time_grid.size or abs(record.time_grid[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise DomainError(f"t={t} is not on the record's time grid")
    return k


def flow_from_record(record: EmpiricalRecord, grid: GridSpec,
                     weight_fn: Callable[[np.ndarray], np.ndarray] | None = None
                     ) -> SubProbFlow:
    """Histogram the surviving particles of a record onto a flow grid.

    Particles bin to the nearest state node; alive particles falling into
    the threshold cell or beyond x_max are clipped to the nearest interior
    cell and counted in ``flow.clipped``.  Row masses equal the alive
    fraction exactly.
    """
    if record.positions is None:
        raise DomainError("flow_from_record needs a record with stored paths")
    if record.time_grid.size != grid.time_grid.size or not np.allclose(
            record.time_grid, grid.time_grid, rtol=1e-9, atol=1e-12):
        raise ConfigError("record and target grid have different time grids")
    n = record.num_players
    dx = grid.dx
    j_max = grid.state_grid.size - 1
    density = np.zeros((grid.time_grid.size, grid.state_grid.size))
    clipped = 0
    for k, t in enumerate(grid.time_grid):
        alive = record.absorption_times > t
        if not alive.any():
            continue
        pos = record.positions[k][alive]
        bins = np.rint((pos - grid.threshold) / dx).astype(np.int64)
        clipped += int(np.count_nonzero(bins < 1) + np.count_nonzero(bins > j_max))
        bins = np.clip(bins, 1, j_max)
        counts = np.bincount(bins, minlength=j_max + 1)
        density[k] = counts / (n * dx)
    if weight_fn is None:
        mean_trace = record.mean_trace.copy()
    else:
        mean_trace = None
    if clipped:
        logger.info("flow_from_record clipped %d particle-time samples to the grid box", clipped)
    return SubProbFlow.from_density(grid, density, weight_fn=weight_fn,
                                    mean_trace=mean_trace, clipped=clipped)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def wasserstein1_samples(a: Sequence[float], b: Sequence[float]) -> float:
    """1-d optimal transport distance between two sample clouds.

    For equal sizes this is the mean absolute difference of order
    statistics.  Unequal sizes are resampled to a common size with
    interpolated quantiles (logged when triggered).
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise DomainError("wasserstein1_samples needs non-empty inputs")
    if a.size != b.size:
        logger.info("wasserstein1_samples resampling %d vs %d to common quantiles",
                    a.size, b.size)
        m = max(a.size, b.size)
        q = (np.arange(m) + 0.5) / m
        a = np.quantile(a, q)
        b = np.quantile(b, q)
    return float(np.mean(np.abs(a - b)))


def wasserstein1_flows(a: SubProbFlow, b: SubProbFlow, t: float) -> tuple[float, float]:
    """(conditional W1, survivor-mass gap) between two flow rows at time t.

    Rows are rescaled to probability measures before transport; the mass
    difference is returned alongside.  Raises DomainError when either row
    is extinct (caller must branch on extinction).
    """
    if not a.grid.same_grids(b.grid):
        raise ConfigError("wasserstein1_flows requires identical grids")
    k = a.grid.time_index(t)
    gap = abs(float(a.survivor_mass[k] - b.survivor_mass[k]))
    cdf_a = a.conditional_cdf(k)
    cdf_b = b.conditional_cdf(k)
    dist = float(np.sum(np.abs(cdf_a - cdf_b)) * a.grid.dx)
    return dist, gap


def wasserstein1_sample_flow(samples: np.ndarray, flow: SubProbFlow, t: float) -> float:
    """W1 between a sample cloud and the survivor-conditioned flow row at t.

    The flow row is represented by as many interpolated quantiles as there
    are samples, so the comparison has sub-cell resolution.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise DomainError("empty sample set")
    k = flow.grid.time_index(t)
    q = (np.arange(samples.size) + 0.5) / samples.size
    ref = flow.conditional_quantiles(k, q)
    return float(np.mean(np.abs(np.sort(samples) - ref)))


def alpha_weighted_distance(per_time_distance: Callable[[np.ndarray], np.ndarray],
                            alpha: float, horizon: float,
                            num_intervals: int = 512) -> float:
    """sqrt of the exponentially discounted time-quadrature of d_t^2.

    Computes (integral_0^T e^{-alpha t} d_t^2 dt)^{1/2} with the trapezoid
    rule; ``per_time_distance`` must accept a vector of times.
    """
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    t = np.linspace(0.0, horizon, num_intervals + 1)
    d = np.asarray(per_time_distance(t), dtype=float)
    integrand = np.exp(-alpha * t) * d * d
    return float(np.sqrt(np.trapezoid(integrand, t)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MATRIX_MAGIC = "# mfglab-matrix v1"
_MATRIX_KINDS = ("density", "value", "policy")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_flow_csv(flow: SubProbFlow, path: str | Path) -> None:
    """Trace file: one row per time with columns t,survivor_mass,loss,mean."""
    lines = ["t,survivor_mass,loss,mean"]
    for k, t in enumerate(flow.grid.time_grid):
        lines.append(",".join([_fmt(t), _fmt(flow.survivor_mass[k]),
                               _fmt(flow.loss_trace[k]), _fmt(flow.mean_trace[k])]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_matrix(path: str | Path, kind: str, grid: GridSpec, values: np.ndarray) -> None:
    """Grid-function file shared by densities, value fields and policies."""
    if kind not in _MATRIX_KINDS:
        raise DomainError(f"unknown matrix kind {kind!r}")
    values = np.asarray(values, dtype=float)
    header = [
        _MATRIX_MAGIC,
        f"# kind={kind}",
        f"# time {_fmt(grid.time_grid[0])} {_fmt(grid.time_grid[-1])} {grid.num_steps}",
        f"# state {_fmt(grid.state_grid[0])} {_fmt(grid.state_grid[-1])} {grid.num_cells}",
    ]
    body = [" ".join(_fmt(v) for v in row) for row in values]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_matrix(path: str | Path) -> tuple[str, GridSpec, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 5 or lines[0] != _MATRIX_MAGIC:
        raise ConfigError(f"{path}: not a matrix file")
    kind = lines[1].removeprefix("# kind=")
    if kind not in _MATRIX_KINDS:
        raise ConfigError(f"{path}: unknown kind {kind!r}")
    t0, t1, k = lines[2].removeprefix("# time ").split()
    x0, x1, j = lines[3].removeprefix("# state ").split()
    grid = GridSpec(np.linspace(float(t0), float(t1), int(k) + 1),
                    np.linspace(float(x0), float(x1), int(j) + 1))
    values = np.array([[float(v) for v in line.split()] for line in lines[4:]])
    if values.shape != (grid.time_grid.size, grid.state_grid.size):
        raise ConfigError(f"{path}: matrix shape mismatch")
    return kind, grid, values
