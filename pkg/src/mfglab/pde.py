"""Grid solvers: backward value equation and forward killed density.

The backward solver computes the value function of the single-player
control problem against a frozen flow,
    dV/dt + (sigma^2/2) V_xx + min_u [ (u + bbar) V_x + f0(u) + fbar ] = 0,
    V(T, x) = F(T, x),   V(t, threshold) = F(t, threshold),
with implicit diffusion (tridiagonal solve), explicit Hamiltonian using
an upwinded first-derivative stencil, and a per-cell scalar minimisation
over the action interval.  The minimiser receives the diffusion-scaled
slope z = sigma * V_x so that z * sigma^{-1} * (u + bbar) reproduces the
advective term of the equation for any sigma.

The forward solver evolves the survivor density with the same drift
field: conservative finite-volume advection (explicit, upwind) plus
implicit diffusion, a zero-density absorbing cell at the threshold, and
a reflecting far wall.  The absorbed mass is accumulated from the exact
discrete boundary fluxes, which makes `survivor + loss = 1` a genuine
audit of conservativity rather than a bookkeeping identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConfigError, DomainError, SolverError
from .measures import GridSpec, SubProbFlow

if TYPE_CHECKING:
    from .model import ModelSpec

# Number of coarse action samples and golden-section refinements used by
# the Hamiltonian minimiser; 48 refinements shrink the bracket below
# 1e-9 of the action interval.
_COARSE_ACTIONS = 33
_GOLDEN_ITERS = 48
_INV_PHI = 0.5 * (np.sqrt(5.0) - 1.0)

# Relative tolerance for detecting ties when locating the minimiser set.
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class ValueField:
    """Value surface V(t_k, x_j) and its state slope (central differences)."""

    grid: GridSpec
    values: np.ndarray
    slope: np.ndarray

    @classmethod
    def from_values(cls, grid: GridSpec, values: np.ndarray) -> "ValueField":
        values = np.asarray(values, dtype=float)
        slope = np.empty_like(values)
        dx = grid.dx
        slope[:, 1:-1] = (values[:, 2:] - values[:, :-2]) / (2 * dx)
        slope[:, 0] = (values[:, 1] - values[:, 0]) / dx
        slope[:, -1] = (values[:, -1] - values[:, -2]) / dx
        return cls(grid, values, slope)


@dataclass(frozen=True)
class FeedbackPolicy:
    """Markov feedback control stored as a grid function u(t_k, x_j).

    Evaluation is piecewise-constant in time (row k covers
    [t_k, t_{k+1})), linear in state, and clamps both the state to the
    grid box and the action to the action interval.
    """

    grid: GridSpec
    actions: np.ndarray
    action_set: tuple[float, float]

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        lo, hi = self.action_set
        if a.shape != (self.grid.time_grid.size, self.grid.state_grid.size):
            raise ConfigError("policy action matrix does not match the grid")
        if a.min() < lo - 1e-12 or a.max() > hi + 1e-12:
            raise ConfigError("policy stores actions outside the action interval")
        object.__setattr__(self, "actions", np.clip(a, lo, hi))

    @classmethod
    def constant(cls, grid: GridSpec, value: float,
                 action_set: tuple[float, float]) -> "FeedbackPolicy":
        value = float(np.clip(value, *action_set))
        shape = (grid.time_grid.size, grid.state_grid.size)
        return cls(grid, np.full(shape, value), action_set)

    def row_index(self, t: float) -> int:
        k = int(np.floor((t - self.grid.time_grid[0]) / self.grid.dt + 1e-12))
        return int(np.clip(k, 0, self.grid.time_grid.size - 1))

    def evaluate(self, t: float, x: np.ndarray) -> np.ndarray:
        row = self.actions[self.row_index(t)]
        xs = self.grid.state_grid
        pos = (np.asarray(x, dtype=float) - xs[0]) / self.grid.dx
        idx = np.clip(pos.astype(np.int64), 0, xs.size - 2)
        frac = np.clip(pos - idx, 0.0, 1.0)
        u = row[idx] * (1.0 - frac) + row[idx + 1] * frac
        return np.clip(u, *self.action_set)


@dataclass(frozen=True)
class HamiltonianMin:
    u_star: float
    h_min: float
    minimizer_interval: tuple[float, float]


def _minimize_hamiltonian_rows(model: "ModelSpec", t: float, x: np.ndarray,
                               l: float, m: float, z: np.ndarray
                               ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised pointwise minimisation of
    h(u) = f0(t,x,u) + fbar(t,x,l,m) + z sigma^{-1} (u + bbar(t,x,l,m))
    over the action interval, for every grid point at once.

    Convexity of f0 in u makes h convex, so the minimiser set is an
    interval; ties are broken at the interval midpoint.  Returns
    (u_star, h_min, interval_lo, interval_hi).
    """
    lo, hi = model.action_set
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    zs = z / model.sigma

    def g(u):
        return np.asarray(model.running_cost_f0(t, x, u), dtype=float) + zs * u

    ugrid = np.linspace(lo, hi, _COARSE_ACTIONS)
    g_grid = np.stack([g(np.full_like(x, u)) for u in ugrid], axis=-1)
    best = np.argmin(g_grid, axis=-1)

    a = ugrid[np.maximum(best - 1, 0)]
    b = ugrid[np.minimum(best + 1, _COARSE_ACTIONS - 1)]
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    gc, gd = g(c), g(d)
    for _ in range(_GOLDEN_ITERS):
        shrink_right = gc < gd
        b = np.where(shrink_right, d, b)
        a = np.where(shrink_right, a, c)
        c = b - _INV_PHI * (b - a)
        d = a + _INV_PHI * (b - a)
        gc, gd = g(c), g(d)
    u_gold = 0.5 * (a + b)
    g_min = np.minimum(g(u_gold), g_grid.min(axis=-1))

    # Minimiser-set detection on the coarse grid: a genuinely flat
    # stretch ties many grid points.  A strictly convex h usually ties no
    # grid point with the refined minimum, in which case the set is the
    # golden-section point itself.
    tol = _TIE_RTOL * (1.0 + np.abs(g_min)) + 1e-15
    tied = g_grid <= (g_min + tol)[..., None]
    any_tied = tied.any(axis=-1)
    first = np.argmax(tied, axis=-1)
    last = g_grid.shape[-1] - 1 - np.argmax(tied[..., ::-1], axis=-1)
    int_lo = np.where(any_tied, ugrid[first], u_gold)
    int_hi = np.where(any_tied, ugrid[last], u_gold)
    du = ugrid[1] - ugrid[0]
    flat = (int_hi - int_lo) > 1.5 * du
    u_star = np.where(flat, 0.5 * (int_lo + int_hi), u_gold)
    int_lo = np.where(flat, int_lo, u_star)
    int_hi = np.where(flat, int_hi, u_star)

    const = (np.asarray(model.running_cost_fbar(t, x, l, m), dtype=float)
             + zs * np.asarray(model.drift_bbar(t, x, l, m), dtype=float))
    h_min = g_min + const
    return u_star, h_min, int_lo, int_hi


def minimize_hamiltonian(model: "ModelSpec", t: float, x: float, l: float,
                         m: float, z: float) -> HamiltonianMin:
    """Minimise the pointwise Hamiltonian over the action interval.

    z is the diffusion-scaled adjoint slope; for a value surface V the
    caller passes z = sigma * dV/dx.  With a flat Hamiltonian the whole
    action interval minimises and the midpoint is returned.
    """
    arr = np.array([x], dtype=float)
    u, h, a, b = _minimize_hamiltonian_rows(model, t, arr, l, m,
                                            np.array([z], dtype=float))
    return HamiltonianMin(float(u[0]), float(h[0]), (float(a[0]), float(b[0])))


def _check_cfl(max_drift: float, dt: float, dx: float, where: str) -> None:
    if max_drift * dt / dx > 1.0 + 1e-9:
        raise SolverError(
            f"{where}: advection CFL violated (|drift|max dt/dx = "
            f"{max_drift * dt / dx:.3f} > 1); reduce dt or refine time grid")


def _diffusion_banded(nu: float, j_size: int, *, dirichlet_left: bool,
                      far: str) -> np.ndarray:
    """Banded matrix (I - dt*D) for the implicit diffusion solve.

    nu = dt * sigma^2 / (2 dx^2).  Row 0 is either a Dirichlet identity
    row or part of the operator; the far row is 'reflect' (zero-flux,
    used by the density solver) or 'extrapolate' (zero second
    difference, used by the value solver).
    """
    ab = np.zeros((3, j_size))
    ab[0, 1:] = -nu       # superdiagonal
    ab[1, :] = 1 + 2 * nu  # diagonal
    ab[2, :-1] = -nu      # subdiagonal
    if dirichlet_left:
        ab[1, 0] = 1.0
        ab[0, 1] = 0.0
    if far == "reflect":
        ab[1, -1] = 1 + nu
    elif far == "extrapolate":
        # V_J - 2 V_{J-1} + V_{J-2} = 0 replaces the last row; the banded
        # structure only reaches one subdiagonal, so eliminate V_{J-2}
        # after the solve instead: here keep one-sided (zero curvature via
        # ghost V_{J+1} = 2V_J - V_{J-1}, which cancels diffusion).
        ab[1, -1] = 1.0
        ab[2, -2] = 0.0
    else:
        raise ValueError(far)
    return ab


def solve_hjb(model: "ModelSpec", flow: SubProbFlow, grid: GridSpec | None = None
              ) -> tuple[ValueField, FeedbackPolicy]:
    """Backward semi-implicit sweep for the value function and its policy.

    The flow supplies the loss and mean traces frozen into the
    coefficients.  Diffusion is implicit; the optimised advection and
    running cost are explicit with the first derivative upwinded by the
    sign of the optimised total drift.  Boundary rows: exit value
    F(t, threshold) at the threshold, zero curvature at the far wall.
    Raises SolverError on CFL violation or when the sweep develops
    oscillations beyond 10x the natural cost scale.
    """
    grid = flow.grid if grid is None else grid
    if not grid.same_grids(flow.grid):
        raise ConfigError("flow grid does not match the requested solver grid")
    t_grid, x = grid.time_grid, grid.state_grid
    steps, dt, dx = grid.num_steps, grid.dt, grid.dx
    if abs(t_grid[-1] - model.horizon_T) > 1e-9:
        raise ConfigError("grid horizon differs from the model horizon")

    lo, hi = model.action_set
    values = np.empty((steps + 1, x.size))
    actions = np.empty_like(values)
    values[steps] = model.terminal_cost_F(t_grid[-1], x)

    # Natural scale used by the oscillation detector: terminal cost plus
    # the largest running cost reachable on the grid over the horizon.
    f_term = float(np.max(np.abs(values[steps])))
    run_probe = (np.abs(np.asarray(model.running_cost_f0(0.0, x, np.full_like(x, hi)), float))
                 + np.abs(np.asarray(model.running_cost_fbar(0.0, x, 1.0, 0.0), float)))
    cost_scale = 10.0 * (1.0 + f_term + model.horizon_T * (1.0 + float(run_probe.max())))

    nu = dt * model.sigma ** 2 / (2 * dx * dx)
    ab = _diffusion_banded(nu, x.size, dirichlet_left=True, far="extrapolate")

    def extract_policy(k: int, v_row: np.ndarray) -> np.ndarray:
        slope = np.empty_like(v_row)
        slope[1:-1] = (v_row[2:] - v_row[:-2]) / (2 * dx)
        slope[0] = (v_row[1] - v_row[0]) / dx
        slope[-1] = (v_row[-1] - v_row[-2]) / dx
        u, _, _, _ = _minimize_hamiltonian_rows(
            model, float(t_grid[k]), x, float(flow.loss_trace[k]),
            float(flow.mean_trace[k]), model.sigma * slope)
        return u

    actions[steps] = extract_policy(steps, values[steps])

    for k in range(steps - 1, -1, -1):
        v_next = values[k + 1]
        t_next = float(t_grid[k + 1])
        l_next = float(flow.loss_trace[k + 1])
        m_next = float(flow.mean_trace[k + 1])

        u_star = actions[k + 1]
        bbar = np.asarray(model.drift_bbar(t_next, x, l_next, m_next), float)
        drift = u_star + bbar
        _check_cfl(float(np.max(np.abs(drift))), dt, dx, "hjb")

        fwd = np.empty_like(v_next)
        bwd = np.empty_like(v_next)
        fwd[:-1] = (v_next[1:] - v_next[:-1]) / dx
        fwd[-1] = fwd[-2]
        bwd[1:] = (v_next[1:] - v_next[:-1]) / dx
        bwd[0] = bwd[1]
        grad_up = np.where(drift >= 0, fwd, bwd)

        run_cost = (np.asarray(model.running_cost_f0(t_next, x, u_star), float)
                    + np.asarray(model.running_cost_fbar(t_next, x, l_next, m_next), float))
        rhs = v_next + dt * (drift * grad_up + run_cost)
        rhs[0] = float(model.terminal_cost_F(float(t_grid[k]), x[0]))

        v_new = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(v_new)) or np.max(np.abs(v_new)) > cost_scale:
            raise SolverError(
                f"hjb: value blow-up at t={t_grid[k]:.6g} "
                f"(max |V| = {np.max(np.abs(v_new)):.3g}); reduce dt")
        values[k] = v_new
        actions[k] = extract_policy(k, v_new)

    field = ValueField.from_values(grid, values)
    policy = FeedbackPolicy(grid, actions, model.action_set)
    return field, policy


def project_initial_density(model: "ModelSpec", grid: GridSpec) -> np.ndarray:
    """Mass-preserving projection of the initial law onto the state cells.

    Cell j collects the law's mass between the cell edges; the absorbing
    cell at the threshold must stay empty and the law must not carry mass
    beyond the far wall.
    """
    law = model.initial_law
    x, dx = grid.state_grid, grid.dx
    edges = np.concatenate(([x[0] - 0.5 * dx], x + 0.5 * dx))
    cdf = law.cdf(edges)
    cell_mass = np.diff(cdf)
    if cell_mass[0] > 0 or cdf[0] > 0:
        raise ConfigError("initial law has mass in or below the absorbing cell")
    if cdf[-1] < 1.0 - 1e-12:
        raise ConfigError("initial law has mass beyond the far grid wall; "
                          "increase x_max")
    return cell_mass / dx


def solve_killed_fp(model: "ModelSpec", policy: FeedbackPolicy,
                    grid: GridSpec | None = None) -> SubProbFlow:
    """Forward finite-volume solve of the killed density under a policy.

    Explicit upwind advection in flux form, implicit diffusion, absorbing
    (zero-density) cell at the threshold, reflecting far wall.  The loss
    trace accumulates the exact discrete absorption fluxes, so the
    survivor+loss=1 identity certifies conservativity to round-off.
    (L, m) entering the drift are read from the rows built so far.
    """
    grid = policy.grid if grid is None else grid
    if not grid.same_grids(policy.grid):
        raise ConfigError("policy grid does not match the requested solver grid")
    t_grid, x = grid.time_grid, grid.state_grid
    steps, dt, dx = grid.num_steps, grid.dt, grid.dx
    if abs(t_grid[-1] - model.horizon_T) > 1e-9:
        raise ConfigError("grid horizon differs from the model horizon")

    wvals = np.asarray(model.weight_w(x), dtype=float)
    density = np.zeros((steps + 1, x.size))
    loss = np.zeros(steps + 1)
    mean = np.zeros(steps + 1)
    density[0] = project_initial_density(model, grid)
    mean[0] = float(density[0] @ wvals * dx)

    nu = dt * model.sigma ** 2 / (2 * dx * dx)
    ab = _diffusion_banded(nu, x.size, dirichlet_left=True, far="reflect")
    diff_coeff = dt * model.sigma ** 2 / (2 * dx)

    rho = density[0].copy()
    for k in range(steps):
        t = float(t_grid[k])
        l_k, m_k = float(loss[k]), float(mean[k])
        u = policy.actions[k]
        drift = u + np.asarray(model.drift_bbar(t, x, l_k, m_k), float)
        _check_cfl(float(np.max(np.abs(drift))), dt, dx, "killed_fp")

        # Upwind fluxes on the interior interfaces j+1/2, j = 0..J-1.
        v_face = 0.5 * (drift[:-1] + drift[1:])
        flux = np.where(v_face >= 0, v_face * rho[:-1], v_face * rho[1:])
        rho_adv = rho.copy()
        rho_adv[:-1] -= dt / dx * flux
        rho_adv[1:] += dt / dx * flux
        absorbed = dx * rho_adv[0]        # advected into the absorbing cell
        rho_adv[0] = 0.0

        rho_new = solve_banded((1, 1), ab, rho_adv)
        absorbed += diff_coeff * rho_new[1]  # diffusive flux into the threshold
        rho_new[0] = 0.0

        neg = float(rho_new.min())
        if neg < -1e-12:
            raise SolverError(f"killed_fp: negative density {neg:.3e} at "
                              f"t={t_grid[k + 1]:.6g}")

        loss[k + 1] = loss[k] + absorbed
        density[k + 1] = rho_new
        mean[k + 1] = float(rho_new @ wvals * dx)
        rho = rho_new

        balance = abs(dx * rho_new.sum() + loss[k + 1] - 1.0)
        if balance > 1e-6:
            raise SolverError(
                f"killed_fp: mass balance violated by {balance:.3e} at "
                f"t={t_grid[k + 1]:.6g}")

    mass = density.sum(axis=1) * dx
    return SubProbFlow(grid, density, mass, loss, mean)
