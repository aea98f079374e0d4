"""Numerical studies of the large-population limit theorems.

Cost estimation over independent replications, the unilateral-deviation
gap curve (does deviating from the shared policy still pay at finite
N?), the convergence rate of the empirical measure towards the limiting
law, mean-one checks for the stochastic exponential that licenses the
measure changes, and uniform-moment scans across truncation levels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .measures import (MASS_FLOOR, GridSpec, SubProbFlow, flow_from_record,
                       wasserstein1_sample_flow)
from .mfg import FixedPointReport
from .model import ModelSpec, TruncationSchedule, truncate_model
from .particle import SimConfig, path_costs, simulate_blocks, simulate_nplayer
from .pde import FeedbackPolicy, solve_hjb
from .streams import TAG_INIT, TAG_NOISE, derive_seed, stream

logger = logging.getLogger(__name__)

_ALLOWED_MOMENTS = (1, 2, 4)

# Paths whose log stochastic exponential exceeds this are flagged.
_LOG_OVERFLOW = 300.0


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Cost estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    mean: float
    se: float
    replications: int


def estimate_cost(model: ModelSpec, policies, player_index: int, n_players: int,
                  replications: int, seed: int, *, dt: float,
                  bridge_correction: bool = True) -> CostEstimate:
    """Mean realized cost of one player over independent replications.

    Each replication simulates the full N-player system from a derived
    seed and evaluates the given player's running-plus-exit cost; the
    standard error is the replication sample deviation over sqrt(R).
    """
    if replications < 2:
        raise DomainError("replications must be at least 2")
    policy_of_player = policies[player_index] if isinstance(policies, (list, tuple)) else policies
    costs = np.empty(replications)
    for r in range(replications):
        config = SimConfig(num_players=n_players, dt=dt,
                           seed=derive_seed(seed, r),
                           bridge_correction=bridge_correction,
                           store_full_paths=True)
        record = simulate_nplayer(model, policies, config)
        costs[r] = path_costs(record, model, policy_of_player,
                              players=np.array([player_index]))[0]
    return CostEstimate(float(costs.mean()),
                        float(costs.std(ddof=1) / np.sqrt(replications)),
                        replications)


# ---------------------------------------------------------------------------
# Deviation-gap study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NashGapRow:
    n_players: int
    j_eq: float
    j_eq_se: float
    j_dev: float
    j_dev_se: float
    gap: float
    gap_se: float


@dataclass(frozen=True)
class NashGapCurve:
    rows: tuple[NashGapRow, ...]

    def __post_init__(self):
        ns = [r.n_players for r in self.rows]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise DomainError("gap curve rows must have increasing N")

    def write_csv(self, path: str | Path) -> None:
        lines = ["N,j_eq,j_eq_se,j_dev,j_dev_se,gap,gap_se"]
        for r in self.rows:
            lines.append(",".join([str(r.n_players)] + [
                _fmt(v) for v in (r.j_eq, r.j_eq_se, r.j_dev, r.j_dev_se,
                                  r.gap, r.gap_se)]))
        Path(path).write_text("\n".join(lines) + "\n")


def nash_gap(model: ModelSpec, solution: FixedPointReport, n_players: int,
             replications: int, grid: GridSpec, seed: int, *,
             dt: float | None = None, pilot_particles: int = 200_000
             ) -> NashGapRow:
    """One row of the deviation-gap curve at population size N.

    J_eq plays everyone on the fixed-point policy.  The deviation policy
    is the value-solve best response to the mean empirical flow of the
    co-players at this same N, estimated from a pilot pool of independent
    N-player systems; J_dev re-runs the same noise with slot 0 of every
    replication on the deviation policy, so co-player randomness is
    shared and the gap J_eq - J_dev is a paired estimate whose standard
    error comes from the per-replication differences.  Replications are
    executed as independent blocks of one vectorised pass, which is the
    same estimator as seed-by-seed simulate_nplayer runs.
    """
    if replications < 2:
        raise DomainError("replications must be at least 2")
    if not solution.converged:
        raise DomainError("nash_gap requires a converged fixed-point solution")
    policy = solution.final_policy
    dt = grid.dt if dt is None else dt

    # Pilot estimate of the mean empirical flow at this population size.
    pilot_blocks = max(1, int(np.ceil(pilot_particles / n_players)))
    pilot = simulate_blocks(model, policy, n_players, pilot_blocks, dt,
                            derive_seed(seed, 10_000), histogram_grid=grid)
    pilot_flow = SubProbFlow.from_density(grid, pilot.pooled_density,
                                          mean_trace=pilot.pooled_mean)
    _, deviation = solve_hjb(model, pilot_flow)

    rep_seed = derive_seed(seed, 1)
    eq = simulate_blocks(model, policy, n_players, replications, dt, rep_seed)
    dev = simulate_blocks(model, policy, n_players, replications, dt, rep_seed,
                          deviant_policy=deviation)
    eq_costs, dev_costs = eq.player0_costs, dev.player0_costs
    diffs = eq_costs - dev_costs
    sqrt_r = np.sqrt(replications)
    return NashGapRow(
        n_players,
        float(eq_costs.mean()), float(eq_costs.std(ddof=1) / sqrt_r),
        float(dev_costs.mean()), float(dev_costs.std(ddof=1) / sqrt_r),
        float(diffs.mean()), float(diffs.std(ddof=1) / sqrt_r))


# ---------------------------------------------------------------------------
# Empirical-measure convergence study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChaosRow:
    n_players: int
    replications: int
    w1_mean: float
    w1_se: float
    massgap_mean: float
    loss_sup_gap_mean: float
    extinct: int


@dataclass(frozen=True)
class ChaosTable:
    rows: tuple[ChaosRow, ...]

    def __post_init__(self):
        ns = [r.n_players for r in self.rows]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise DomainError("chaos table rows must have increasing N")
        if any(r.replications > 1 and r.w1_se <= 0 for r in self.rows
               if np.isfinite(r.w1_se)):
            raise DomainError("standard errors must be positive")

    def write_csv(self, path: str | Path) -> None:
        lines = ["N,reps,w1_mean,w1_se,massgap_mean"]
        for r in self.rows:
            lines.append(",".join([str(r.n_players), str(r.replications),
                                   _fmt(r.w1_mean), _fmt(r.w1_se),
                                   _fmt(r.massgap_mean)]))
        Path(path).write_text("\n".join(lines) + "\n")


def chaos_study(model: ModelSpec, policy: FeedbackPolicy,
                theta_star: SubProbFlow, n_list, replications: int,
                seed: int, *, dt: float | None = None) -> ChaosTable:
    """Distance between the N-player empirical law and the limit law.

    For each N and replication, the whole population plays the shared
    policy; the survivor-conditioned empirical law at the horizon is
    compared to the limit flow's conditional law (transport distance via
    interpolated quantiles) with the survivor-mass gap reported
    separately.  Extinct replications contribute the mass gap only.
    """
    if replications < 1:
        raise DomainError("replications must be at least 1")
    ns = list(n_list)
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise DomainError("n_list must be strictly increasing")
    dt = theta_star.grid.dt if dt is None else dt
    horizon = float(theta_star.grid.time_grid[-1])
    limit_mass = float(theta_star.survivor_mass[-1])

    rows = []
    for n in ns:
        w1s, gaps, loss_gaps = [], [], []
        extinct = 0
        for r in range(replications):
            config = SimConfig(num_players=n, dt=dt,
                               seed=derive_seed(seed, n, r))
            record = simulate_nplayer(model, policy, config)
            alive = record.absorption_times > horizon
            alive_frac = float(np.mean(alive))
            gaps.append(abs(alive_frac - limit_mass))
            loss_gaps.append(float(np.max(np.abs(
                record.loss_trace - theta_star.loss_trace))))
            if not alive.any():
                extinct += 1
                logger.warning("chaos replication N=%d rep=%d went extinct", n, r)
                continue
            w1s.append(wasserstein1_sample_flow(
                record.final_positions[alive], theta_star, horizon))
        w1s = np.asarray(w1s)
        w1_mean = float(w1s.mean()) if w1s.size else float("nan")
        se = float(w1s.std(ddof=1) / np.sqrt(w1s.size)) if w1s.size > 1 else float("nan")
        rows.append(ChaosRow(n, replications, w1_mean, se,
                             float(np.mean(gaps)), float(np.mean(loss_gaps)),
                             extinct))
    return ChaosTable(tuple(rows))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float


def fit_rate(table: ChaosTable) -> RateFit:
    """Least-squares slope of log mean-W1 against log N."""
    if len(table.rows) < 3:
        raise DomainError("fit_rate needs at least 3 rows")
    logn = np.log([r.n_players for r in table.rows])
    logw = np.log([r.w1_mean for r in table.rows])
    slope, intercept = np.polyfit(logn, logw, 1)
    fitted = slope * logn + intercept
    ss_res = float(np.sum((logw - fitted) ** 2))
    ss_tot = float(np.sum((logw - logw.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return RateFit(float(slope), float(intercept), r2)


# ---------------------------------------------------------------------------
# Stochastic-exponential and moment diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MartingaleCheck:
    mean: float
    se: float
    n_paths: int
    overflow_count: int


def martingale_check(model: ModelSpec, policy: FeedbackPolicy,
                     flow: SubProbFlow, n_paths: int, seed: int
                     ) -> MartingaleCheck:
    """Monte Carlo mean of the stochastic exponential of the drift integral.

    Simulates driftless paths X = xi + sigma W on the flow's time grid
    and accumulates log Z via the log-Euler rule
        log Z += b_k dW_k - 0.5 b_k^2 dt,   b = sigma^{-1}(u + bbar),
    with (L, m) read from the flow.  Sub-linear drift makes Z a true
    martingale, so the sample mean must sit at 1 within Monte Carlo
    error.  Paths with log Z beyond +-300 are counted as overflow.
    """
    if n_paths < 1000:
        raise DomainError("n_paths must be at least 1000")
    grid = flow.grid
    dt = grid.dt
    sqdt = np.sqrt(dt)
    x = model.initial_law.ppf(stream(seed, TAG_INIT).random(n_paths))
    logz = np.zeros(n_paths)
    for k in range(grid.num_steps):
        t = float(grid.time_grid[k])
        xi = stream(seed, TAG_NOISE, k).standard_normal(n_paths)
        u = policy.evaluate(t, x)
        b = (u + np.asarray(model.drift_bbar(t, x, float(flow.loss_trace[k]),
                                             float(flow.mean_trace[k])), float)
             ) / model.sigma
        logz += b * sqdt * xi - 0.5 * b * b * dt
        x = x + model.sigma * sqdt * xi
    overflow = int(np.count_nonzero(np.abs(logz) > _LOG_OVERFLOW))
    z = np.exp(logz)
    return MartingaleCheck(float(z.mean()),
                           float(z.std(ddof=1) / np.sqrt(n_paths)),
                           n_paths, overflow)


@dataclass(frozen=True)
class MomentRow:
    level: float
    alpha: int
    estimate: float
    se: float


@dataclass(frozen=True)
class MomentReport:
    rows: tuple[MomentRow, ...]

    def max_over_levels(self, alpha: int) -> float:
        vals = [r.estimate for r in self.rows if r.alpha == alpha]
        if not vals:
            raise KeyError(alpha)
        return max(vals)

    def estimates(self, alpha: int) -> list[float]:
        return [r.estimate for r in self.rows if r.alpha == alpha]


def moment_check(model: ModelSpec, schedule: TruncationSchedule, alpha_list,
                 n_paths: int, seed: int, *, dt: float) -> MomentReport:
    """Running-sup moment estimates across truncation levels.

    For each clamp level the truncated model is simulated with the
    neutral action and a shared seed; E[sup_t |X_t|^alpha] estimates
    must stabilise once the level exceeds the coefficient range (and be
    bit-identical between saturated levels, since clamping is then the
    identity).
    """
    alphas = tuple(int(a) for a in alpha_list)
    if any(a not in _ALLOWED_MOMENTS for a in alphas):
        raise DomainError(f"alpha_list entries must be in {_ALLOWED_MOMENTS}")
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    rows = []
    for level in schedule.levels:
        model_n = truncate_model(model, level)
        config = SimConfig(num_players=n_paths, dt=dt, seed=seed)
        neutral = _neutral_policy(model_n, dt)
        record = simulate_nplayer(model_n, neutral, config)
        sup = record.sup_abs
        for a in alphas:
            vals = sup ** a
            rows.append(MomentRow(level, a, float(vals.mean()),
                                  float(vals.std(ddof=1) / np.sqrt(n_paths))))
    return MomentReport(tuple(rows))


def _neutral_policy(model: ModelSpec, dt: float) -> FeedbackPolicy:
    steps = int(round(model.horizon_T / dt))
    hi = max(abs(model.initial_law.support_max), abs(model.threshold), 1.0) + 1.0
    grid = GridSpec.regular(model.horizon_T, steps, model.threshold,
                            model.threshold + 2 * hi, 2)
    return FeedbackPolicy.constant(grid, 0.0, model.action_set)
