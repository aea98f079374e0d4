"""Particle simulation of the absorbed interacting system.

The N players follow Euler-Maruyama steps of
    x <- x + (u(t, x) + bbar(t, x, L, m)) dt + sigma sqrt(dt) xi,
where L is the lost fraction and m the weight average over survivors,
both recomputed from the ensemble at the start of every step (explicit
one-step-lagged coupling).  A Brownian-bridge draw per (particle, step)
detects sub-step barrier crossings that the endpoints alone would miss;
exit times are rounded down to the step start and absorbed particles are
frozen at the threshold.

All randomness comes from counter-based streams keyed by
(seed, purpose, step), so a run is reproducible bit for bit regardless
of how the work is scheduled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .errors import BlowupError, ConfigError, DomainError
from .measures import EmpiricalRecord, GridSpec, SubProbFlow
from .streams import TAG_BRIDGE, TAG_INIT, TAG_NOISE, stream

if TYPE_CHECKING:
    from .model import ModelSpec
    from .pde import FeedbackPolicy

# Any |x| beyond this aborts the run: sub-linear drift cannot reach it
# at sane step sizes, so it indicates a mis-configured model.
BLOWUP_GUARD = 1e6

# Absorption time sentinel for players alive at the horizon.
NEVER = np.inf


@dataclass
class SimConfig:
    """Run parameters for one simulation."""

    num_players: int
    dt: float
    seed: int
    bridge_correction: bool = True
    store_full_paths: bool = False

    def __post_init__(self):
        if self.num_players < 1:
            raise ConfigError("num_players must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")

    def num_steps(self, horizon: float) -> int:
        steps = horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError(f"horizon {horizon} is not an integer multiple of dt {self.dt}")
        return int(round(steps))


@dataclass
class ParticleEnsemble:
    """Mutable state of the N-particle system during a run."""

    positions: np.ndarray
    alive: np.ndarray
    tau: np.ndarray
    rng_streams: np.ndarray
    step_index: int = 0

    @classmethod
    def fresh(cls, positions: np.ndarray) -> "ParticleEnsemble":
        n = positions.size
        return cls(positions=np.array(positions, dtype=float),
                   alive=np.ones(n, dtype=bool),
                   tau=np.full(n, NEVER),
                   rng_streams=np.arange(n, dtype=np.uint64))

    @property
    def num_players(self) -> int:
        return self.positions.size


def euler_step(ensemble: ParticleEnsemble, model: "ModelSpec",
               policy_actions: np.ndarray, l: float, m: float,
               dt: float, noise: np.ndarray) -> ParticleEnsemble:
    """Advance alive particles one explicit Euler step; dead ones stay frozen.

    ``policy_actions`` holds the action of every particle at the current
    (time, state); ``noise`` holds one standard Gaussian per particle.
    """
    t = ensemble.step_index * dt
    alive = ensemble.alive
    x = ensemble.positions
    drift = policy_actions + model.drift_bbar(t, x, l, m)
    moved = x + drift * dt + model.sigma * np.sqrt(dt) * noise
    x[alive] = moved[alive]
    ensemble.step_index += 1
    bad = alive & ~np.isfinite(x) | alive & (np.abs(x) > BLOWUP_GUARD)
    if bad.any():
        i = int(np.argmax(bad))
        raise BlowupError(
            f"particle {i} reached {x[i]!r} at step {ensemble.step_index}",
            particle=i, step=ensemble.step_index)
    return ensemble


def bridge_absorption_prob(x_prev, x_next, threshold: float, sigma: float,
                           dt: float):
    """Probability that the path crossed the threshold during one step.

    1 when the right endpoint is already at or below the threshold,
    otherwise the Brownian-bridge barrier-crossing probability
    exp(-2 (x_prev-c)(x_next-c) / (sigma^2 dt)).
    """
    if dt <= 0 or sigma <= 0:
        raise DomainError("bridge_absorption_prob needs dt > 0 and sigma > 0")
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    a = x_prev - threshold
    b = x_next - threshold
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * np.maximum(a, 0.0) * b / (sigma * sigma * dt))
    return np.where(b <= 0.0, 1.0, np.minimum(p, 1.0))


def _policy_groups(policies, n: int) -> list[tuple[object, np.ndarray]]:
    """Group player indices by policy object so evaluation stays vectorised."""
    if not isinstance(policies, (list, tuple)):
        return [(policies, np.arange(n))]
    if len(policies) != n:
        raise ConfigError(f"got {len(policies)} policies for {n} players")
    groups: dict[int, list[int]] = {}
    objs: dict[int, object] = {}
    for i, p in enumerate(policies):
        groups.setdefault(id(p), []).append(i)
        objs[id(p)] = p
    return [(objs[key], np.array(idx)) for key, idx in groups.items()]


def _simulate(model: "ModelSpec", policies, config: SimConfig,
              coupling: Callable[[int, ParticleEnsemble], tuple[float, float]]
              ) -> EmpiricalRecord:
    steps = config.num_steps(model.horizon_T)
    n = config.num_players
    time_grid = np.linspace(0.0, model.horizon_T, steps + 1)
    dt = config.dt
    sqdt = np.sqrt(dt)

    x0 = model.initial_law.ppf(stream(config.seed, TAG_INIT).random(n))
    ens = ParticleEnsemble.fresh(x0)
    groups = _policy_groups(policies, n)
    weight = model.weight_w
    threshold = model.threshold

    loss_trace = np.zeros(steps + 1)
    mean_trace = np.zeros(steps + 1)
    sup_abs = np.abs(ens.positions)
    paths = None
    if config.store_full_paths:
        paths = np.empty((steps + 1, n))
        paths[0] = ens.positions

    actions = np.empty(n)
    for k in range(steps):
        t = time_grid[k]
        # Mean-field inputs are lagged: taken from the ensemble at step
        # start, before this step's absorptions are known.
        l_k, m_k = coupling(k, ens)
        for policy, idx in groups:
            actions[idx] = policy.evaluate(t, ens.positions[idx])
        noise = stream(config.seed, TAG_NOISE, k).standard_normal(n)
        prev = ens.positions.copy()
        try:
            euler_step(ens, model, actions, l_k, m_k, dt, noise)
        except BlowupError as err:
            raise BlowupError(f"{err} (t={t:.6g})", particle=err.particle,
                              step=err.step) from None

        alive = ens.alive
        if config.bridge_correction:
            uniforms = stream(config.seed, TAG_BRIDGE, k).random(n)
            p_cross = bridge_absorption_prob(prev, ens.positions, threshold,
                                             model.sigma, dt)
            absorbed_now = alive & (uniforms < p_cross)
        else:
            absorbed_now = alive & (ens.positions <= threshold)
        if absorbed_now.any():
            ens.tau[absorbed_now] = t
            ens.positions[absorbed_now] = threshold
            ens.alive &= ~absorbed_now

        # Row-k traces use tau-consistent survival (tau > t_k), so players
        # absorbed during this step (tau = t_k) are already excluded; their
        # row-k positions are the last free values in `prev`.
        still = ens.alive
        loss_trace[k] = 1.0 - np.count_nonzero(still) / n
        mean_trace[k] = float(np.sum(weight(prev[still])) / n) if still.any() else 0.0
        np.maximum(sup_abs, np.abs(ens.positions), out=sup_abs)
        if paths is not None:
            paths[k + 1] = ens.positions

    still = ens.alive
    loss_trace[steps] = 1.0 - np.count_nonzero(still) / n
    mean_trace[steps] = float(np.sum(weight(ens.positions[still])) / n) if still.any() else 0.0

    return EmpiricalRecord(time_grid=time_grid, absorption_times=ens.tau,
                           final_positions=ens.positions.copy(),
                           loss_trace=loss_trace, mean_trace=mean_trace,
                           seed=config.seed, positions=paths, sup_abs=sup_abs)


def simulate_nplayer(model: "ModelSpec", policies, config: SimConfig) -> EmpiricalRecord:
    """Simulate the N-player system with self-consistent empirical coupling.

    ``policies`` is a single shared feedback policy or a length-N sequence
    (repeat an object to share it); index 0 is the deviation slot used by
    the Nash-gap study.  (L, m) are recomputed from the ensemble before
    each step.
    """
    def coupling(k: int, ens: ParticleEnsemble) -> tuple[float, float]:
        n = ens.num_players
        alive = ens.alive
        l_k = 1.0 - np.count_nonzero(alive) / n
        m_k = float(np.sum(model.weight_w(ens.positions[alive])) / n) if alive.any() else 0.0
        return l_k, m_k

    return _simulate(model, policies, config, coupling)


def simulate_frozen(model: "ModelSpec", policy, frozen_flow: SubProbFlow,
                    config: SimConfig) -> EmpiricalRecord:
    """Simulate independent players against a frozen flow's (L, m) traces.

    Paths interact only through the flow, never with each other, which is
    the single-representative dynamics used for consistency audits and
    i.i.d. baselines.  The flow must share the simulation time grid.
    """
    steps = config.num_steps(model.horizon_T)
    fg = frozen_flow.grid
    if fg.num_steps != steps or abs(fg.dt - config.dt) > 1e-12:
        raise ConfigError("frozen flow time grid does not match the simulation grid")

    def coupling(k: int, ens: ParticleEnsemble) -> tuple[float, float]:
        return float(frozen_flow.loss_trace[k]), float(frozen_flow.mean_trace[k])

    return _simulate(model, policy, config, coupling)


def path_cost(record: EmpiricalRecord, model: "ModelSpec", policy,
              player_index: int) -> float:
    """Realized cost of one player's path.

    Trapezoidal quadrature of f(t, X_t, L_t, m_t, u(t, X_t)) over
    [0, tau ^ T] plus the exit cost F evaluated at the threshold for
    absorbed players and at (T, X_T) for survivors.
    """
    n = record.num_players
    if not 0 <= player_index < n:
        raise DomainError(f"player_index {player_index} out of range")
    return float(path_costs(record, model, policy,
                            players=np.array([player_index]))[0])


def path_costs(record: EmpiricalRecord, model: "ModelSpec", policy,
               players: np.ndarray | None = None) -> np.ndarray:
    """Vectorised realized costs for many players sharing one policy."""
    if record.positions is None:
        raise DomainError("path_costs needs a record with stored paths")
    n = record.num_players
    players = np.arange(n) if players is None else np.asarray(players)
    t_grid = record.time_grid
    dt = t_grid[1] - t_grid[0]
    steps = t_grid.size - 1
    taus = record.absorption_times[players]
    stops = np.minimum(taus, t_grid[-1])
    k_stop = np.rint(stops / dt).astype(np.int64)

    pos = record.positions[:, players]
    f = np.empty_like(pos)
    for k, t in enumerate(t_grid):
        u = policy.evaluate(t, pos[k])
        f[k] = (np.asarray(model.running_cost_f0(t, pos[k], u), float)
                + np.asarray(model.running_cost_fbar(t, pos[k],
                                                     record.loss_trace[k],
                                                     record.mean_trace[k]), float))
    # trapezoid up to each player's own k_stop
    w = np.ones((steps + 1, players.size))
    w[0] = 0.5
    rows = np.arange(steps + 1)[:, None]
    w[rows > k_stop[None, :]] = 0.0
    at_stop = rows == k_stop[None, :]
    w = np.where(at_stop & (k_stop[None, :] > 0), 0.5, w)
    running = (f * w).sum(axis=0) * dt
    running[k_stop == 0] = 0.0

    absorbed = taus <= t_grid[-1]
    terminal = np.where(
        absorbed,
        np.asarray(model.terminal_cost_F(stops, np.full(players.size, model.threshold)), float),
        np.asarray(model.terminal_cost_F(t_grid[-1], pos[-1]), float))
    return running + terminal


# ---------------------------------------------------------------------------
# Blocked replications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockResult:
    """Compact output of many independent N-player systems run in one pass.

    Block b occupies noise slots [b*N, (b+1)*N); blocks share nothing, so
    they are genuine independent replications.  Slot 0 of every block is
    the measured (possibly deviating) player, whose realized cost follows
    the same quadrature and exit-cost conventions as path_cost.
    """

    time_grid: np.ndarray
    n_per_block: int
    blocks: int
    player0_costs: np.ndarray
    player0_taus: np.ndarray
    pooled_loss: np.ndarray
    pooled_mean: np.ndarray
    pooled_density: np.ndarray | None = None


def simulate_blocks(model: "ModelSpec", crowd_policy, n_per_block: int,
                    blocks: int, dt: float, seed: int, *,
                    deviant_policy=None, bridge_correction: bool = True,
                    histogram_grid: GridSpec | None = None) -> BlockResult:
    """Run `blocks` independent copies of the N-player system vectorised.

    Every player follows ``crowd_policy`` except slot 0 of each block,
    which follows ``deviant_policy`` when given.  The per-block coupling
    (L, m) is computed block-wise at step start, exactly as in
    simulate_nplayer.  Optionally pools a per-time survivor histogram
    over all blocks (the Monte Carlo estimate of the mean empirical flow
    at this population size).
    """
    steps = SimConfig(num_players=n_per_block, dt=dt, seed=seed).num_steps(model.horizon_T)
    time_grid = np.linspace(0.0, model.horizon_T, steps + 1)
    b, n = blocks, n_per_block
    sqdt = np.sqrt(dt)
    threshold = model.threshold
    weight = model.weight_w

    x = model.initial_law.ppf(stream(seed, TAG_INIT).random(b * n)).reshape(b, n)
    alive = np.ones((b, n), dtype=bool)
    tau = np.full((b, n), NEVER)

    pos0 = np.empty((steps + 1, b))
    loss0 = np.empty((steps + 1, b))
    mean0 = np.empty((steps + 1, b))
    pooled_loss = np.empty(steps + 1)
    pooled_mean = np.empty(steps + 1)
    hist = None
    if histogram_grid is not None:
        hist = np.zeros((steps + 1, histogram_grid.state_grid.size))

    def bin_rows(k: int, positions: np.ndarray, alive_mask: np.ndarray) -> None:
        g = histogram_grid
        j_max = g.state_grid.size - 1
        vals = positions[alive_mask]
        if vals.size == 0:
            return
        bins = np.clip(np.rint((vals - g.threshold) / g.dx).astype(np.int64), 1, j_max)
        hist[k] += np.bincount(bins, minlength=j_max + 1)

    for k in range(steps):
        t = float(time_grid[k])
        # block-wise lagged coupling at step start
        l_blk = 1.0 - alive.mean(axis=1)
        m_blk = np.where(alive, weight(x), 0.0).sum(axis=1) / n
        u = crowd_policy.evaluate(t, x.ravel()).reshape(b, n)
        if deviant_policy is not None:
            u[:, 0] = deviant_policy.evaluate(t, x[:, 0])
        drift = u + model.drift_bbar(t, x, l_blk[:, None], m_blk[:, None])
        noise = stream(seed, TAG_NOISE, k).standard_normal(b * n).reshape(b, n)
        prev = x.copy()
        moved = x + drift * dt + model.sigma * sqdt * noise
        x = np.where(alive, moved, x)
        bad = alive & (~np.isfinite(x) | (np.abs(x) > BLOWUP_GUARD))
        if bad.any():
            bb, ii = np.argwhere(bad)[0]
            raise BlowupError(f"block {bb} player {ii} reached {x[bb, ii]!r} "
                              f"at step {k + 1}", particle=int(ii), step=k + 1)

        if bridge_correction:
            uniforms = stream(seed, TAG_BRIDGE, k).random(b * n).reshape(b, n)
            p_cross = bridge_absorption_prob(prev, x, threshold, model.sigma, dt)
            absorbed_now = alive & (uniforms < p_cross)
        else:
            absorbed_now = alive & (x <= threshold)
        if absorbed_now.any():
            tau[absorbed_now] = t
            x[absorbed_now] = threshold
            alive &= ~absorbed_now

        # tau-consistent row-k data (players dying this step excluded)
        pos0[k] = prev[:, 0]
        loss0[k] = 1.0 - alive.mean(axis=1)
        mean0[k] = np.where(alive, weight(prev), 0.0).sum(axis=1) / n
        pooled_loss[k] = loss0[k].mean()
        pooled_mean[k] = mean0[k].mean()
        if hist is not None:
            bin_rows(k, prev, alive)

    pos0[steps] = x[:, 0]
    loss0[steps] = 1.0 - alive.mean(axis=1)
    mean0[steps] = np.where(alive, weight(x), 0.0).sum(axis=1) / n
    pooled_loss[steps] = loss0[steps].mean()
    pooled_mean[steps] = mean0[steps].mean()
    if hist is not None:
        bin_rows(steps, x, alive)
        hist /= b * n * histogram_grid.dx

    costs = _block_player0_costs(model, crowd_policy if deviant_policy is None
                                 else deviant_policy, time_grid, pos0, loss0,
                                 mean0, tau[:, 0])
    return BlockResult(time_grid=time_grid, n_per_block=n, blocks=b,
                       player0_costs=costs, player0_taus=tau[:, 0].copy(),
                       pooled_loss=pooled_loss, pooled_mean=pooled_mean,
                       pooled_density=hist)


def _block_player0_costs(model: "ModelSpec", policy, time_grid: np.ndarray,
                         pos0: np.ndarray, loss0: np.ndarray,
                         mean0: np.ndarray, tau0: np.ndarray) -> np.ndarray:
    """Realized costs of the slot-0 players, mirroring path_costs exactly."""
    steps = time_grid.size - 1
    dt = time_grid[1] - time_grid[0]
    horizon = time_grid[-1]
    stops = np.minimum(tau0, horizon)
    k_stop = np.rint(stops / dt).astype(np.int64)

    f = np.empty_like(pos0)
    for k, t in enumerate(time_grid):
        u = policy.evaluate(t, pos0[k])
        f[k] = (np.asarray(model.running_cost_f0(t, pos0[k], u), float)
                + np.asarray(model.running_cost_fbar(t, pos0[k], loss0[k],
                                                     mean0[k]), float))
    w = np.ones_like(pos0)
    w[0] = 0.5
    rows = np.arange(steps + 1)[:, None]
    w[rows > k_stop[None, :]] = 0.0
    w = np.where((rows == k_stop[None, :]) & (k_stop[None, :] > 0), 0.5, w)
    running = (f * w).sum(axis=0) * dt
    running[k_stop == 0] = 0.0

    absorbed = tau0 <= horizon
    terminal = np.where(
        absorbed,
        np.asarray(model.terminal_cost_F(stops, np.full(tau0.size, model.threshold)), float),
        np.asarray(model.terminal_cost_F(horizon, pos0[-1]), float))
    return running + terminal


# ---------------------------------------------------------------------------
# Path dump
# ---------------------------------------------------------------------------

_PATH_MAGIC = b"MFGPATHS"


def write_paths(record: EmpiricalRecord, path: str | Path) -> None:
    """Binary dump: header (N, K, dt, seed) then row-major positions."""
    if record.positions is None:
        raise DomainError("record does not store full paths")
    n = record.num_players
    steps = record.time_grid.size - 1
    dt = float(record.time_grid[1] - record.time_grid[0])
    with open(path, "wb") as fh:
        fh.write(_PATH_MAGIC)
        fh.write(struct.pack("<qqdQ", n, steps, dt, record.seed))
        fh.write(np.ascontiguousarray(record.positions, dtype="<f8").tobytes())


def read_paths(path: str | Path) -> tuple[np.ndarray, float, int]:
    """Returns (positions matrix, dt, seed) from a binary path dump."""
    raw = Path(path).read_bytes()
    if raw[:8] != _PATH_MAGIC:
        raise ConfigError(f"{path}: not a path dump")
    n, steps, dt, seed = struct.unpack("<qqdQ", raw[8:40])
    positions = np.frombuffer(raw[40:], dtype="<f8").reshape(steps + 1, n).copy()
    return positions, dt, int(seed)


def write_absorption_csv(record: EmpiricalRecord, path: str | Path) -> None:
    """CSV with one row per player: player,tau (inf for survivors)."""
    lines = ["player,tau"]
    for i, tau in enumerate(record.absorption_times):
        lines.append(f"{i},{repr(float(tau))}")
    Path(path).write_text("\n".join(lines) + "\n")
