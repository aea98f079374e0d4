"""Experiment orchestration: config loading, subcommands, manifests.

One YAML file describes an experiment; every subcommand reads the same
tree, fills documented defaults, echoes the resolved config next to its
outputs, and writes a manifest with a content hash per artifact so a
rerun can be compared byte for byte.

Subcommands
    solve-mfg          fixed-point solve; policy/flow matrices + iteration log
    simulate-nplayer   one N-player run; absorption times and traces
    chaos-study        empirical-measure convergence table and rate fit
    nash-gap           unilateral-deviation gap curve over study.n_list
    validate           built-in diagnostic suite (assumption probes, mass
                       balance, solver-vs-simulation absorption agreement,
                       exponential-martingale mean, exit positivity)

Exit status: 0 success (all checks pass for validate), 2 validate ran but
some check failed, 1 error.  The environment variable MFGLAB_OUTPUT
overrides the output root.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import analysis, mfg, model as model_mod, particle, pde
from .errors import ConfigError, DomainError, SolverError
from .measures import GridSpec, write_flow_csv, write_matrix
from .model import FamilySpec, InitialLaw, ModelSpec, TruncationSchedule
from .streams import derive_seed

_ENV_OUTPUT = "MFGLAB_OUTPUT"

SUBCOMMANDS = ("solve-mfg", "simulate-nplayer", "chaos-study", "nash-gap", "validate")


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"drift", "control_cost", "state_cost", "terminal_cost", "weight",
               "sigma", "actions", "horizon", "threshold", "initial",
               "growth_c", "lipschitz_l"}
_GRIDS_KEYS = {"time_steps", "space_cells", "x_max"}
_MFG_KEYS = {"levels", "damping", "tol", "max_iter", "alpha"}
_SIM_KEYS = {"n_particles", "replications", "seed", "bridge", "dt", "store_paths"}
_STUDY_KEYS = {"n_list", "alpha_list", "chaos_replications", "nash_replications"}
_OUTPUT_KEYS = {"directory", "formats"}
_TOP_KEYS = {"model", "grids", "mfg", "simulate", "study", "output", "seed"}


def _require_mapping(value: Any, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"section {where!r} must be a mapping")
    return dict(value)


def _reject_unknown(section: Mapping, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key: {where}{key}")


def _positive(value: float, name: str) -> float:
    value = float(value)
    if value <= 0:
        raise ConfigError(f"{name} must be > 0, got {value}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description."""

    model: ModelSpec
    grid: GridSpec
    schedule: TruncationSchedule
    damping: float
    tol: float
    max_iter: int
    alpha: float | None
    n_particles: int
    replications: int
    seed: int
    bridge: bool
    sim_dt: float
    store_paths: bool
    n_list: tuple[int, ...]
    alpha_list: tuple[int, ...]
    chaos_replications: int
    nash_replications: int
    output_dir: Path
    formats: tuple[str, ...]
    resolved: dict = field(repr=False, default_factory=dict)


def _family(section: Mapping, key: str, default_family: str) -> FamilySpec:
    raw = _require_mapping(section.get(key), f"model.{key}")
    fam = raw.pop("family", default_family)
    return FamilySpec(str(fam), raw)


def build_model(section: Mapping) -> ModelSpec:
    section = _require_mapping(section, "model")
    _reject_unknown(section, _MODEL_KEYS, "model.")
    actions = section.get("actions", [-1.0, 1.0])
    if not isinstance(actions, (list, tuple)) or len(actions) != 2:
        raise ConfigError("model.actions must be a [u_min, u_max] pair")
    initial = _family(section, "initial", "point")
    if initial.family == "point" and "value" not in initial.params:
        initial = FamilySpec("point", {"value": 1.0})
    return ModelSpec(
        drift_spec=_family(section, "drift", "zero"),
        control_cost_spec=_family(section, "control_cost", "zero"),
        state_cost_spec=_family(section, "state_cost", "zero"),
        terminal_spec=_family(section, "terminal_cost", "zero"),
        weight_spec=_family(section, "weight", "one"),
        sigma=_positive(section.get("sigma", 1.0), "model.sigma"),
        action_set=(float(actions[0]), float(actions[1])),
        horizon_T=_positive(section.get("horizon", 1.0), "model.horizon"),
        initial_law=InitialLaw(initial),
        threshold=float(section.get("threshold", 0.0)),
        growth_C=_positive(section.get("growth_c", 2.0), "model.growth_c"),
        lipschitz_L=_positive(section.get("lipschitz_l", 1.0), "model.lipschitz_l"),
    )


def default_x_max(model: ModelSpec) -> float:
    """Far wall rule: essential sup of the initial law + 6 sigma sqrt(T)."""
    return (model.initial_law.support_max
            + 6.0 * model.sigma * float(np.sqrt(model.horizon_T)))


def default_schedule(model: ModelSpec, x_max: float) -> TruncationSchedule:
    """Doubling levels from the coefficient scale on the grid box."""
    span = max(abs(model.threshold), abs(x_max), 1.0)
    base = model.growth_C * (1.0 + span)
    return TruncationSchedule.doubling(base, 3)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a config file, filling documented defaults.

    Unknown keys are rejected by name; numeric ranges are validated on
    load.  The resolved tree (all defaults filled) is stored on the
    returned object and echoed next to the outputs for provenance.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    raw = _require_mapping(raw, "top level")
    _reject_unknown(raw, _TOP_KEYS, "")
    if "model" not in raw:
        raise ConfigError("config needs a model section")

    spec_model = build_model(raw["model"])

    grids = _require_mapping(raw.get("grids"), "grids")
    _reject_unknown(grids, _GRIDS_KEYS, "grids.")
    time_steps = int(grids.get("time_steps", 200))
    space_cells = int(grids.get("space_cells", 200))
    if time_steps < 1:
        raise ConfigError("grids.time_steps must be >= 1")
    if space_cells < 2:
        raise ConfigError("grids.space_cells must be >= 2")
    x_max = grids.get("x_max")
    x_max = default_x_max(spec_model) if x_max is None else float(x_max)
    if x_max <= spec_model.threshold:
        raise ConfigError("grids.x_max must exceed model.threshold")
    grid = GridSpec.regular(spec_model.horizon_T, time_steps,
                            spec_model.threshold, x_max, space_cells)

    mfg_sec = _require_mapping(raw.get("mfg"), "mfg")
    _reject_unknown(mfg_sec, _MFG_KEYS, "mfg.")
    levels = mfg_sec.get("levels")
    schedule = (default_schedule(spec_model, x_max) if levels is None
                else TruncationSchedule(tuple(float(v) for v in levels)))
    damping = float(mfg_sec.get("damping", 0.5))
    if not 0.0 < damping <= 1.0:
        raise ConfigError("mfg.damping must lie in (0, 1]")
    tol = _positive(mfg_sec.get("tol", 1e-3), "mfg.tol")
    max_iter = int(mfg_sec.get("max_iter", 50))
    if max_iter < 1:
        raise ConfigError("mfg.max_iter must be >= 1")
    alpha = mfg_sec.get("alpha")
    alpha = None if alpha is None else _positive(alpha, "mfg.alpha")

    sim = _require_mapping(raw.get("simulate"), "simulate")
    _reject_unknown(sim, _SIM_KEYS, "simulate.")
    n_particles = int(sim.get("n_particles", 10_000))
    if n_particles < 1:
        raise ConfigError("simulate.n_particles must be >= 1")
    replications = int(sim.get("replications", 8))
    if replications < 1:
        raise ConfigError("simulate.replications must be >= 1")
    seed = int(sim.get("seed", raw.get("seed", 0)))
    if seed < 0:
        raise ConfigError("simulate.seed must be >= 0")
    bridge = bool(sim.get("bridge", True))
    sim_dt = sim.get("dt")
    sim_dt = grid.dt if sim_dt is None else _positive(sim_dt, "simulate.dt")
    store_paths = bool(sim.get("store_paths", False))

    study = _require_mapping(raw.get("study"), "study")
    _reject_unknown(study, _STUDY_KEYS, "study.")
    n_list = tuple(int(n) for n in study.get(
        "n_list", (50, 100, 200, 400, 800, 1600, 3200)))
    if any(b <= a for a, b in zip(n_list, n_list[1:])) or any(n < 1 for n in n_list):
        raise ConfigError("study.n_list must be strictly increasing and positive")
    alpha_list = tuple(int(a) for a in study.get("alpha_list", (1, 2, 4)))
    chaos_replications = int(study.get("chaos_replications", 20))
    nash_replications = int(study.get("nash_replications", 64))

    output = _require_mapping(raw.get("output"), "output")
    _reject_unknown(output, _OUTPUT_KEYS, "output.")
    directory = Path(os.environ.get(_ENV_OUTPUT, output.get("directory", "out")))
    formats = tuple(output.get("formats", ("csv",)))

    resolved = {
        "model": _resolved_model(spec_model),
        "grids": {"time_steps": time_steps, "space_cells": space_cells,
                  "x_max": x_max},
        "mfg": {"levels": list(schedule.levels), "damping": damping, "tol": tol,
                "max_iter": max_iter, "alpha": alpha},
        "simulate": {"n_particles": n_particles, "replications": replications,
                     "seed": seed, "bridge": bridge, "dt": sim_dt,
                     "store_paths": store_paths},
        "study": {"n_list": list(n_list), "alpha_list": list(alpha_list),
                  "chaos_replications": chaos_replications,
                  "nash_replications": nash_replications},
        "output": {"directory": str(directory), "formats": list(formats)},
    }
    return ExperimentConfig(
        model=spec_model, grid=grid, schedule=schedule, damping=damping,
        tol=tol, max_iter=max_iter, alpha=alpha, n_particles=n_particles,
        replications=replications, seed=seed, bridge=bridge, sim_dt=sim_dt,
        store_paths=store_paths, n_list=n_list, alpha_list=alpha_list,
        chaos_replications=chaos_replications,
        nash_replications=nash_replications, output_dir=directory,
        formats=formats, resolved=resolved)


def _resolved_model(m: ModelSpec) -> dict:
    def fam(spec: FamilySpec) -> dict:
        return {"family": spec.family, **spec.params}

    return {
        "drift": fam(m.drift_spec),
        "control_cost": fam(m.control_cost_spec),
        "state_cost": fam(m.state_cost_spec),
        "terminal_cost": fam(m.terminal_spec),
        "weight": fam(m.weight_spec),
        "sigma": m.sigma,
        "actions": list(m.action_set),
        "horizon": m.horizon_T,
        "threshold": m.threshold,
        "initial": fam(m.initial_law.spec),
        "growth_c": m.growth_C,
        "lipschitz_l": m.lipschitz_L,
    }


# ---------------------------------------------------------------------------
# Output writing
# ---------------------------------------------------------------------------

def write_outputs(objects: Mapping[str, Any], out_dir: Path) -> list[Path]:
    """Write named result objects with bit-stable formats; returns paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out_dir}: {err}") from err
    written: list[Path] = []
    for name, obj in objects.items():
        target = out_dir / name
        try:
            _write_one(obj, target)
        except OSError as err:
            raise OSError(f"cannot write {target}: {err}") from err
        written.append(target)
    return written


def _write_one(obj: Any, target: Path) -> None:
    from .measures import SubProbFlow

    if isinstance(obj, (analysis.ChaosTable, analysis.NashGapCurve)):
        obj.write_csv(target)
    elif isinstance(obj, SubProbFlow):
        if target.suffix == ".csv":
            write_flow_csv(obj, target)
        else:
            write_matrix(target, "density", obj.grid, obj.density)
    elif isinstance(obj, pde.FeedbackPolicy):
        write_matrix(target, "policy", obj.grid, obj.actions)
    elif isinstance(obj, pde.ValueField):
        write_matrix(target, "value", obj.grid, obj.values)
    elif isinstance(obj, str):
        target.write_text(obj)
    elif isinstance(obj, (dict, list)):
        target.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    else:
        raise TypeError(f"no writer for {type(obj)!r}")


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finish(out_dir: Path, subcommand: str, written: list[Path]) -> Path:
    manifest = {
        "subcommand": subcommand,
        "files": {p.name: _hash_file(p) for p in sorted(written)},
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _resolved_yaml(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.resolved, sort_keys=True)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _run_solve_mfg(config: ExperimentConfig, out_dir: Path) -> tuple[int, list[Path]]:
    report = mfg.picard_solve(config.model, config.schedule, grid=config.grid,
                              damping=config.damping, tol=config.tol,
                              max_iter=config.max_iter, alpha=config.alpha)
    lines = []
    for i, (entry, level) in enumerate(zip(report.residual_history,
                                           report.truncation_level_history)):
        lines.append(json.dumps({
            "iteration": i + 1, "level": level,
            "sup_conditional_w1": entry.sup_conditional_w1,
            "sup_mass_gap": entry.sup_mass_gap,
            "alpha_distance": entry.alpha_distance,
        }, sort_keys=True))
    summary = {
        "converged": report.converged,
        "iterations": report.iterations,
        "effective_iterations": report.effective_iterations,
        "tolerance": report.tolerance,
        "alpha": report.alpha,
    }
    written = write_outputs({
        "iterations.jsonl": "\n".join(lines) + "\n",
        "summary.json": summary,
        "final_policy.mat": report.final_policy,
        "final_flow.mat": report.final_flow,
        "final_flow.csv": report.final_flow,
        "resolved_config.yaml": _resolved_yaml(config),
    }, out_dir)
    return 0, written


def _run_simulate(config: ExperimentConfig, out_dir: Path) -> tuple[int, list[Path]]:
    policy = pde.FeedbackPolicy.constant(config.grid, 0.0, config.model.action_set)
    sim = particle.SimConfig(num_players=config.n_particles, dt=config.sim_dt,
                             seed=config.seed, bridge_correction=config.bridge,
                             store_full_paths=config.store_paths)
    record = particle.simulate_nplayer(config.model, policy, sim)
    trace_lines = ["t,survivor_mass,loss,mean"]
    for k, t in enumerate(record.time_grid):
        trace_lines.append(",".join(repr(float(v)) for v in (
            t, 1.0 - record.loss_trace[k], record.loss_trace[k],
            record.mean_trace[k])))
    objects: dict[str, Any] = {
        "trace.csv": "\n".join(trace_lines) + "\n",
        "resolved_config.yaml": _resolved_yaml(config),
    }
    written = write_outputs(objects, out_dir)
    absorption = out_dir / "absorption.csv"
    particle.write_absorption_csv(record, absorption)
    written.append(absorption)
    if config.store_paths:
        paths_file = out_dir / "paths.bin"
        particle.write_paths(record, paths_file)
        written.append(paths_file)
    return 0, written


def _solve_for_study(config: ExperimentConfig) -> mfg.FixedPointReport:
    report = mfg.picard_solve(config.model, config.schedule, grid=config.grid,
                              damping=config.damping, tol=config.tol,
                              max_iter=config.max_iter, alpha=config.alpha)
    if not report.converged:
        raise SolverError("fixed-point solve did not converge; study needs a "
                          "converged policy (raise mfg.max_iter or tol)")
    return report


def _run_chaos(config: ExperimentConfig, out_dir: Path) -> tuple[int, list[Path]]:
    report = _solve_for_study(config)
    table = analysis.chaos_study(config.model, report.final_policy,
                                 report.final_flow, config.n_list,
                                 config.chaos_replications,
                                 derive_seed(config.seed, 1))
    objects: dict[str, Any] = {"chaos.csv": table,
                               "resolved_config.yaml": _resolved_yaml(config)}
    if len(table.rows) >= 3:
        fit = analysis.fit_rate(table)
        objects["rate.json"] = {"slope": fit.slope, "intercept": fit.intercept,
                                "r_squared": fit.r_squared}
    written = write_outputs(objects, out_dir)
    return 0, written


def _run_nash_gap(config: ExperimentConfig, out_dir: Path) -> tuple[int, list[Path]]:
    report = _solve_for_study(config)
    rows = []
    for n in config.n_list:
        rows.append(analysis.nash_gap(config.model, report, n,
                                      config.nash_replications, config.grid,
                                      derive_seed(config.seed, 2, n)))
    curve = analysis.NashGapCurve(tuple(rows))
    written = write_outputs({"nash_gap.csv": curve,
                             "resolved_config.yaml": _resolved_yaml(config)},
                            out_dir)
    return 0, written


def _run_validate(config: ExperimentConfig, out_dir: Path) -> tuple[int, list[Path]]:
    checks = validation_suite(config)
    all_pass = all(c["passed"] for c in checks)
    written = write_outputs({
        "validation_report.json": {"checks": checks, "all_passed": all_pass},
        "resolved_config.yaml": _resolved_yaml(config),
    }, out_dir)
    return (0 if all_pass else 2), written


def validation_suite(config: ExperimentConfig) -> list[dict]:
    """Model-generic diagnostic checks, each with a named mathematical claim."""
    m = config.model
    grid = config.grid
    checks: list[dict] = []

    def add(name: str, claim: str, passed: bool, **detail):
        checks.append({"name": name, "claim": claim, "passed": bool(passed),
                       **{k: (float(v) if isinstance(v, (int, float, np.floating)) else v)
                          for k, v in detail.items()}})

    probe = model_mod.check_assumptions(m, 512, derive_seed(config.seed, 3))
    for c in probe.checks:
        add(f"assumption:{c.name}",
            "declared growth/Lipschitz constants hold on the probe box",
            c.passed, max_ratio=c.max_ratio)

    neutral = pde.FeedbackPolicy.constant(grid, 0.0, m.action_set)
    flow = pde.solve_killed_fp(m, neutral, grid)
    balance = float(np.max(np.abs(flow.survivor_mass + flow.loss_trace - 1.0)))
    add("mass_balance", "survivor mass plus accumulated absorption flux is 1",
        balance <= 1e-10 * grid.num_steps, max_imbalance=balance)

    add("exit_positivity", "some mass survives at every grid time",
        mfg.exit_positivity_check(flow),
        final_mass=float(flow.survivor_mass[-1]))

    sim = particle.SimConfig(num_players=config.n_particles, dt=config.sim_dt,
                             seed=derive_seed(config.seed, 4),
                             bridge_correction=config.bridge)
    record = particle.simulate_frozen(m, neutral, flow, sim)
    alive_frac = float(np.mean(record.absorption_times > m.horizon_T))
    se = max(float(np.sqrt(alive_frac * (1 - alive_frac) / config.n_particles)), 1e-12)
    gap = abs(alive_frac - float(flow.survivor_mass[-1]))
    add("absorption_probability",
        "density-solver survivor mass matches simulated survivor fraction",
        gap <= max(0.01, 3 * se), gap=gap, simulated=alive_frac,
        solver=float(flow.survivor_mass[-1]), mc_se=se)

    mart = analysis.martingale_check(m, neutral, flow,
                                     max(1000, config.n_particles),
                                     derive_seed(config.seed, 5))
    add("martingale_mean_one",
        "stochastic exponential of the drift integral has unit mean",
        abs(mart.mean - 1.0) <= 3 * mart.se + 1e-12,
        mean=mart.mean, se=mart.se, overflow=mart.overflow_count)

    return checks


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_RUNNERS = {
    "solve-mfg": _run_solve_mfg,
    "simulate-nplayer": _run_simulate,
    "chaos-study": _run_chaos,
    "nash-gap": _run_nash_gap,
    "validate": _run_validate,
}


def run(subcommand: str, config: ExperimentConfig,
        output_override: str | None = None) -> int:
    """Execute a subcommand; artifacts land under the output directory.

    Results are staged in a temporary subdirectory and moved into place
    only after the whole step succeeded, so a failing run never leaves a
    half-written artifact set behind.
    """
    if subcommand not in _RUNNERS:
        raise ConfigError(f"unknown subcommand {subcommand!r}; "
                          f"choose one of {SUBCOMMANDS}")
    out_dir = Path(output_override) if output_override else config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp_dir = out_dir / f".tmp-{subcommand}"
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    tmp_dir.mkdir()
    try:
        status, written = _RUNNERS[subcommand](config, tmp_dir)
    except Exception:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    final: list[Path] = []
    for p in written:
        target = out_dir / p.name
        os.replace(p, target)
        final.append(target)
    shutil.rmtree(tmp_dir, ignore_errors=True)
    _finish(out_dir, subcommand, final)
    return status


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfglab",
        description="Numerical laboratory for absorbed mean-field games")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="experiment config file (YAML)")
    parser.add_argument("--output", help="output directory override")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        return run(args.subcommand, config, args.output)
    except (ConfigError, DomainError) as err:
        print(json.dumps({"error": str(err), "kind": "config"}), file=sys.stderr)
        return 1
    except SolverError as err:
        print(json.dumps({"error": str(err), "kind": "solver"}), file=sys.stderr)
        return 1
    except OSError as err:
        print(json.dumps({"error": str(err), "kind": "io"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
