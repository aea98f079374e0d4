"""Game coefficients: a closed catalog of parametric families.

A model bundles the drift, costs, interaction weight, diffusion, action
interval, horizon, absorbing threshold and initial law, together with
user-declared growth and Lipschitz constants.  Coefficients are chosen
from named families rather than supplied as arbitrary callables so that
experiments are reproducible from a config file and the declared
constants can actually be probed.

Catalog (all vectorised over x; l is the lost fraction in [0, 1], m the
current population average of the weight):

drift families
    zero        0
    linear      c0 + cx*x + cl*l + cm*m
    ou          -rate*(x - level) + cl*l + cm*m
    tanh        amp*tanh((level - x)/width) + cl*l + cm*tanh(m)
    quadratic   c2*x^2 + c1*x + c0        (super-linear; exists to exercise
                                           the assumption checker)
control cost f0(t, x, u) families (bounded on the action interval, convex)
    zero        0
    quadratic   coef*(u - target)^2
state cost fbar(t, x, l, m) families (nonnegative)
    zero        0
    constant    c
    abs_linear  c0 + cx*|x| + cl*l + cm*|m|
    quadratic_state  q*(x - target)^2      (super-linear, for LQ benchmarks)
terminal cost F(t, x) families
    zero / constant c / linear c0 + c1*x / quadratic g*(x - target)^2
weight families w(x)
    one / identity / tanh  scale*tanh(x/scale) / zero
initial law families (all sub-Gaussian, support strictly above threshold)
    point value / uniform lo..hi / trunc_gauss mean,std,lo,hi
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError
from .streams import TAG_INIT, TAG_PROBE, stream

ArrayLike = "np.ndarray | float"


# ---------------------------------------------------------------------------
# Coefficient families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FamilySpec:
    """A named member of the coefficient catalog with its parameters."""

    family: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params",
                           {k: float(v) for k, v in dict(self.params).items()})

    def get(self, key: str, default: float = 0.0) -> float:
        return self.params.get(key, default)


def _check_family(spec: FamilySpec, catalog: Mapping[str, tuple[str, ...]],
                  role: str) -> None:
    if spec.family not in catalog:
        raise ConfigError(f"unknown {role} family {spec.family!r}; "
                          f"choose one of {sorted(catalog)}")
    allowed = set(catalog[spec.family])
    unknown = set(spec.params) - allowed
    if unknown:
        raise ConfigError(f"{role} family {spec.family!r} got unknown "
                          f"parameter(s) {sorted(unknown)}")


_DRIFT_FAMILIES = {
    "zero": (),
    "linear": ("c0", "cx", "cl", "cm"),
    "ou": ("rate", "level", "cl", "cm"),
    "tanh": ("amp", "level", "width", "cl", "cm", "l_width"),
    "quadratic": ("c0", "c1", "c2"),
}

_CONTROL_COST_FAMILIES = {
    "zero": (),
    "quadratic": ("coef", "target"),
}

_STATE_COST_FAMILIES = {
    "zero": (),
    "constant": ("c",),
    "abs_linear": ("c0", "cx", "cl", "cm"),
    "quadratic_state": ("q", "target"),
}

_TERMINAL_FAMILIES = {
    "zero": (),
    "constant": ("c",),
    "linear": ("c0", "c1"),
    "quadratic": ("g", "target"),
    "runoff": ("base", "rate", "horizon"),
}

_WEIGHT_FAMILIES = {
    "zero": (),
    "one": (),
    "identity": (),
    "tanh": ("scale",),
}

_INITIAL_FAMILIES = {
    "point": ("value",),
    "uniform": ("lo", "hi"),
    "trunc_gauss": ("mean", "std", "lo", "hi"),
}


def _drift_fn(spec: FamilySpec) -> Callable:
    f = spec.family
    if f == "zero":
        return lambda t, x, l, m: np.zeros_like(np.asarray(x, float))
    if f == "linear":
        c0, cx, cl, cm = (spec.get(k) for k in ("c0", "cx", "cl", "cm"))
        return lambda t, x, l, m: c0 + cx * np.asarray(x, float) + cl * l + cm * m
    if f == "ou":
        rate, level = spec.get("rate", 1.0), spec.get("level")
        cl, cm = spec.get("cl"), spec.get("cm")
        return lambda t, x, l, m: -rate * (np.asarray(x, float) - level) + cl * l + cm * m
    if f == "tanh":
        amp, level = spec.get("amp", 1.0), spec.get("level")
        width = spec.get("width", 1.0)
        cl, cm = spec.get("cl"), spec.get("cm")
        l_width = spec.get("l_width", 0.0)
        if width <= 0:
            raise ConfigError("tanh drift needs width > 0")
        if l_width < 0:
            raise ConfigError("tanh drift needs l_width >= 0")
        if l_width > 0:
            # saturating response to crowd losses: steep for l beyond
            # l_width, Lipschitz constant cl / l_width at l = 0
            return lambda t, x, l, m: (
                amp * np.tanh((level - np.asarray(x, float)) / width)
                + cl * np.tanh(l / l_width) + cm * np.tanh(m))
        return lambda t, x, l, m: (amp * np.tanh((level - np.asarray(x, float)) / width)
                                   + cl * l + cm * np.tanh(m))
    if f == "quadratic":
        c0, c1, c2 = spec.get("c0"), spec.get("c1"), spec.get("c2")
        return lambda t, x, l, m: (c2 * np.asarray(x, float) ** 2
                                   + c1 * np.asarray(x, float) + c0)
    raise ConfigError(f"unknown drift family {f!r}")


def _control_cost_fn(spec: FamilySpec) -> Callable:
    if spec.family == "zero":
        return lambda t, x, u: np.zeros(np.broadcast(np.asarray(x), np.asarray(u)).shape)
    coef, target = spec.get("coef", 1.0), spec.get("target")
    if coef < 0:
        raise ConfigError("quadratic control cost needs coef >= 0")
    return lambda t, x, u: coef * (np.asarray(u, float) - target) ** 2 \
        + np.zeros_like(np.asarray(x, float))


def _state_cost_fn(spec: FamilySpec) -> Callable:
    f = spec.family
    if f == "zero":
        return lambda t, x, l, m: np.zeros_like(np.asarray(x, float))
    if f == "constant":
        c = spec.get("c")
        if c < 0:
            raise ConfigError("constant state cost must be nonnegative")
        return lambda t, x, l, m: np.full_like(np.asarray(x, float), c)
    if f == "abs_linear":
        c0, cx, cl, cm = (spec.get(k) for k in ("c0", "cx", "cl", "cm"))
        if min(c0, cx, cl, cm) < 0:
            raise ConfigError("abs_linear state cost needs nonnegative coefficients")
        return lambda t, x, l, m: (c0 + cx * np.abs(np.asarray(x, float))
                                   + cl * l + cm * abs(m))
    if f == "quadratic_state":
        q, target = spec.get("q", 1.0), spec.get("target")
        if q < 0:
            raise ConfigError("quadratic_state cost needs q >= 0")
        return lambda t, x, l, m: q * (np.asarray(x, float) - target) ** 2
    raise ConfigError(f"unknown state cost family {f!r}")


def _terminal_fn(spec: FamilySpec) -> Callable:
    f = spec.family
    if f == "zero":
        return lambda t, x: np.zeros_like(np.asarray(x, float))
    if f == "constant":
        c = spec.get("c")
        return lambda t, x: np.full_like(np.asarray(x, float), c)
    if f == "linear":
        c0, c1 = spec.get("c0"), spec.get("c1")
        return lambda t, x: c0 + c1 * np.asarray(x, float)
    if f == "quadratic":
        g, target = spec.get("g", 1.0), spec.get("target")
        return lambda t, x: g * (np.asarray(x, float) - target) ** 2
    if f == "runoff":
        # exit compensation pinned to the remaining horizon: early leavers
        # pay (or are charged) proportionally to the time left
        base, rate = spec.get("base"), spec.get("rate")
        horizon = spec.get("horizon", 1.0)
        return lambda t, x: (base + rate * np.maximum(horizon - np.asarray(t, float), 0.0)
                             + np.zeros_like(np.asarray(x, float)))
    raise ConfigError(f"unknown terminal family {f!r}")


def _weight_fn(spec: FamilySpec) -> Callable:
    f = spec.family
    if f == "zero":
        return lambda x: np.zeros_like(np.asarray(x, float))
    if f == "one":
        return lambda x: np.ones_like(np.asarray(x, float))
    if f == "identity":
        return lambda x: np.asarray(x, float)
    if f == "tanh":
        scale = spec.get("scale", 1.0)
        if scale <= 0:
            raise ConfigError("tanh weight needs scale > 0")
        return lambda x: scale * np.tanh(np.asarray(x, float) / scale)
    raise ConfigError(f"unknown weight family {f!r}")


# ---------------------------------------------------------------------------
# Initial laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitialLaw:
    """Named initial distribution with inverse-CDF sampling and a CDF."""

    spec: FamilySpec

    def __post_init__(self):
        _check_family(self.spec, _INITIAL_FAMILIES, "initial law")
        f, p = self.spec.family, self.spec
        if f == "uniform" and p.get("lo") >= p.get("hi"):
            raise ConfigError("uniform initial law needs lo < hi")
        if f == "trunc_gauss":
            if p.get("std") <= 0:
                raise ConfigError("trunc_gauss needs std > 0")
            if p.get("lo") >= p.get("hi"):
                raise ConfigError("trunc_gauss needs lo < hi")

    @property
    def support_min(self) -> float:
        f, p = self.spec.family, self.spec
        if f == "point":
            return p.get("value")
        return p.get("lo")

    @property
    def support_max(self) -> float:
        f, p = self.spec.family, self.spec
        if f == "point":
            return p.get("value")
        return p.get("hi")

    def ppf(self, q: np.ndarray) -> np.ndarray:
        f, p = self.spec.family, self.spec
        q = np.asarray(q, dtype=float)
        if f == "point":
            return np.full_like(q, p.get("value"))
        if f == "uniform":
            lo, hi = p.get("lo"), p.get("hi")
            return lo + (hi - lo) * q
        mean, std = p.get("mean"), p.get("std")
        a = (p.get("lo") - mean) / std
        b = (p.get("hi") - mean) / std
        ca, cb = special.ndtr(a), special.ndtr(b)
        return mean + std * special.ndtri(ca + q * (cb - ca))

    def cdf(self, x: np.ndarray) -> np.ndarray:
        f, p = self.spec.family, self.spec
        x = np.asarray(x, dtype=float)
        if f == "point":
            return (x >= p.get("value")).astype(float)
        if f == "uniform":
            lo, hi = p.get("lo"), p.get("hi")
            return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        mean, std = p.get("mean"), p.get("std")
        a = (p.get("lo") - mean) / std
        b = (p.get("hi") - mean) / std
        ca, cb = special.ndtr(a), special.ndtr(b)
        z = special.ndtr((x - mean) / std)
        return np.clip((z - ca) / (cb - ca), 0.0, 1.0)


# ---------------------------------------------------------------------------
# ModelSpec
# ---------------------------------------------------------------------------

def _clamp_wrap(fn: Callable, level: float) -> Callable:
    def clamped(*args):
        return np.clip(fn(*args), -level, level)
    return clamped


@dataclass(frozen=True)
class ModelSpec:
    """Immutable bundle of all game coefficients and declared constants.

    The callables (drift_bbar, running_cost_f0, running_cost_fbar,
    terminal_cost_F, weight_w) are built from the family specs at
    construction; every operation on a model is pure, so instances can be
    shared freely across threads.
    """

    drift_spec: FamilySpec
    control_cost_spec: FamilySpec
    state_cost_spec: FamilySpec
    terminal_spec: FamilySpec
    weight_spec: FamilySpec
    sigma: float
    action_set: tuple[float, float]
    horizon_T: float
    initial_law: InitialLaw
    threshold: float
    growth_C: float = 1.0
    lipschitz_L: float = 1.0
    truncation_level: float | None = None

    drift_bbar: Callable = field(init=False, repr=False, compare=False)
    running_cost_f0: Callable = field(init=False, repr=False, compare=False)
    running_cost_fbar: Callable = field(init=False, repr=False, compare=False)
    terminal_cost_F: Callable = field(init=False, repr=False, compare=False)
    weight_w: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _check_family(self.drift_spec, _DRIFT_FAMILIES, "drift")
        _check_family(self.control_cost_spec, _CONTROL_COST_FAMILIES, "control cost")
        _check_family(self.state_cost_spec, _STATE_COST_FAMILIES, "state cost")
        _check_family(self.terminal_spec, _TERMINAL_FAMILIES, "terminal cost")
        _check_family(self.weight_spec, _WEIGHT_FAMILIES, "weight")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        lo, hi = self.action_set
        if not lo < hi:
            raise ConfigError("action interval needs u_min < u_max")
        if self.horizon_T <= 0:
            raise ConfigError("horizon must be positive")
        if self.growth_C <= 0 or self.lipschitz_L <= 0:
            raise ConfigError("declared constants C and L must be positive")
        if self.initial_law.support_min <= self.threshold:
            raise ConfigError(
                f"initial law support reaches the absorbing threshold "
                f"({self.initial_law.support_min} <= {self.threshold})")
        object.__setattr__(self, "action_set", (float(lo), float(hi)))
        fns = {
            "drift_bbar": _drift_fn(self.drift_spec),
            "running_cost_fbar": _state_cost_fn(self.state_cost_spec),
            "terminal_cost_F": _terminal_fn(self.terminal_spec),
            "weight_w": _weight_fn(self.weight_spec),
        }
        if self.truncation_level is not None:
            if self.truncation_level <= 0:
                raise ConfigError("truncation level must be positive")
            fns = {k: _clamp_wrap(fn, self.truncation_level) for k, fn in fns.items()}
        fns["running_cost_f0"] = _control_cost_fn(self.control_cost_spec)
        for name, fn in fns.items():
            object.__setattr__(self, name, fn)

    @property
    def action_mid(self) -> float:
        lo, hi = self.action_set
        return 0.5 * (lo + hi)

    def clip_action(self, u: ArrayLike) -> np.ndarray:
        lo, hi = self.action_set
        return np.clip(u, lo, hi)


@dataclass(frozen=True)
class TruncationSchedule:
    """Strictly increasing positive clamp levels K_1 < ... < K_n."""

    levels: tuple[float, ...]

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        if not levels:
            raise ConfigError("truncation schedule must not be empty")
        if levels[0] <= 0 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigError("levels must be positive and strictly increasing")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def doubling(cls, base: float, count: int) -> "TruncationSchedule":
        return cls(tuple(base * 2.0 ** n for n in range(count)))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientValues:
    drift_total: float
    running_cost: float


def eval_coefficients(model: ModelSpec, t: float, x: float, l: float,
                      m: float, u: float) -> CoefficientValues:
    """Total drift u + bbar and total running cost f0 + fbar at one point."""
    if not 0.0 <= l <= 1.0:
        raise DomainError(f"loss fraction l={l} outside [0, 1]")
    lo, hi = model.action_set
    if not lo <= u <= hi:
        raise DomainError(f"action u={u} outside [{lo}, {hi}]")
    drift = u + float(model.drift_bbar(t, x, l, m))
    cost = float(model.running_cost_f0(t, x, u)) + float(model.running_cost_fbar(t, x, l, m))
    if not (math.isfinite(drift) and math.isfinite(cost)):
        raise DomainError("coefficients evaluated to a non-finite value")
    return CoefficientValues(drift, cost)


def truncate_model(model: ModelSpec, level: float) -> ModelSpec:
    """Clamp w, bbar, fbar and F to [-level, level]; everything else unchanged.

    sigma, the action interval, the initial law, the horizon and the
    absorbing threshold are never truncated.  Clamping is idempotent, so
    re-truncating at the same level is a no-op.
    """
    if level <= 0:
        raise DomainError("truncation level must be positive")
    return replace(model, truncation_level=float(level))


def sample_initial(model: ModelSpec, count: int, seed: int) -> np.ndarray:
    """count i.i.d. draws from the initial law; identical seed, identical draws."""
    if count < 1:
        raise DomainError("count must be >= 1")
    if model.initial_law.support_min <= model.threshold:
        raise ConfigError("initial law has mass at or below the threshold")
    uniforms = stream(seed, tag=TAG_INIT).random(count)
    return model.initial_law.ppf(uniforms)


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    max_ratio: float
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class AssumptionReport:
    probe_box: tuple[float, float]
    m_box: tuple[float, float]
    probe_count: int
    checks: tuple[AssumptionCheck, ...]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


# Relative slack granted to finite-difference Lipschitz ratios.
_LIPSCHITZ_SLACK = 1.05


def check_assumptions(model: ModelSpec, probe_count: int, seed: int,
                      probe_box: tuple[float, float] | None = None,
                      m_box: tuple[float, float] | None = None) -> AssumptionReport:
    """Probe the growth and Lipschitz declarations on a compact box.

    The sub-linear growth bounds |bbar| <= C(1+|x|+|m|), |fbar| <=
    C(1+|x|+|m|), |F| <= C(1+|x|), |w| <= C(1+|x|) and finite-difference
    Lipschitz ratios of bbar in (x, l, m) are evaluated on stratified
    (Latin hypercube) samples.  Violations are reported, never raised:
    the bounds hold globally in theory but can only be sampled here, so
    the probed box is part of the report.
    """
    if probe_count < 100:
        raise DomainError("probe_count must be at least 100")
    if probe_box is None:
        span = max(10.0, 4.0 * (abs(model.initial_law.support_max) + 1.0),
                   4.0 * abs(model.threshold))
        probe_box = (min(model.threshold, -span), span)
    if m_box is None:
        wmax = float(np.max(np.abs(model.weight_w(
            np.linspace(probe_box[0], probe_box[1], 64)))))
        m_box = (-max(1.0, wmax), max(1.0, wmax))

    rng = stream(seed, tag=TAG_PROBE)
    axes = []
    for _ in range(5):  # t, x, l, m, u
        strata = (np.arange(probe_count) + rng.random(probe_count)) / probe_count
        axes.append(rng.permutation(strata))
    t = axes[0] * model.horizon_T
    x = probe_box[0] + axes[1] * (probe_box[1] - probe_box[0])
    l = axes[2]
    m = m_box[0] + axes[3] * (m_box[1] - m_box[0])
    lo, hi = model.action_set
    u = lo + axes[4] * (hi - lo)

    C, L = model.growth_C, model.lipschitz_L
    checks = []

    def growth(name, values, bound):
        ratio = float(np.max(np.abs(values) / bound))
        checks.append(AssumptionCheck(name, ratio, ratio <= C,
                                      f"max |value| / (1+...) over probes; declared C={C}"))

    bound_xm = 1.0 + np.abs(x) + np.abs(m)
    bound_x = 1.0 + np.abs(x)
    growth("drift_growth", model.drift_bbar(t, x, l, m), bound_xm)
    growth("state_cost_growth", model.running_cost_fbar(t, x, l, m), bound_xm)
    growth("terminal_growth", model.terminal_cost_F(t, x), bound_x)
    growth("weight_growth", model.weight_w(x), bound_x)

    h = 1e-4 * max(1.0, probe_box[1] - probe_box[0])

    def lipschitz(name, delta):
        ratio = float(np.max(np.abs(delta) / h))
        checks.append(AssumptionCheck(
            name, ratio, ratio <= L * _LIPSCHITZ_SLACK,
            f"finite-difference slope at step {h:g}; declared L={L}"))

    base = model.drift_bbar(t, x, l, m)
    lipschitz("drift_lipschitz_x", model.drift_bbar(t, x + h, l, m) - base)
    lipschitz("drift_lipschitz_l", model.drift_bbar(t, x, np.clip(l + h, 0, 1), m)
              - model.drift_bbar(t, x, np.clip(l + h, 0, 1) - h, m))
    lipschitz("drift_lipschitz_m", model.drift_bbar(t, x, l, m + h) - base)

    return AssumptionReport(probe_box, m_box, probe_count, tuple(checks))
