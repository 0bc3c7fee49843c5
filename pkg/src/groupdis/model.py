"""Model objects: states, hazard rates, payments, averaging function, scenarios.

Everything a solver or simulator needs is bundled in a :class:`Scenario`:
a finite state space, transition rates ``mu[(j,k)](t, u, h, y)``, health-claim
hazards ``lam[j](t, u, h, y)``, an averaging function ``g(z, u, h)`` producing
the collective signal, an initial distribution, and a time horizon.

Rate and payment callables must accept numpy arrays for ``t``, ``u`` and ``h``
and broadcast elementwise; the shipped presets do. ``y`` is a scalar for a
one-dimensional averaging function, else a vector of length ``g.dim``.
"""

from __future__ import annotations

import hashlib
import uuid
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError

PRESET_NAME = "disability3"

#: Preset parameter defaults. The maximum credibility deviation defaults to the
#: value that reproduces the published one-individual reserve (see README).
DEFAULT_PARAMS = {
    "lambda1": 0.2,
    "lambda2": 0.3,
    "lambda3": 0.0,
    "zeta1": 0.1,
    "zeta0": 0.4,
    "beta": 2.0,
    "age": 45.0,
}

ACTIVE, DISABLED, DEAD = 0, 1, 2


@dataclass(frozen=True)
class StateSpace:
    """Ordered finite state space with a set of absorbing states."""

    names: tuple[str, ...]
    absorbing: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.names) == 0:
            raise ConfigurationError("state space must contain at least one state")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("state names must be unique")
        for j in self.absorbing:
            if not 0 <= j < len(self.names):
                raise ConfigurationError(f"absorbing index {j} out of range")

    def __len__(self):
        return len(self.names)

    def index(self, state) -> int:
        """Resolve a state given as index or name to its index."""
        if isinstance(state, (int, np.integer)):
            if not 0 <= state < len(self.names):
                raise DomainError(f"state index {state} out of range")
            return int(state)
        try:
            return self.names.index(state)
        except ValueError:
            raise DomainError(f"unknown state {state!r}") from None


@dataclass(frozen=True)
class RateModel:
    """Hazard-rate bundle with declared bounds.

    Attributes:
        transition: map (j, k), j != k, to a rate callable; absent pairs are
            identically zero (in particular every pair leaving an absorbing
            state is absent).
        claim: map j to the health-claim hazard in state j; absent states have
            zero hazard.
        rate_bound: upper bound valid for every single hazard on its domain.
        total_rate_bound: upper bound for one individual's total event
            intensity (all transitions out of the current state plus the claim
            hazard); this is the per-individual thinning envelope.
    """

    transition: Mapping[tuple[int, int], Callable]
    claim: Mapping[int, Callable]
    rate_bound: float
    total_rate_bound: float

    def __post_init__(self):
        for (j, k) in self.transition:
            if j == k:
                raise ConfigurationError(f"transition ({j},{j}) is not allowed")
        if not np.isfinite(self.rate_bound) or self.rate_bound < 0:
            raise ConfigurationError("rate_bound must be finite and nonnegative")
        if self.total_rate_bound < self.rate_bound:
            raise ConfigurationError("total_rate_bound cannot undercut rate_bound")


@dataclass(frozen=True)
class AnnuityTerms:
    """Marker for a pure sojourn annuity with a waiting period."""

    state: int
    rate: float
    waiting: float


@dataclass(frozen=True)
class PaymentSpec:
    """Sojourn payment rates b_j(t, u) and lump transition payments b_jk(t, u)."""

    sojourn: Mapping[int, Callable]
    lump: Mapping[tuple[int, int], Callable]
    annuity: AnnuityTerms | None = None


@dataclass(frozen=True)
class AveragingFunction:
    """Function g(z, u, h) whose population mean drives the collective rates.

    ``fn`` must broadcast over array ``u`` and ``h`` for fixed integer ``z``.
    ``elementwise`` declares that ``fn`` also broadcasts over an array of
    states, which lets the Monte Carlo engine evaluate whole portfolios at
    once. For ``dim > 1`` the result carries the component axis first.
    """

    dim: int
    fn: Callable
    elementwise: bool = False
    description: str = ""


@dataclass(frozen=True)
class Scenario:
    """Complete model specification, immutable after construction."""

    states: StateSpace
    rates: RateModel
    g: AveragingFunction
    pi: tuple[float, ...]
    horizon: float
    params: Mapping[str, float] = field(default_factory=dict)
    uses_collective: bool = True
    label: str = "custom"
    fingerprint_data: str = field(default_factory=lambda: uuid.uuid4().hex)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive")
        pi = np.asarray(self.pi, dtype=float)
        if pi.ndim != 1 or len(pi) != len(self.states):
            raise ConfigurationError("pi must have one entry per state")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ConfigurationError("pi must be a probability vector (sum 1 within 1e-12)")
        for (j, k) in self.rates.transition:
            if j in self.states.absorbing:
                raise ConfigurationError(
                    f"absorbing state {self.states.names[j]!r} has an outgoing rate"
                )

    @property
    def initial_distribution(self) -> np.ndarray:
        return np.asarray(self.pi, dtype=float)

    @property
    def fingerprint(self) -> str:
        payload = f"{self.label}|{self.fingerprint_data}|T={self.horizon!r}|pi={self.pi!r}"
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class Discount:
    """Deterministic short rate t -> r(t) with cumulative-integral helpers."""

    def __init__(self, rate):
        if callable(rate):
            self._fn = rate
            self._const = None
        else:
            self._const = float(rate)
            self._fn = None

    @property
    def is_constant(self) -> bool:
        return self._const is not None

    @property
    def constant_rate(self) -> float:
        if self._const is None:
            raise ConfigurationError("discount rate is not constant")
        return self._const

    def rate_at(self, t):
        if self._const is not None:
            return np.broadcast_to(self._const, np.shape(t)) if np.ndim(t) else self._const
        return self._fn(t)

    def cumulative(self, t):
        """Integral of r over [0, t]; exact for constant rates.

        Non-constant rates are integrated on a cached dense trapezoid grid
        (2**14 cells up to the largest t seen) with linear interpolation.
        """
        t = np.asarray(t, dtype=float)
        if self._const is not None:
            return self._const * t
        t_max = float(t.max()) if t.size else 0.0
        cache = getattr(self, "_cache", None)
        if cache is None or cache[0][-1] < t_max:
            grid = np.linspace(0.0, max(t_max, 1e-12), 2**14 + 1)
            vals = np.asarray(self._fn(grid), dtype=float)
            steps = np.diff(grid) * (vals[1:] + vals[:-1]) / 2.0
            cum = np.concatenate([[0.0], np.cumsum(steps)])
            cache = (grid, cum)
            self._cache = cache
        return np.interp(t, cache[0], cache[1])

    def pv_unit_annuity(self, a, b):
        """Present value of a unit payment stream over [a, b] (constant rate only)."""
        r = self.constant_rate
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        width = np.maximum(b - a, 0.0)
        if r == 0.0:
            return width
        lo = np.minimum(a, b)
        return (np.exp(-r * lo) - np.exp(-r * (lo + width))) / r


# ---------------------------------------------------------------------------
# Preset rate functions. Plain dataclasses with __call__ keep them picklable
# for process-parallel Monte Carlo.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _ConstantRate:
    value: float

    def __call__(self, t, u, h, y):
        return np.broadcast_to(self.value, np.broadcast_shapes(
            np.shape(t), np.shape(u), np.shape(h)))


@dataclass(frozen=True)
class _DisabilityRate:
    """Active -> disabled intensity with a capped collective credibility factor."""

    beta: float
    zeta0: float
    zeta1: float
    age: float

    def base(self, t):
        a = np.asarray(t, dtype=float) + self.age
        return np.exp(-9.55 + 0.24 * a - 0.0046 * a**2 + 0.000036 * a**3)

    def credibility(self, t, y):
        dev = (y + self.zeta1) / (1.0 + np.asarray(t, dtype=float)) - self.zeta1
        return np.exp(self.beta * np.minimum(dev, self.zeta0))

    def __call__(self, t, u, h, y):
        # beta = 0 switches the collective factor off entirely (y may be None).
        out = self.base(t) if self.beta == 0.0 else self.base(t) * self.credibility(t, y)
        return np.broadcast_to(out, np.broadcast_shapes(
            np.shape(out), np.shape(u), np.shape(h)))


@dataclass(frozen=True)
class _ActiveMortalityRate:
    age: float

    def __call__(self, t, u, h, y):
        a = np.asarray(t, dtype=float) + self.age
        out = 0.0005 + 10.0 ** (5.52 + 0.038 * a - 10.0)
        return np.broadcast_to(out, np.broadcast_shapes(
            np.shape(out), np.shape(u), np.shape(h)))


@dataclass(frozen=True)
class _RecoveryRate:
    age: float

    def __call__(self, t, u, h, y):
        a = np.asarray(t, dtype=float) + self.age
        return np.broadcast_to(
            np.exp(2.11 - 0.039 * a - 1.44 * np.asarray(u, dtype=float)),
            np.broadcast_shapes(np.shape(t), np.shape(u), np.shape(h)))


@dataclass(frozen=True)
class _DisabledMortalityRate:
    age: float

    def __call__(self, t, u, h, y):
        a = np.asarray(t, dtype=float) + self.age
        out = (0.0005 + 10.0 ** (5.52 + 0.038 * a - 10.0)
               + np.exp(-2.79 - 0.23 * np.asarray(u, dtype=float)))
        return np.broadcast_to(out, np.broadcast_shapes(
            np.shape(t), np.shape(u), np.shape(h)))


@dataclass(frozen=True)
class _ClaimCount:
    """Averaging function g(z, u, h) = h: the collective signal is the mean claim count."""

    def __call__(self, z, u, h):
        return np.broadcast_to(np.asarray(h, dtype=float), np.broadcast_shapes(
            np.shape(u), np.shape(h)))


@dataclass(frozen=True)
class _SelfAveragedRate:
    """Wraps a collective rate, substituting y := g(state, u, h) of the individual itself."""

    base: Callable
    g_fn: Callable
    state: int

    def __call__(self, t, u, h, y):
        return self.base(t, u, h, self.g_fn(self.state, u, h))


@dataclass(frozen=True)
class _HealthFrozenRate:
    """Wraps a rate, pinning h = 0 and y = g(state, u, 0) (claims switched off)."""

    base: Callable
    g_fn: Callable
    state: int

    def __call__(self, t, u, h, y):
        out = self.base(t, u, 0, self.g_fn(self.state, u, 0))
        return np.broadcast_to(out, np.broadcast_shapes(np.shape(out), np.shape(h)))


@dataclass(frozen=True)
class _WaitingAnnuity:
    """Sojourn payment rate b * 1{u >= waiting}."""

    rate: float
    waiting: float

    def __call__(self, t, u):
        u = np.asarray(u, dtype=float)
        out = np.where(u >= self.waiting, self.rate, 0.0)
        return np.broadcast_to(out, np.broadcast_shapes(np.shape(t), np.shape(u)))


# ---------------------------------------------------------------------------
# Scenario construction
# ---------------------------------------------------------------------------


def _require_params(params: Mapping[str, float]) -> dict[str, float]:
    merged = dict(DEFAULT_PARAMS)
    unknown = set(params) - set(DEFAULT_PARAMS)
    if unknown:
        raise ConfigurationError(f"unknown parameter(s): {sorted(unknown)}")
    merged.update({k: float(v) for k, v in params.items()})
    for name, value in merged.items():
        if value is None or not np.isfinite(value):
            raise ConfigurationError(f"parameter {name!r} is missing or not finite")
        if value < 0:
            raise ConfigurationError(f"parameter {name!r} must be nonnegative, got {value}")
    return merged


def make_disability_scenario(params: Mapping[str, float] | None = None,
                             T: float = 25.0,
                             pi: tuple[float, float, float] = (1.0, 0.0, 0.0)) -> Scenario:
    """Three-state disability scenario (active / disabled / dead).

    Only the disability rate reads the collective signal, via the factor
    exp(beta * min{(y + zeta1)/(1 + t) - zeta1, zeta0}); recovery and disabled
    mortality are duration-dependent; claim hazards are state-wise constants
    lambda1..3 and g(z, u, h) = h. The age at inception (default 45) enters the
    rate formulas as an offset to t.

    Args:
        params: overrides for :data:`DEFAULT_PARAMS` (lambda1..3, zeta0, zeta1,
            beta, age). Missing, non-finite or negative entries raise
            :class:`ConfigurationError`.
        T: contract horizon in years.
        pi: initial state distribution; default "everyone active".

    Returns:
        A :class:`Scenario` ready for the solvers and the simulator.
    """
    if T <= 0:
        raise ConfigurationError("T must be positive")
    p = _require_params(params or {})
    states = StateSpace(("active", "disabled", "dead"), absorbing=frozenset({DEAD}))
    g = AveragingFunction(dim=1, fn=_ClaimCount(), elementwise=True,
                          description="mean claim count")

    mu12 = _DisabilityRate(beta=p["beta"], zeta0=p["zeta0"], zeta1=p["zeta1"], age=p["age"])
    mu13 = _ActiveMortalityRate(age=p["age"])
    mu21 = _RecoveryRate(age=p["age"])
    mu23 = _DisabledMortalityRate(age=p["age"])
    lam = {ACTIVE: _ConstantRate(p["lambda1"]),
           DISABLED: _ConstantRate(p["lambda2"]),
           DEAD: _ConstantRate(p["lambda3"])}

    # Exact envelope over [0,T] x [0,T] x N0 x R: the disability base has an
    # increasing exponent (its derivative 0.24 - 0.0092a + 0.000108a^2 has
    # negative discriminant), both mortalities increase in t, recovery peaks at
    # t = u = 0, and the credibility factor is capped at exp(beta*zeta0).
    b12 = float(mu12.base(T)) * float(np.exp(p["beta"] * p["zeta0"]))
    b13 = float(mu13(T, 0.0, 0, 0.0))
    b21 = float(mu21(0.0, 0.0, 0, 0.0))
    b23 = b13 + float(np.exp(-2.79))
    bounds = [b12, b13, b21, b23, p["lambda1"], p["lambda2"], p["lambda3"]]
    rates = RateModel(
        transition={(ACTIVE, DISABLED): mu12, (ACTIVE, DEAD): mu13,
                    (DISABLED, ACTIVE): mu21, (DISABLED, DEAD): mu23},
        claim=lam,
        rate_bound=max(bounds),
        total_rate_bound=max(b12 + b13 + p["lambda1"],
                             b21 + b23 + p["lambda2"],
                             p["lambda3"]),
    )
    canon = "|".join(f"{k}={p[k]!r}" for k in sorted(p))
    return Scenario(states=states, rates=rates, g=g, pi=tuple(pi), horizon=float(T),
                    params=p, uses_collective=p["beta"] > 0.0, label=PRESET_NAME,
                    fingerprint_data=canon)


def collapse_single_individual(s: Scenario) -> Scenario:
    """One-individual model: the collective signal is the individual's own g.

    Every rate receives y := g(current state, u, h) pointwise, so the
    health-extended forward equations apply exactly. For a group of size one
    the running average equals g of the sole member, which makes this the
    reference ("true") one-individual model.
    """
    transition = {(j, k): _SelfAveragedRate(fn, s.g.fn, j)
                  for (j, k), fn in s.rates.transition.items()}
    claim = {j: _SelfAveragedRate(fn, s.g.fn, j) for j, fn in s.rates.claim.items()}
    rates = replace(s.rates, transition=transition, claim=claim)
    return replace(s, rates=rates, uses_collective=False,
                   label=s.label + "|collapsed",
                   fingerprint_data=s.fingerprint_data + "|collapsed")


def strip_health(s: Scenario) -> Scenario:
    """Classic no-claims variant: claim hazards removed, rates taken at h = 0.

    The collective argument is frozen at its no-claims level g(state, u, 0),
    so the result is a plain duration-dependent model suitable for the
    semi-Markov solver.
    """
    transition = {(j, k): _HealthFrozenRate(fn, s.g.fn, j)
                  for (j, k), fn in s.rates.transition.items()}
    rates = replace(s.rates, transition=transition, claim={})
    return replace(s, rates=rates, uses_collective=False,
                   label=s.label + "|classic",
                   fingerprint_data=s.fingerprint_data + "|classic")


def make_disability_annuity(b: float, waiting: float, state: int = DISABLED) -> PaymentSpec:
    """Disability annuity paying rate b while disabled for at least ``waiting`` years."""
    if waiting < 0:
        raise ConfigurationError("waiting period must be nonnegative")
    return PaymentSpec(sojourn={state: _WaitingAnnuity(float(b), float(waiting))},
                       lump={},
                       annuity=AnnuityTerms(state=state, rate=float(b), waiting=float(waiting)))


def group_average(g: AveragingFunction, z, u, h):
    """Mean of g over individuals; z, u, h are equal-length arrays.

    Uses one vectorized call when g declares itself elementwise, otherwise
    falls back to a per-individual loop. Returns shape (dim,) leading axes
    preserved for batched inputs.
    """
    if g.elementwise:
        vals = np.asarray(g.fn(z, u, h), dtype=float)
    else:
        vals = np.asarray([np.asarray(g.fn(int(zi), float(ui), int(hi)), dtype=float)
                           for zi, ui, hi in zip(z, u, h)], dtype=float).T
    return vals.mean(axis=-1)


# ---------------------------------------------------------------------------
# Point evaluation
# ---------------------------------------------------------------------------


def _check_point_args(s, t, u, h):
    if t < 0 or u < 0:
        raise DomainError("t and u must be nonnegative")
    if h < -1:
        raise DomainError("h must be >= 0 or the sentinel -1")


def eval_transition_rate(s: Scenario, j, k, t: float, u: float, h: int = 0,
                         y=None) -> float:
    """Evaluate mu_jk(t, u, h, y); absent pairs (incl. absorbing origins) are 0."""
    ji, ki = s.states.index(j), s.states.index(k)
    if ji == ki:
        raise DomainError("transition rate requires two distinct states")
    _check_point_args(s, t, u, h)
    fn = s.rates.transition.get((ji, ki))
    if fn is None:
        return 0.0
    if y is None:
        if s.uses_collective:
            raise DomainError("scenario rates depend on the collective signal; pass y")
        y = 0.0
    return float(np.asarray(fn(t, u, h, y)))


def eval_health_hazard(s: Scenario, j, t: float, u: float, h: int = 0,
                       y=None) -> float:
    """Evaluate lambda_j(t, u, h, y); h = -1 returns 0 by convention."""
    ji = s.states.index(j)
    _check_point_args(s, t, u, h)
    if h == -1:
        return 0.0
    fn = s.rates.claim.get(ji)
    if fn is None:
        return 0.0
    if y is None:
        if s.uses_collective:
            raise DomainError("scenario rates depend on the collective signal; pass y")
        y = 0.0
    return float(np.asarray(fn(t, u, h, y)))


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


def load_scenario(path) -> tuple[Scenario, PaymentSpec, Discount]:
    """Load a scenario file (TOML) and return scenario, payments, discount.

    Recognized keys: ``preset`` (only "disability3"), ``T``, ``beta``,
    ``zeta0``, ``zeta1``, ``age``, ``lambda = [l1, l2, l3]``, ``pi``,
    ``payments = { b, epsilon }`` and ``discount_rate``.
    """
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
        import tomli as tomllib

    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"cannot parse scenario file {path}: {exc}") from exc

    preset = doc.pop("preset", PRESET_NAME)
    if preset != PRESET_NAME:
        raise ConfigurationError(f"unknown preset {preset!r}; available: {PRESET_NAME!r}")

    T = float(doc.pop("T", 25.0))
    pi = tuple(doc.pop("pi", (1.0, 0.0, 0.0)))
    params = {}
    lam = doc.pop("lambda", None)
    if lam is not None:
        if len(lam) != 3:
            raise ConfigurationError("lambda must list three state-wise hazards")
        params.update({"lambda1": lam[0], "lambda2": lam[1], "lambda3": lam[2]})
    for key in ("beta", "zeta0", "zeta1", "age"):
        if key in doc:
            params[key] = doc.pop(key)
    pay_doc = doc.pop("payments", {"b": 1.0, "epsilon": 0.25})
    discount = Discount(doc.pop("discount_rate", 0.01))
    if doc:
        raise ConfigurationError(f"unknown scenario keys: {sorted(doc)}")

    scenario = make_disability_scenario(params, T=T, pi=pi)
    payments = make_disability_annuity(pay_doc.get("b", 1.0), pay_doc.get("epsilon", 0.25))
    return scenario, payments, discount
