"""Triangular (t, d, h) grid, health-count cut-off, and duration-CDF quadrature.

The solvers evolve, for every state j and claim count h, the duration CDF
``p_j(t, u, h)`` sampled on the triangle ``{(t, d): 0 <= d <= t <= T}`` with
``t = eta*m`` and ``d = eta*n``; node (m, n) stores the value at duration
``u = t - d``. Storage is one flat buffer per (state, count) so a full solve
needs ``J * (K_H + 1) * (M+1)(M+2)/2`` doubles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

_CLIP_SLACK = 10.0  # stored-value sanity envelope is [-slack*eta, 1 + slack*eta]


@dataclass(frozen=True)
class GridSpec:
    """Step length, horizon and claim-count cut-off of one discretization."""

    eta: float
    horizon: float
    k_h: int

    @property
    def n_stages(self) -> int:
        return int(round(self.horizon / self.eta))

    @property
    def n_nodes(self) -> int:
        m = self.n_stages
        return (m + 1) * (m + 2) // 2

    def times(self) -> np.ndarray:
        return self.eta * np.arange(self.n_stages + 1)

    def key(self) -> str:
        return f"eta={self.eta!r},T={self.horizon!r},kh={self.k_h}"


def build_grid(T: float, eta: float, k_h: int) -> GridSpec:
    """Validate and build a :class:`GridSpec`; T/eta must be integer (rel. 1e-9)."""
    if eta <= 0 or T <= 0:
        raise ConfigurationError("eta and T must be positive")
    if k_h < 0:
        raise ConfigurationError("k_h must be nonnegative")
    ratio = T / eta
    if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
        raise ConfigurationError(f"T/eta = {ratio} is not an integer")
    return GridSpec(eta=float(eta), horizon=float(T), k_h=int(k_h))


def poisson_tail(mean: float, k: int) -> float:
    """P(X > k) for X ~ Poisson(mean), by exact term summation from above."""
    if mean < 0:
        raise ConfigurationError("mean must be nonnegative")
    if mean == 0.0:
        return 0.0
    k_hi = int(mean + 40.0 * math.sqrt(mean) + 60.0)
    terms = [math.exp(-mean + i * math.log(mean) - math.lgamma(i + 1))
             for i in range(k + 1, k_hi + 1)]
    return float(sum(reversed(terms)))


def select_cutoff(lambda_bound: float, T: float, err: float = 1e-6) -> int:
    """Smallest K with P(Poisson(lambda_bound * T) > K) < err.

    Exact cumulative summation of Poisson terms (summed smallest-first from
    the upper tail, no normal approximation). ``err`` must lie in (0, 1].
    """
    if not 0.0 < err <= 1.0:
        raise ConfigurationError("err must lie in (0, 1]")
    if lambda_bound < 0 or T <= 0:
        raise ConfigurationError("lambda_bound must be >= 0 and T > 0")
    mean = lambda_bound * T
    if mean == 0.0:
        return 0
    k_hi = int(mean + 40.0 * math.sqrt(mean) + 60.0)
    log_mean = math.log(mean)
    pmf = np.exp(-mean + np.arange(k_hi + 1) * log_mean
                 - np.array([math.lgamma(i + 1) for i in range(k_hi + 1)]))
    tail_beyond = np.concatenate([np.cumsum(pmf[::-1])[::-1][1:], [0.0]])
    hits = np.nonzero(tail_beyond < err)[0]
    if hits.size == 0:  # pragma: no cover - k_hi margin makes this unreachable
        raise ConfigurationError("cut-off search did not converge")
    return int(hits[0])


class ProbabilityGrid:
    """Duration-CDF values on the triangular grid for every (state, count).

    Values are written stage by stage by a single solver; completed stages are
    immutable. Stored values are kept raw (Euler overshoot may leave tiny
    negatives); :meth:`value` and CSV dumps clamp to [0, 1], while quadrature
    and solver audits read the raw buffer.
    """

    def __init__(self, spec: GridSpec, state_names, conditioning=None,
                 scenario_fingerprint: str = "", model_tag: str = ""):
        self.spec = spec
        self.state_names = tuple(state_names)
        self.conditioning = conditioning
        self.scenario_fingerprint = scenario_fingerprint
        self.model_tag = model_tag
        j = len(self.state_names)
        h = spec.k_h + 1
        self._buf = np.zeros((j, h, spec.n_nodes), dtype=np.float64)
        m = spec.n_stages
        self._offsets = (np.arange(m + 2) * (np.arange(m + 2) + 1)) // 2

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    def stage(self, m: int) -> np.ndarray:
        """Read-only view of stage m with duration-index axis n = 0..m."""
        view = self._stage(m)
        view.flags.writeable = False
        return view

    def _stage(self, m: int) -> np.ndarray:
        if not 0 <= m <= self.spec.n_stages:
            raise IndexError(f"stage {m} out of range")
        lo, hi = self._offsets[m], self._offsets[m + 1]
        return self._buf[:, :, lo:hi]

    def value(self, m: int, n: int, j: int, h: int, clamp: bool = True) -> float:
        v = float(self._stage(m)[j, h, n])
        return min(max(v, 0.0), 1.0) if clamp else v

    def duration_cdf(self, m: int, j: int, h: int) -> np.ndarray:
        """CDF over the duration axis u = eta*k, k = 0..m (raw values)."""
        return self._stage(m)[j, h, ::-1].copy()

    def total_mass(self, m: int) -> float:
        return float(self._stage(m)[:, :, 0].sum())

    def state_mass(self, m: int) -> np.ndarray:
        """Occupation mass per state at stage m (summed over counts)."""
        return self._stage(m)[:, :, 0].sum(axis=1)

    def count_mass(self, m: int) -> np.ndarray:
        """Mass per claim count at stage m (summed over states)."""
        return self._stage(m)[:, :, 0].sum(axis=0)

    def sanity_envelope(self) -> float:
        return _CLIP_SLACK * self.spec.eta

    def to_csv(self, fh, header_lines=()) -> None:
        """Dump all nodes as ``t,d,h,state,value`` ordered by (m, n, h, state)."""
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("t,d,h,state,value\n")
        eta = self.spec.eta
        for m in range(self.spec.n_stages + 1):
            stage = self._stage(m)
            for n in range(m + 1):
                for h in range(self.spec.k_h + 1):
                    for j, name in enumerate(self.state_names):
                        v = min(max(float(stage[j, h, n]), 0.0), 1.0)
                        fh.write(f"{eta * m:.12g},{eta * n:.12g},{h},{name},{v:.12g}\n")


def integrate_against_duration_cdf(f, grid: ProbabilityGrid, j: int, h: int,
                                   m: int) -> float:
    """Stieltjes integral of f(u) against the duration measure p_j(t, du, h).

    Cell masses are CDF differences between adjacent duration nodes with f
    evaluated at cell midpoints, plus f(0) times the atom at u = 0 (nonzero
    only at t = 0, where the whole population has duration zero). This
    captures the never-jumped atom at u = t in the last cell and telescopes to
    the total (j, h) mass for f = 1 at every stage.
    """
    stage = grid.stage(m)
    atom = float(stage[j, h, m])
    total = f(0.0) * atom if atom != 0.0 else 0.0
    if m == 0:
        return float(total)
    eta = grid.spec.eta
    cdf = stage[j, h, ::-1]
    delta = np.diff(cdf)
    mids = eta * (np.arange(m) + 0.5)
    fv = np.broadcast_to(np.asarray(f(mids), dtype=float), (m,))
    return float(total + fv @ delta)
