"""Exact simulation of the interacting portfolio and Monte Carlo valuation.

Sampling is acceptance-rejection against one global homogeneous proposal
stream of rate ``n * total_rate_bound``: at each candidate time all individual
hazards are evaluated at the left limits (including the running group average)
and a single uniform picks an event from the stacked hazard intervals or
rejects. Every candidate consumes exactly two uniforms (gap, selector) from a
counter-based Philox substream keyed by (seed, sample), so sample m is
bit-reproducible and independent of how many samples are requested.

Two engines share that randomness protocol and produce identical paths: a
per-path loop that records full event logs, and a lockstep engine vectorized
across samples that only accumulates discounted annuity payments (used by
:func:`mc_reserve` whenever payments are a pure waiting-period annuity under a
constant discount rate). Pathwise present values are computed exactly between
events - no time grid is involved - so Monte Carlo baselines carry no
discretization bias.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._quad import batched_adaptive_trapezoid
from .errors import ConfigurationError, FingerprintError, RateBoundError
from .forward import MeanPath
from .model import Discount, PaymentSpec, Scenario, group_average

__all__ = [
    "PathEvent", "PortfolioPath", "MCEstimate", "Diagnostics",
    "simulate_portfolio", "path_present_value", "mc_reserve",
    "per_individual_pvs", "chaos_diagnostics",
]

_TAPE_BLOCK = 256  # candidate pairs per RNG refill
_BOUND_SLACK = 1.0 + 1e-9


@dataclass(frozen=True)
class PathEvent:
    time: float
    individual: int
    kind: str  # "transition" | "claim"
    src: int
    dst: int


@dataclass
class PortfolioPath:
    """One exact realization of the n-individual model on [0, T]."""

    n: int
    horizon: float
    seed: int
    sample: int
    state_names: tuple[str, ...]
    initial_states: np.ndarray
    events: list[PathEvent]
    final_states: np.ndarray
    final_last_jump: np.ndarray
    final_counts: np.ndarray
    nu_times: np.ndarray
    nu_values: np.ndarray  # (n_events + 1, dim), right-continuous step values
    scenario_fingerprint: str = ""

    def nu_at(self, t):
        """Right-continuous step lookup of the running group average."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.nu_times, t, side="right") - 1
        return self.nu_values[np.maximum(idx, 0)]

    def events_to_csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("time,individual,kind,from,to\n")
        for e in self.events:
            fh.write(f"{e.time:.12g},{e.individual},{e.kind},"
                     f"{self.state_names[e.src]},{self.state_names[e.dst]}\n")

    def nu_to_csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        if self.nu_values.shape[1] == 1:
            fh.write("time,nu\n")
            for t, v in zip(self.nu_times, self.nu_values[:, 0]):
                fh.write(f"{t:.12g},{v:.12g}\n")
        else:
            cols = ",".join(f"nu_{i}" for i in range(self.nu_values.shape[1]))
            fh.write(f"time,{cols}\n")
            for t, row in zip(self.nu_times, self.nu_values):
                fh.write(f"{t:.12g}," + ",".join(f"{v:.12g}" for v in row) + "\n")


@dataclass
class MCEstimate:
    mean: float
    std_error: float
    m_samples: int
    n: int
    seed: int
    per_sample_pv: np.ndarray | None = None


@dataclass
class Diagnostics:
    """Convergence diagnostics of the empirical average against the mean path."""

    sup_distance: np.ndarray
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray
    std_by_n: dict[int, float] | None = None

    def histogram_to_csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("bin_left,bin_right,count\n")
        for lo, hi, c in zip(self.histogram_edges[:-1], self.histogram_edges[1:],
                             self.histogram_counts):
            fh.write(f"{lo:.12g},{hi:.12g},{c}\n")


def _substream(seed: int, sample: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(sample),))
    return np.random.Generator(np.random.Philox(ss))


def _initial_states(rng, pi, n) -> np.ndarray:
    cum = np.cumsum(pi)
    return np.searchsorted(cum, rng.random(n), side="right").astype(np.int64)


class _Tape:
    """Blocked stream of (gap, selector) uniform pairs from one substream."""

    def __init__(self, rng, block=_TAPE_BLOCK):
        self._rng = rng
        self._block = block
        self._buf = rng.random(2 * block)
        self._i = 0

    def pair(self):
        if self._i >= self._buf.shape[0]:
            self._buf = self._rng.random(2 * self._block)
            self._i = 0
        u1, u2 = self._buf[self._i], self._buf[self._i + 1]
        self._i += 2
        return u1, u2


def simulate_portfolio(s: Scenario, n: int, T: float | None = None,
                       seed: int = 0, sample: int = 0) -> PortfolioPath:
    """Sample one portfolio path with a full, time-ordered event log."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    if not math.isfinite(s.rates.total_rate_bound):
        raise ConfigurationError("total_rate_bound must be finite for thinning")
    T = s.horizon if T is None else float(T)
    pairs = sorted(s.rates.transition)
    fns = [s.rates.transition[p] for p in pairs]
    P = len(pairs)
    proposal = n * s.rates.total_rate_bound

    rng = _substream(seed, sample)
    z = _initial_states(rng, s.initial_distribution, n)
    z0 = z.copy()
    tape = _Tape(rng)
    y_last = np.zeros(n)
    h = np.zeros(n, dtype=np.int64)
    events: list[PathEvent] = []
    nu_times = [0.0]
    nu_values = [np.atleast_1d(group_average(s.g, z, np.zeros(n), h))]

    t = 0.0
    while proposal > 0.0:
        u1, u2 = tape.pair()
        t = t - math.log(u1) / proposal if u1 > 0.0 else math.inf
        if t > T:
            break
        u = t - y_last
        nu = group_average(s.g, z, u, h)
        y_arg = float(nu) if s.g.dim == 1 else nu
        haz = np.zeros((n, P + 1))
        for p, ((j, k), fn) in enumerate(zip(pairs, fns)):
            haz[:, p] = np.where(z == j, np.asarray(fn(t, u, h, y_arg), dtype=float), 0.0)
        lam = np.zeros(n)
        for j, fn in s.rates.claim.items():
            lam = np.where(z == j, np.asarray(fn(t, u, h, y_arg), dtype=float), lam)
        haz[:, P] = lam
        _check_bounds(haz, s.rates)

        csum = np.cumsum(haz.reshape(-1))
        target = u2 * proposal
        if target < csum[-1]:
            idx = int(np.searchsorted(csum, target, side="right"))
            who, kind = divmod(idx, P + 1)
            if kind == P:
                h[who] += 1
                events.append(PathEvent(t, who, "claim", int(z[who]), int(z[who])))
            else:
                j, k = pairs[kind]
                z[who] = k
                y_last[who] = t
                events.append(PathEvent(t, who, "transition", j, k))
            nu_times.append(t)
            nu_values.append(np.atleast_1d(group_average(s.g, z, t - y_last, h)))

    return PortfolioPath(
        n=n, horizon=T, seed=seed, sample=sample, state_names=s.states.names,
        initial_states=z0,
        events=events, final_states=z, final_last_jump=y_last, final_counts=h,
        nu_times=np.asarray(nu_times), nu_values=np.asarray(nu_values),
        scenario_fingerprint=s.fingerprint)


def _check_bounds(haz, rates):
    if haz.size == 0:
        return
    if float(haz.max(initial=0.0)) > rates.rate_bound * _BOUND_SLACK:
        raise RateBoundError(
            f"hazard {float(haz.max()):.6g} exceeds declared rate_bound {rates.rate_bound:.6g}")
    totals = haz.sum(axis=-1)
    if float(totals.max(initial=0.0)) > rates.total_rate_bound * _BOUND_SLACK:
        raise RateBoundError(
            f"total intensity {float(totals.max()):.6g} exceeds declared bound "
            f"{rates.total_rate_bound:.6g}")


# ---------------------------------------------------------------------------
# Pathwise present values
# ---------------------------------------------------------------------------


def _segments(path: PortfolioPath):
    """Per-individual sojourns (individual, state, entry, end) and lump events.

    Claims do not break sojourns: they change neither the state nor the
    duration clock, and sojourn payments do not read the claim count.
    """
    n = path.n
    state = path.initial_states.copy()
    entry = np.zeros(n)
    segments = []
    lumps = []
    for e in path.events:
        if e.kind != "transition":
            continue
        who = e.individual
        segments.append((who, int(state[who]), entry[who], e.time))
        lumps.append((who, int(state[who]), e.dst, entry[who], e.time))
        state[who] = e.dst
        entry[who] = e.time
    for who in range(n):
        segments.append((who, int(state[who]), entry[who], path.horizon))
    return segments, lumps


def path_present_value(path: PortfolioPath, pay: PaymentSpec, discount: Discount,
                       per_individual: bool = False):
    """Discounted pathwise payments, exactly integrated between events.

    A waiting-period annuity under a constant rate is valued in closed form;
    any other sojourn payment is integrated per segment by adaptive trapezoid
    (tolerance 1e-10). Returns the group average, or the per-individual
    vector when ``per_individual`` is set.
    """
    segments, lumps = _segments(path)
    out = np.zeros(path.n)
    terms = pay.annuity
    closed_form = (terms is not None and not pay.lump
                   and set(pay.sojourn) == {terms.state} and discount.is_constant)
    if closed_form:
        rows = [(who, entry, end) for who, st, entry, end in segments
                if st == terms.state]
        if rows:
            who = np.array([r[0] for r in rows])
            a = np.array([r[1] + terms.waiting for r in rows])
            b = np.array([r[2] for r in rows])
            np.add.at(out, who, terms.rate * discount.pv_unit_annuity(a, b))
    else:
        jobs = [(who, st, entry, end) for who, st, entry, end in segments
                if st in pay.sojourn]
        if jobs:
            who = np.array([j[0] for j in jobs])
            st = np.array([j[1] for j in jobs])
            entry = np.array([j[2] for j in jobs])
            a = entry
            b = np.array([j[3] for j in jobs])

            def integrand(tv, idx):
                vals = np.zeros_like(tv)
                for state_id, fn in pay.sojourn.items():
                    sel = st[idx] == state_id
                    if sel.any():
                        vals[sel] = np.asarray(
                            fn(tv[sel], tv[sel] - entry[idx][sel]), dtype=float)
                return vals * np.exp(-discount.cumulative(tv))

            np.add.at(out, who, batched_adaptive_trapezoid(integrand, a, b, tol=1e-10))
        for who_i, src, dst, entry_i, t_i in lumps:
            fn = pay.lump.get((src, dst))
            if fn is not None:
                out[who_i] += float(np.asarray(fn(t_i, t_i - entry_i))) * float(
                    np.exp(-discount.cumulative(np.asarray(t_i))))
    return out if per_individual else float(out.mean())


# ---------------------------------------------------------------------------
# Lockstep Monte Carlo engine
# ---------------------------------------------------------------------------


def _lockstep_annuity_pvs(s: Scenario, terms, r: float, n: int, m_samples: int,
                          T: float, seed: int, sample0: int = 0) -> np.ndarray:
    """Group-average annuity PVs for samples sample0..sample0+m_samples-1.

    Vectorizes the per-path candidate loop across samples while consuming each
    sample's substream exactly like :func:`simulate_portfolio`.
    """
    pairs = sorted(s.rates.transition)
    fns = [s.rates.transition[p] for p in pairs]
    P = len(pairs)
    proposal = n * s.rates.total_rate_bound
    disc = Discount(r)
    M = m_samples

    gens = [_substream(seed, sample0 + m) for m in range(M)]
    z = np.empty((M, n), dtype=np.int64)
    pi = s.initial_distribution
    for m, g in enumerate(gens):
        z[m] = _initial_states(g, pi, n)
    block = 2 * _TAPE_BLOCK
    buf = np.empty((M, block))
    for m, g in enumerate(gens):
        buf[m] = g.random(block)
    ptr = np.zeros(M, dtype=np.int64)

    y_last = np.zeros((M, n))
    h = np.zeros((M, n), dtype=np.int64)
    t_now = np.zeros(M)
    pv = np.zeros(M)
    entry = np.where(z == terms.state, 0.0, np.nan)
    active = np.ones(M, dtype=bool)

    def close_at_horizon(rows):
        ent = entry[rows]
        start = np.where(np.isnan(ent), T, ent + terms.waiting)
        pv[rows] += terms.rate * disc.pv_unit_annuity(start, np.full_like(start, T)).sum(axis=1)

    while proposal > 0.0 and active.any():
        rows = np.nonzero(active)[0]
        refill = rows[ptr[rows] + 2 > block]
        for m in refill:
            buf[m] = gens[m].random(block)
            ptr[m] = 0
        u1 = buf[rows, ptr[rows]]
        u2 = buf[rows, ptr[rows] + 1]
        ptr[rows] += 2
        with np.errstate(divide="ignore"):
            t_new = t_now[rows] - np.log(u1) / proposal
        over = t_new > T
        if over.any():
            done_rows = rows[over]
            close_at_horizon(done_rows)
            active[done_rows] = False
        rows = rows[~over]
        if rows.size == 0:
            continue
        tt = t_new[~over]
        t_now[rows] = tt
        uu = tt[:, None] - y_last[rows]
        hh = h[rows]
        zz = z[rows]
        nu = np.asarray(s.g.fn(zz, uu, hh), dtype=float).mean(axis=-1)
        haz = np.zeros((rows.size, n, P + 1))
        for p, ((j, k), fn) in enumerate(zip(pairs, fns)):
            vals = np.asarray(fn(tt[:, None], uu, hh, nu[:, None]), dtype=float)
            haz[:, :, p] = np.where(zz == j, vals, 0.0)
        lam = np.zeros((rows.size, n))
        for j, fn in s.rates.claim.items():
            lam = np.where(zz == j,
                           np.asarray(fn(tt[:, None], uu, hh, nu[:, None]), dtype=float),
                           lam)
        haz[:, :, P] = lam

        csum = np.cumsum(haz.reshape(rows.size, -1), axis=1)
        # Bound checks off the cumulative sums: per-event max and, per
        # individual, the stacked-interval total.
        if float(haz.max(initial=0.0)) > s.rates.rate_bound * _BOUND_SLACK:
            raise RateBoundError(
                f"hazard {float(haz.max()):.6g} exceeds declared rate_bound "
                f"{s.rates.rate_bound:.6g}")
        ind_tot = csum[:, P::P + 1]
        ind_tot = np.diff(ind_tot, axis=1, prepend=0.0)
        if float(ind_tot.max(initial=0.0)) > s.rates.total_rate_bound * _BOUND_SLACK:
            raise RateBoundError(
                f"total intensity {float(ind_tot.max()):.6g} exceeds declared bound "
                f"{s.rates.total_rate_bound:.6g}")
        target = u2[~over] * proposal
        acc = target < csum[:, -1]
        if not acc.any():
            continue
        ar = np.nonzero(acc)[0]
        idx = (csum[ar] <= target[ar][:, None]).sum(axis=1)
        who = idx // (P + 1)
        kind = idx % (P + 1)
        grows = rows[ar]
        t_acc = tt[ar]

        claims = kind == P
        if claims.any():
            h[grows[claims], who[claims]] += 1
        for p, (j, k) in enumerate(pairs):
            sel = kind == p
            if not sel.any():
                continue
            rr, ll, ts = grows[sel], who[sel], t_acc[sel]
            if k == terms.state:
                entry[rr, ll] = ts
            if j == terms.state:
                pv[rr] += terms.rate * disc.pv_unit_annuity(entry[rr, ll] + terms.waiting, ts)
                entry[rr, ll] = np.nan
            z[rr, ll] = k
            y_last[rr, ll] = ts

    remaining = np.nonzero(active)[0]
    if remaining.size:
        close_at_horizon(remaining)
    return pv / n


def _mc_chunk(args):
    s, pay, discount, n, count, seed, sample0, T = args
    terms = pay.annuity
    fast = (terms is not None and not pay.lump and set(pay.sojourn) == {terms.state}
            and discount.is_constant and s.g.dim == 1 and s.g.elementwise)
    if fast:
        return _lockstep_annuity_pvs(s, terms, discount.constant_rate, n, count,
                                     T, seed, sample0)
    return np.array([
        path_present_value(simulate_portfolio(s, n, T, seed, sample0 + m), pay, discount)
        for m in range(count)])


def mc_reserve(s: Scenario, pay: PaymentSpec, discount: Discount, n: int,
               m_samples: int, seed: int = 0, keep_samples: bool = False,
               threads: int = 1) -> MCEstimate:
    """Monte Carlo estimate of the group-average discounted payments.

    Each sample is one exact portfolio path; the estimate is the mean over
    samples of the per-sample group average, with its standard error. Samples
    use independent substreams, so results are independent of ``threads`` and
    of how many further samples are ever drawn.
    """
    if m_samples < 1:
        raise ConfigurationError("m_samples must be at least 1")
    T = s.horizon
    if threads > 1 and m_samples >= 2 * threads:
        bounds = np.linspace(0, m_samples, threads + 1).astype(int)
        chunks = [(s, pay, discount, n, int(hi - lo), seed, int(lo), T)
                  for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_mc_chunk, chunks))
        pvs = np.concatenate(parts)
    else:
        pvs = _mc_chunk((s, pay, discount, n, m_samples, seed, 0, T))
    mean = float(pvs.mean())
    std_error = float(pvs.std(ddof=1) / math.sqrt(m_samples)) if m_samples > 1 else 0.0
    return MCEstimate(mean=mean, std_error=std_error, m_samples=m_samples, n=n,
                      seed=seed, per_sample_pv=pvs if keep_samples else None)


def per_individual_pvs(s: Scenario, pay: PaymentSpec, discount: Discount, n: int,
                       m_samples: int, seed: int = 0) -> np.ndarray:
    """(m_samples, n) matrix of individual PVs; exchangeability diagnostics."""
    return np.array([
        path_present_value(simulate_portfolio(s, n, None, seed, m), pay, discount,
                           per_individual=True)
        for m in range(m_samples)])


def chaos_diagnostics(s: Scenario, v: MeanPath, runs, pvs: MCEstimate,
                      repeats: dict[int, list[MCEstimate]] | None = None,
                      bins: int = 50) -> Diagnostics:
    """Empirical-vs-mean-field diagnostics.

    Returns the sup distance over the grid between each run's group average
    and the mean path, a histogram of the retained per-sample PVs, and (when
    ``repeats`` maps group sizes to repeated estimates) the run-to-run
    standard deviation per group size.
    """
    if not v.fingerprint.startswith(s.fingerprint):
        raise FingerprintError("mean path does not belong to this scenario")
    if pvs.per_sample_pv is None:
        raise ConfigurationError("chaos diagnostics need an estimate with retained samples")
    times = v.spec.times()
    sup = np.empty(len(runs))
    for i, run in enumerate(runs):
        nu = run.nu_at(times)
        sup[i] = float(np.abs(nu - v.values).max())
    counts, edges = np.histogram(pvs.per_sample_pv, bins=bins)
    std_by_n = None
    if repeats:
        std_by_n = {int(k): float(np.std([e.mean for e in ests], ddof=1))
                    for k, ests in sorted(repeats.items())}
    return Diagnostics(sup_distance=sup, histogram_edges=edges,
                       histogram_counts=counts, std_by_n=std_by_n)
