"""Partial log-likelihoods and occurrence-exposure estimation from event data.

Observations are per-company event logs (the simulator's format) truncated at
a company-level censoring time. Censoring times are taken as given and
treated as non-informative; companies are assumed mutually independent, so
likelihoods and occurrence-exposure tables are plain sums over companies.

Evaluation is exact up to quadrature tolerance: log-hazard terms at the
recorded event times (at left limits of duration, count and group average),
minus integrated hazards computed per inter-event segment by adaptive
trapezoid (exact for constant hazards). The group average is carried as a
step function between events, which is exact for count-based averaging
functions such as g(z, u, h) = h; duration-dependent averaging functions
would be frozen at segment starts.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from ._quad import batched_adaptive_trapezoid
from .errors import ConfigurationError, DataError
from .model import Scenario, group_average
from .simulate import PathEvent, PortfolioPath

__all__ = [
    "CompanyObservation", "ObservationSet", "BucketSpec", "OccurrenceExposure",
    "partial_loglik", "occurrence_exposure_mle",
]

logger = logging.getLogger(__name__)


@dataclass
class CompanyObservation:
    """One company's censored event history."""

    n: int
    censor_time: float
    initial_states: np.ndarray
    events: list[PathEvent]
    state_names: tuple[str, ...]

    def __post_init__(self):
        last = 0.0
        for e in self.events:
            if e.time < last or e.time > self.censor_time:
                raise DataError("events must be time-ordered within [0, censor_time]")
            last = e.time

    @classmethod
    def from_path(cls, path: PortfolioPath, censor_time: float | None = None):
        r = path.horizon if censor_time is None else float(censor_time)
        return cls(n=path.n, censor_time=r, initial_states=path.initial_states.copy(),
                   events=[e for e in path.events if e.time <= r],
                   state_names=path.state_names)


@dataclass
class ObservationSet:
    companies: list[CompanyObservation]

    @classmethod
    def from_paths(cls, paths, censor_time: float | None = None):
        return cls([CompanyObservation.from_path(p, censor_time) for p in paths])

    def to_csv(self, fh, header_lines=()) -> None:
        """Simulator event-log columns plus company and censoring_time."""
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("time,individual,kind,from,to,company,censoring_time\n")
        for c, comp in enumerate(self.companies):
            for e in comp.events:
                fh.write(f"{e.time:.12g},{e.individual},{e.kind},"
                         f"{comp.state_names[e.src]},{comp.state_names[e.dst]},"
                         f"{c},{comp.censor_time:.12g}\n")

    @classmethod
    def from_csv(cls, fh, scenario: Scenario, n_by_company=None, default_state=0):
        """Rebuild observations from an event-log file.

        The log does not record who never had an event, so the company size
        defaults to the largest individual index seen plus one (override with
        ``n_by_company``), and initial states are inferred from each
        individual's first transition, falling back to ``default_state``.
        """
        names = scenario.states.names
        rows = [r for r in csv.DictReader(
            line for line in fh if not line.startswith("#"))]
        by_company: dict[int, list[dict]] = {}
        for r in rows:
            by_company.setdefault(int(r["company"]), []).append(r)
        companies = []
        for cid in sorted(by_company):
            recs = by_company[cid]
            censor = float(recs[0]["censoring_time"])
            max_idx = max(int(r["individual"]) for r in recs)
            n = max_idx + 1
            if n_by_company is not None:
                n = int(n_by_company[cid]) if not isinstance(n_by_company, int) \
                    else int(n_by_company)
                if n <= max_idx:
                    raise DataError(f"company {cid}: n={n} but saw individual {max_idx}")
            init = np.full(n, scenario.states.index(default_state), dtype=np.int64)
            seen = np.zeros(n, dtype=bool)
            events = []
            for r in sorted(recs, key=lambda r: float(r["time"])):
                who = int(r["individual"])
                src, dst = names.index(r["from"]), names.index(r["to"])
                if r["kind"] == "transition" and not seen[who]:
                    init[who] = src
                if not seen[who] and r["kind"] == "claim":
                    init[who] = src
                seen[who] = True
                events.append(PathEvent(float(r["time"]), who, r["kind"], src, dst))
            companies.append(CompanyObservation(
                n=n, censor_time=censor, initial_states=init, events=events,
                state_names=names))
        return cls(companies)


def _replay(comp: CompanyObservation, s: Scenario, on_segment, on_event):
    """Walk one company's history, calling back per segment and per event."""
    z = comp.initial_states.copy()
    y = np.zeros(comp.n)
    h = np.zeros(comp.n, dtype=np.int64)
    prev = 0.0
    for e in comp.events:
        nu_seg = np.atleast_1d(group_average(s.g, z, np.full(comp.n, prev) - y, h))
        if e.time > prev:
            on_segment(prev, e.time, z, y, h, nu_seg)
        nu_minus = np.atleast_1d(group_average(s.g, z, np.full(comp.n, e.time) - y, h))
        on_event(e, z, y, h, nu_minus)
        if e.kind == "claim":
            h[e.individual] += 1
        else:
            z[e.individual] = e.dst
            y[e.individual] = e.time
        prev = e.time
    if comp.censor_time > prev:
        nu_seg = np.atleast_1d(group_average(s.g, z, np.full(comp.n, prev) - y, h))
        on_segment(prev, comp.censor_time, z, y, h, nu_seg)


class _JobBatch:
    """Per-hazard segment jobs: interval plus frozen (y, h, nu) context."""

    def __init__(self):
        self.a, self.b, self.y, self.h, self.nu = [], [], [], [], []

    def add(self, t0, t1, y, h, nu):
        count = y.shape[0]
        if count == 0:
            return
        self.a.append(np.full(count, t0))
        self.b.append(np.full(count, t1))
        self.y.append(np.asarray(y, dtype=float))
        self.h.append(np.asarray(h, dtype=float))
        self.nu.append(np.full(count, nu))

    def integrate(self, fn, tol=1e-8) -> float:
        if not self.a:
            return 0.0
        a = np.concatenate(self.a)
        b = np.concatenate(self.b)
        y = np.concatenate(self.y)
        h = np.concatenate(self.h)
        nu = np.concatenate(self.nu)

        def integrand(tv, idx):
            return np.asarray(fn(tv, tv - y[idx], h[idx], nu[idx]), dtype=float)

        return float(batched_adaptive_trapezoid(integrand, a, b, tol=tol).sum())


def partial_loglik(data: ObservationSet, s: Scenario):
    """Partial log-likelihoods of the claim hazards and each transition rate.

    Returns ``(loglik_health, loglik_transitions)`` where the second item maps
    (from, to) state-index pairs to their individual partial log-likelihoods.
    A hazard of zero at one of its own observed events yields -inf (the model
    cannot have produced the data), reported with a warning.
    """
    if s.g.dim != 1:
        raise ConfigurationError("estimation supports one-dimensional averaging functions")
    pairs = sorted(s.rates.transition)
    log_health = 0.0
    log_trans = {p: 0.0 for p in pairs}
    lam_jobs = {j: _JobBatch() for j in s.rates.claim}
    mu_jobs = {p: _JobBatch() for p in pairs}

    def on_segment(t0, t1, z, y, h, nu_seg):
        nu0 = float(nu_seg[0])
        for j, batch in lam_jobs.items():
            sel = z == j
            batch.add(t0, t1, y[sel], h[sel], nu0)
        for (j, k), batch in mu_jobs.items():
            sel = z == j
            batch.add(t0, t1, y[sel], h[sel], nu0)

    def on_event(e, z, y, h, nu_minus):
        nonlocal log_health
        who = e.individual
        u = e.time - y[who]
        y_arg = float(nu_minus[0])
        if e.kind == "claim":
            fn = s.rates.claim.get(int(z[who]))
            val = float(np.asarray(fn(e.time, u, int(h[who]), y_arg))) if fn else 0.0
            if val <= 0.0:
                logger.warning("claim at t=%.6g has zero hazard; log-likelihood is -inf",
                               e.time)
                log_health = -math.inf
            else:
                log_health += math.log(val)
        else:
            key = (e.src, e.dst)
            fn = s.rates.transition.get(key)
            val = float(np.asarray(fn(e.time, u, int(h[who]), y_arg))) if fn else 0.0
            if val <= 0.0:
                logger.warning("transition %s at t=%.6g has zero hazard; "
                               "log-likelihood is -inf", key, e.time)
                log_trans[key] = -math.inf
            else:
                log_trans[key] = log_trans.get(key, 0.0) + math.log(val)

    for comp in data.companies:
        _replay(comp, s, on_segment, on_event)

    for j, batch in lam_jobs.items():
        log_health -= batch.integrate(s.rates.claim[j])
    for p, batch in mu_jobs.items():
        log_trans[p] -= batch.integrate(s.rates.transition[p])
    return log_health, log_trans


# ---------------------------------------------------------------------------
# Occurrence-exposure tables
# ---------------------------------------------------------------------------


@dataclass
class BucketSpec:
    """Cell grid over (t, u, h, y); omitted axes collapse to one bucket.

    ``h_cap = c`` buckets counts as 0, 1, ..., c-1, >=c. ``y_edges`` override
    the default quantile bucketing of observed group averages.
    """

    t_edges: np.ndarray | None = None
    u_edges: np.ndarray | None = None
    h_cap: int | None = None
    y_edges: np.ndarray | None = None
    y_quantiles: int = 5


@dataclass
class OccurrenceExposure:
    """Occurrences and exposures per cell and hazard, with Poisson MLEs."""

    t_edges: np.ndarray
    u_edges: np.ndarray
    h_cap: int
    y_edges: np.ndarray
    state_names: tuple[str, ...]
    exposure_by_state: np.ndarray  # (J, nt, nu, nh, ny)
    occ_claim: dict[int, np.ndarray]
    occ_trans: dict[tuple[int, int], np.ndarray]

    def hazard_keys(self):
        for j in sorted(self.occ_claim):
            yield ("claim", j)
        for p in sorted(self.occ_trans):
            yield ("transition", p)

    def _occ(self, key):
        kind, which = key
        return self.occ_claim[which] if kind == "claim" else self.occ_trans[which]

    def rate(self, key):
        occ = self._occ(key)
        j = key[1] if key[0] == "claim" else key[1][0]
        expo = self.exposure_by_state[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(expo > 0, occ / np.where(expo > 0, expo, 1.0), 0.0)
        return out

    def std_error(self, key):
        occ = self._occ(key)
        j = key[1] if key[0] == "claim" else key[1][0]
        expo = self.exposure_by_state[j]
        return np.where(expo > 0, np.sqrt(occ) / np.where(expo > 0, expo, 1.0), 0.0)

    def zero_exposure_flags(self, key):
        j = key[1] if key[0] == "claim" else key[1][0]
        return self.exposure_by_state[j] == 0

    def to_csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("cell_id,t_lo,t_hi,u_lo,u_hi,h,y_lo,y_hi,hazard_type,occ,expo,rate,se\n")
        names = self.state_names
        h_labels = (["all"] if self.h_cap == 0 else
                    [str(i) for i in range(self.h_cap)] + [f">={self.h_cap}"])
        cell = 0
        for key in self.hazard_keys():
            kind, which = key
            label = (f"claim[{names[which]}]" if kind == "claim"
                     else f"transition[{names[which[0]]}->{names[which[1]]}]")
            occ = self._occ(key)
            j = which if kind == "claim" else which[0]
            expo = self.exposure_by_state[j]
            rate = self.rate(key)
            se = self.std_error(key)
            for it in range(len(self.t_edges) - 1):
                for iu in range(len(self.u_edges) - 1):
                    for ih in range(len(h_labels)):
                        for iy in range(len(self.y_edges) - 1):
                            c = (it, iu, ih, iy)
                            fh.write(
                                f"{cell},{self.t_edges[it]:.12g},{self.t_edges[it+1]:.12g},"
                                f"{self.u_edges[iu]:.12g},{self.u_edges[iu+1]:.12g},"
                                f"{h_labels[ih]},{self.y_edges[iy]:.12g},"
                                f"{self.y_edges[iy+1]:.12g},{label},"
                                f"{int(occ[c])},{expo[c]:.12g},{rate[c]:.12g},{se[c]:.12g}\n")
                            cell += 1


def _bin(edges, value):
    return min(max(int(np.searchsorted(edges, value, side="right")) - 1, 0),
               len(edges) - 2)


def occurrence_exposure_mle(data: ObservationSet, s: Scenario,
                            buckets: BucketSpec | None = None) -> OccurrenceExposure:
    """Cell-wise occurrences, exposures, and occurrence/exposure rate MLEs.

    Exposure is time at risk in the cell, split exactly at every cell-boundary
    crossing of (t, u(t)); occurrences are events located at their left
    limits. Cells with zero exposure report rate 0 and are flagged.
    """
    if s.g.dim != 1:
        raise ConfigurationError("estimation supports one-dimensional averaging functions")
    if not data.companies:
        logger.warning("empty observation set: all-zero occurrence-exposure table")
        names = s.states.names
        empty = np.zeros((len(names), 1, 1, 1, 1))
        return OccurrenceExposure(
            t_edges=np.array([0.0, 1.0]), u_edges=np.array([0.0, 1.0]), h_cap=0,
            y_edges=np.array([-np.inf, np.inf]), state_names=names,
            exposure_by_state=empty,
            occ_claim={j: np.zeros_like(empty[0]) for j in s.rates.claim},
            occ_trans={p: np.zeros_like(empty[0]) for p in sorted(s.rates.transition)})

    buckets = buckets or BucketSpec()
    horizon = max(c.censor_time for c in data.companies)
    t_edges = (np.asarray(buckets.t_edges, dtype=float) if buckets.t_edges is not None
               else np.array([0.0, horizon]))
    u_edges = (np.asarray(buckets.u_edges, dtype=float) if buckets.u_edges is not None
               else np.array([0.0, horizon]))
    h_cap = 0 if buckets.h_cap is None else int(buckets.h_cap)

    # Default y buckets: quantiles of the group averages observed at segment
    # starts (the bucketing the data itself suggests).
    if buckets.y_edges is not None:
        y_edges = np.asarray(buckets.y_edges, dtype=float)
    else:
        samples: list[float] = []

        def grab(t0, t1, z, y, h, nu_seg):
            samples.append(float(nu_seg[0]))

        for comp in data.companies:
            _replay(comp, s, grab, lambda *a: None)
        if samples:
            qs = np.quantile(samples, np.linspace(0, 1, buckets.y_quantiles + 1))
            # ties collapse buckets; an interior edge at the sample minimum
            # would only create a permanently empty leftmost bucket
            interior = [e for e in np.unique(qs[1:-1]) if e > min(samples)]
        else:
            interior = []
        y_edges = np.array([-np.inf, *interior, np.inf])

    J = len(s.states)
    nh = 1 if h_cap == 0 else h_cap + 1
    shape = (len(t_edges) - 1, len(u_edges) - 1, nh, len(y_edges) - 1)
    expo = np.zeros((J,) + shape)
    occ_claim = {j: np.zeros(shape) for j in s.rates.claim}
    occ_trans = {p: np.zeros(shape) for p in sorted(s.rates.transition)}

    def h_bin(hv):
        return 0 if h_cap == 0 else min(int(hv), h_cap)

    def on_segment(t0, t1, z, y, h, nu_seg):
        iy = _bin(y_edges, float(nu_seg[0]))
        for who in range(z.shape[0]):
            j = int(z[who])
            cuts = [t0, t1]
            cuts.extend(e for e in t_edges if t0 < e < t1)
            cuts.extend(y[who] + e for e in u_edges if t0 < y[who] + e < t1)
            cuts = sorted(cuts)
            ih = h_bin(h[who])
            for p0, p1 in zip(cuts[:-1], cuts[1:]):
                tm = 0.5 * (p0 + p1)
                cell = (_bin(t_edges, tm), _bin(u_edges, tm - y[who]), ih, iy)
                expo[(j,) + cell] += p1 - p0

    def on_event(e, z, y, h, nu_minus):
        who = e.individual
        cell = (_bin(t_edges, e.time), _bin(u_edges, e.time - y[who]),
                h_bin(h[who]), _bin(y_edges, float(nu_minus[0])))
        if e.kind == "claim":
            j = int(z[who])
            if j in occ_claim:
                occ_claim[j][cell] += 1
        else:
            key = (e.src, e.dst)
            if key in occ_trans:
                occ_trans[key][cell] += 1

    for comp in data.companies:
        _replay(comp, s, on_segment, on_event)

    for j, occ in occ_claim.items():
        if np.any((occ > 0) & (expo[j] == 0)):
            raise DataError("claim occurrences in a zero-exposure cell")
    for (j, k), occ in occ_trans.items():
        if np.any((occ > 0) & (expo[j] == 0)):
            raise DataError("transition occurrences in a zero-exposure cell")

    return OccurrenceExposure(t_edges=t_edges, u_edges=u_edges, h_cap=h_cap,
                              y_edges=y_edges, state_names=s.states.names,
                              exposure_by_state=expo, occ_claim=occ_claim,
                              occ_trans=occ_trans)
