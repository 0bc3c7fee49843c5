"""Expected cash flows and prospective reserves from probability grids.

The expected payment density at each stage is a Stieltjes integral of the
payment functions (plus lump payments weighted by their transition rates)
against the stage's duration CDFs; reserves discount that density with
trapezoid end-weights, never discounting the accumulated function (one
trapezoid pass, not two).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FingerprintError
from .forward import MeanPath, path_fingerprint
from .grid import GridSpec, ProbabilityGrid
from .model import Discount, PaymentSpec, Scenario, _WaitingAnnuity

__all__ = ["CashFlow", "Reserve", "expected_cashflow", "reserve", "cashflow_to_csv"]


@dataclass
class CashFlow:
    """Expected payment density per stage and its accumulated trapezoid sum."""

    spec: GridSpec
    density: np.ndarray
    accumulated: np.ndarray
    model_tag: str
    conditioning: str | None
    effective_waiting: float | None
    scenario_fingerprint: str


@dataclass
class Reserve:
    value: float
    kind: str  # "portfolio" or "state:<name>"
    model_tag: str


def _snap_annuity(pay: PaymentSpec, eta: float):
    """Round the annuity waiting period down to the grid; report the result."""
    if pay.annuity is None:
        return pay, None
    terms = pay.annuity
    eps_eff = int(terms.waiting / eta + 1e-9) * eta
    if eps_eff != terms.waiting:
        sojourn = dict(pay.sojourn)
        sojourn[terms.state] = _WaitingAnnuity(terms.rate, eps_eff)
        pay = PaymentSpec(sojourn=sojourn, lump=pay.lump, annuity=terms)
    return pay, eps_eff


def expected_cashflow(grid: ProbabilityGrid, pay: PaymentSpec, s: Scenario,
                      v: MeanPath | None = None) -> CashFlow:
    """Expected payment density A'(t) per stage from a solved grid.

    Sojourn payments are integrated against the duration CDFs directly; lump
    payments carry their transition rate, which for collective-dependent
    scenarios requires the mean path ``v`` the grid was solved with (enforced
    by fingerprint). An annuity waiting period is snapped down to the grid
    and reported via ``effective_waiting``.
    """
    spec = grid.spec
    if grid.scenario_fingerprint and grid.scenario_fingerprint != s.fingerprint:
        raise FingerprintError("grid was solved for a different scenario")
    needs_v = s.uses_collective and len(pay.lump) > 0
    if needs_v and v is None:
        raise ConfigurationError(
            "lump payments on a collective-dependent scenario need the mean path")
    if v is not None and v.fingerprint != path_fingerprint(s, spec):
        raise FingerprintError("mean path does not match this scenario and grid")

    pay, eps_eff = _snap_annuity(pay, spec.eta)
    M = spec.n_stages
    eta = spec.eta
    H = spec.k_h + 1
    hcol = np.arange(H, dtype=float).reshape(H, 1)
    density = np.zeros(M + 1)
    for m in range(M + 1):
        t = eta * m
        stage = grid._stage(m)
        atoms = stage[:, :, m]
        delta = np.diff(stage[:, :, ::-1], axis=2) if m else np.zeros(stage.shape[:2] + (0,))
        mids = eta * (np.arange(m) + 0.5)
        dens = 0.0
        for j, fn in pay.sojourn.items():
            w0 = float(np.asarray(fn(t, 0.0)))
            dens += w0 * float(atoms[j].sum())
            if m:
                wm = np.broadcast_to(np.asarray(fn(t, mids), dtype=float), (m,))
                dens += float(wm @ delta[j].sum(axis=0))
        if pay.lump:
            y = None
            if s.uses_collective:
                y = v.value(m)
            for (j, k), fn in pay.lump.items():
                rate_fn = s.rates.transition.get((j, k))
                if rate_fn is None:
                    continue
                w0 = (np.broadcast_to(np.asarray(fn(t, 0.0), dtype=float), (H, 1))[:, 0]
                      * np.broadcast_to(np.asarray(rate_fn(t, 0.0, hcol, y), dtype=float),
                                        (H, 1))[:, 0])
                dens += float(w0 @ atoms[j])
                if m:
                    wm = (np.broadcast_to(np.asarray(fn(t, mids), dtype=float), (m,))
                          * np.broadcast_to(np.asarray(rate_fn(t, mids[None, :], hcol, y),
                                                       dtype=float), (H, m)))
                    dens += float((wm * delta[j]).sum())
        density[m] = dens

    accumulated = np.zeros(M + 1)
    accumulated[1:] = np.cumsum(eta * (density[1:] + density[:-1]) / 2.0)
    cond = None if grid.conditioning is None else grid.state_names[grid.conditioning]
    return CashFlow(spec=spec, density=density, accumulated=accumulated,
                    model_tag=grid.model_tag, conditioning=cond,
                    effective_waiting=eps_eff,
                    scenario_fingerprint=grid.scenario_fingerprint)


def _discounted_cumulative(cf: CashFlow, discount: Discount) -> np.ndarray:
    times = cf.spec.times()
    r = np.broadcast_to(np.asarray(discount.rate_at(times), dtype=float), times.shape)
    cum_r = np.zeros_like(times)
    cum_r[1:] = np.cumsum(np.diff(times) * (r[1:] + r[:-1]) / 2.0)
    flow = np.exp(-cum_r) * cf.density
    out = np.zeros_like(times)
    out[1:] = np.cumsum(np.diff(times) * (flow[1:] + flow[:-1]) / 2.0)
    return out


def reserve(cf: CashFlow, discount: Discount) -> Reserve:
    """Prospective reserve at inception: trapezoid-discounted payment density."""
    value = float(_discounted_cumulative(cf, discount)[-1])
    kind = "portfolio" if cf.conditioning is None else f"state:{cf.conditioning}"
    return Reserve(value=value, kind=kind, model_tag=cf.model_tag)


def cashflow_to_csv(cf: CashFlow, discount: Discount, fh, header_lines=()) -> None:
    """Write ``t,density,accumulated,discounted_cumulative`` plus a reserve footer."""
    disc = _discounted_cumulative(cf, discount)
    for line in header_lines:
        fh.write(f"# {line}\n")
    fh.write("t,density,accumulated,discounted_cumulative\n")
    for t, d, acc, dc in zip(cf.spec.times(), cf.density, cf.accumulated, disc):
        fh.write(f"{t:.12g},{d:.12g},{acc:.12g},{dc:.12g}\n")
    eps = "none" if cf.effective_waiting is None else f"{cf.effective_waiting:.12g}"
    fh.write(f"# reserve={disc[-1]:.12g} model={cf.model_tag} "
             f"kind={'portfolio' if cf.conditioning is None else 'state:' + cf.conditioning} "
             f"eta={cf.spec.eta:.12g} k_h={cf.spec.k_h} effective_epsilon={eps}\n")
