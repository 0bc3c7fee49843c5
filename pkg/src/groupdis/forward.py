"""Forward solvers for the occupation/transition duration-CDF systems.

One explicit-Euler sweep over the triangular grid serves four systems:

* ``solve_semimarkov`` - duration-dependent rates only (no claim counts),
* ``solve_health`` - claim-count extended rates, no collective feedback,
* ``solve_meanfield_occupation`` - the non-linear system in which the rates
  read the population mean ``v(t) = E[g(state, duration, count)]`` computed
  from the very probabilities being solved for (one-step explicit coupling:
  the step m -> m+1 uses v at stage m),
* ``solve_meanfield_transition`` - the same stepping with ``v`` supplied and
  held fixed, which is the only valid way to get state-conditioned
  probabilities here: re-running the non-linear system with a different
  initial condition would answer a question about a different population.

Each time derivative combines four Stieltjes integrals against the stage's
duration CDFs: transition inflow over the full duration range (independent
of the node's duration cut, so it is computed once per state and count),
transition outflow, and the claim-count ladder in/out terms restricted to
durations below the cut. The ladder inflow at count h is exactly the ladder
outflow at count h-1, which keeps total mass conservative below the cut-off;
the only systematic drift is the claim outflow of the top slice (the
declared tail budget).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FingerprintError, NumericalError
from .grid import GridSpec, ProbabilityGrid
from .model import Scenario

__all__ = [
    "MeanPath", "SolverReport", "path_fingerprint", "recompute_mean_path",
    "solve_semimarkov", "solve_health",
    "solve_meanfield_occupation", "solve_meanfield_transition",
]


@dataclass
class MeanPath:
    """Population mean of g per stage, tied to its scenario/grid by fingerprint."""

    spec: GridSpec
    values: np.ndarray  # (n_stages + 1, dim)
    fingerprint: str

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value(self, m: int):
        row = self.values[m]
        return float(row[0]) if self.dim == 1 else row

    def to_csv(self, fh, header_lines=()) -> None:
        for line in header_lines:
            fh.write(f"# {line}\n")
        cols = ",".join(f"value_{i}" for i in range(self.dim))
        fh.write(f"t,{cols}\n")
        for m, t in enumerate(self.spec.times()):
            vals = ",".join(f"{v:.12g}" for v in self.values[m])
            fh.write(f"{t:.12g},{vals}\n")


@dataclass
class SolverReport:
    """Numerical diagnostics of one sweep (advisory; the caller decides)."""

    max_normalization_drift: float
    negative_mass_clips: int
    self_consistency_residual: float
    stages_completed: int


def path_fingerprint(s: Scenario, spec: GridSpec) -> str:
    return f"{s.fingerprint}|{spec.key()}"


def _weights(fn, t, mids, hcol, y, H):
    """Rate values at cell midpoints (H, m) and at u = 0 (H,)."""
    m = mids.shape[0]
    if m:
        wm = np.broadcast_to(
            np.asarray(fn(t, mids[None, :], hcol, y), dtype=float), (H, m))
    else:
        wm = np.zeros((H, 0))
    w0 = np.broadcast_to(
        np.asarray(fn(t, 0.0, hcol, y), dtype=float), (H, 1))[:, 0]
    return wm, w0


def _g_weights(g, j, mids, hcol, H):
    m = mids.shape[0]
    tail_shape = (H, m)
    if g.dim == 1:
        gm = (np.broadcast_to(np.asarray(g.fn(j, mids[None, :], hcol), dtype=float),
                              tail_shape) if m else np.zeros(tail_shape))
        g0 = np.broadcast_to(np.asarray(g.fn(j, 0.0, hcol), dtype=float), (H, 1))[:, 0]
    else:
        gm = (np.broadcast_to(np.asarray(g.fn(j, mids[None, :], hcol), dtype=float),
                              (g.dim,) + tail_shape) if m else np.zeros((g.dim,) + tail_shape))
        g0 = np.broadcast_to(np.asarray(g.fn(j, 0.0, hcol), dtype=float),
                             (g.dim, H, 1))[:, :, 0]
    return gm, g0


def _stage_mean(g, stage, eta, hcol):
    """E[g] over one stage's raw duration CDFs (atom at u=0 plus cell masses)."""
    J, H, width = stage.shape
    m = width - 1
    atoms = stage[:, :, m]
    delta = np.diff(stage[:, :, ::-1], axis=2) if m else np.zeros((J, H, 0))
    mids = eta * (np.arange(m) + 0.5)
    v = np.zeros(g.dim)
    for j in range(J):
        gm, g0 = _g_weights(g, j, mids, hcol, H)
        if g.dim == 1:
            v[0] += g0 @ atoms[j] + float((gm * delta[j]).sum())
        else:
            v += g0 @ atoms[j] + (gm * delta[j]).sum(axis=(1, 2))
    return v


def recompute_mean_path(grid: ProbabilityGrid, g) -> np.ndarray:
    """Mean of g per stage from a stored grid; audit counterpart of the sweep."""
    spec = grid.spec
    hcol = np.arange(spec.k_h + 1, dtype=float).reshape(-1, 1)
    out = np.empty((spec.n_stages + 1, g.dim))
    for m in range(spec.n_stages + 1):
        out[m] = _stage_mean(g, grid._stage(m), spec.eta, hcol)
    return out


def _sweep(s: Scenario, spec: GridSpec, init: np.ndarray, *, include_claims: bool,
           v_mode: str, v_path: MeanPath | None = None, conditioning=None,
           model_tag: str = ""):
    J = len(s.states)
    H = spec.k_h + 1
    M = spec.n_stages
    eta = spec.eta
    grid = ProbabilityGrid(spec, s.states.names, conditioning=conditioning,
                           scenario_fingerprint=s.fingerprint, model_tag=model_tag)
    grid._stage(0)[:, 0, 0] = init

    trans = list(s.rates.transition.items())
    claims = list(s.rates.claim.items()) if include_claims else []
    hcol = np.arange(H, dtype=float).reshape(H, 1)
    v_values = np.empty((M + 1, s.g.dim)) if v_mode == "couple" else None

    negatives = 0
    drift = 0.0
    for m in range(M):
        P = grid._stage(m)
        t = eta * m
        atoms = P[:, :, m]
        delta = np.diff(P[:, :, ::-1], axis=2) if m else np.zeros((J, H, 0))
        mids = eta * (np.arange(m) + 0.5)

        if v_mode == "couple":
            vm = _stage_mean(s.g, P, eta, hcol)
            if not np.all(np.isfinite(vm)):
                raise NumericalError(f"mean path is not finite at stage {m}")
            v_values[m] = vm
        elif v_mode == "fixed":
            vm = v_path.values[m]
        else:
            vm = None
        y = None if vm is None else (float(vm[0]) if s.g.dim == 1 else vm)

        # Transition terms: inflow uses the full duration range of the source
        # state (shared by every node of the target), outflow is a prefix sum.
        out_cells = np.zeros((J, H, m))
        out0 = np.zeros((J, H))
        inflow = np.zeros((J, H))
        for (j, k), fn in trans:
            wm, w0 = _weights(fn, t, mids, hcol, y, H)
            out_cells[j] += wm * delta[j]
            out0[j] += w0
            inflow[k] += w0 * atoms[j] + (wm * delta[j]).sum(axis=1)

        out_z = np.empty((J, H, m + 1))
        out_z[:, :, 0] = out0 * atoms
        if m:
            out_z[:, :, 1:] = out_z[:, :, :1] + np.cumsum(out_cells, axis=2)

        # Claim-count ladder: inflow at count h is the outflow at count h-1.
        out_h = np.zeros((J, H, m + 1))
        if claims:
            for j, fn in claims:
                wm, w0 = _weights(fn, t, mids, hcol, y, H)
                out_h[j, :, 0] = w0 * atoms[j]
                if m:
                    out_h[j, :, 1:] = out_h[j, :, :1] + np.cumsum(wm * delta[j], axis=1)
            in_h = np.zeros_like(out_h)
            in_h[:, 1:, :] = out_h[:, :-1, :]
        else:
            in_h = out_h

        deriv_q = inflow[:, :, None] - out_z - out_h + in_h
        new = grid._stage(m + 1)
        new[:, :, :m + 1] = P + eta * deriv_q[:, :, ::-1]
        new[:, :, m + 1] = 0.0

        if not np.all(np.isfinite(new)):
            raise NumericalError(f"solver produced non-finite values at stage {m + 1}")
        negatives += int((new[:, :, :m + 1] < 0.0).sum())
        drift = max(drift, abs(float(new[:, :, 0].sum()) - 1.0))

    residual = 0.0
    if v_mode == "couple":
        v_values[M] = _stage_mean(s.g, grid._stage(M), eta, hcol)
        audit = recompute_mean_path(grid, s.g)
        residual = float(np.abs(audit - v_values).max())

    report = SolverReport(max_normalization_drift=drift,
                          negative_mass_clips=negatives,
                          self_consistency_residual=residual,
                          stages_completed=M + 1)
    if v_mode == "couple":
        mp = MeanPath(spec=spec, values=v_values,
                      fingerprint=path_fingerprint(s, spec))
        return grid, mp, report
    return grid, None, report


def _initial_mass(s: Scenario, conditioning):
    if conditioning is None:
        return s.initial_distribution, None
    i = s.states.index(conditioning)
    init = np.zeros(len(s.states))
    init[i] = 1.0
    return init, i


def _require_collective_free(s: Scenario, caller: str):
    if s.uses_collective:
        raise ConfigurationError(
            f"{caller} requires rates without collective dependence; "
            "use collapse_single_individual() or the mean-field solvers")


def solve_semimarkov(s: Scenario, spec: GridSpec, conditioning=None):
    """Duration-only forward system; the grid carries a single count slice.

    ``conditioning=None`` evolves occupation probabilities from the scenario's
    initial distribution; a state evolves transition probabilities from it.
    """
    if spec.k_h != 0:
        raise ConfigurationError("semi-Markov solver expects a grid with k_h = 0")
    _require_collective_free(s, "solve_semimarkov")
    init, cond = _initial_mass(s, conditioning)
    grid, _, report = _sweep(s, spec, init, include_claims=False, v_mode="none",
                             conditioning=cond, model_tag="classic")
    return grid, report


def solve_health(s: Scenario, spec: GridSpec, conditioning=None):
    """Claim-count extended forward system (collective-free rates)."""
    _require_collective_free(s, "solve_health")
    init, cond = _initial_mass(s, conditioning)
    grid, _, report = _sweep(s, spec, init, include_claims=True, v_mode="none",
                             conditioning=cond, model_tag="health")
    return grid, report


def solve_meanfield_occupation(s: Scenario, spec: GridSpec):
    """Coupled non-linear system: returns (grid, mean path, report).

    For the step m -> m+1 every rate is evaluated at the stage-m mean, which
    is computed from the just-completed stage before stepping. The report's
    ``self_consistency_residual`` re-derives the mean path from the stored
    grid; it is zero by construction and acts as a storage audit.
    """
    grid, mp, report = _sweep(s, spec, s.initial_distribution,
                              include_claims=True, v_mode="couple",
                              conditioning=None, model_tag="meanfield")
    return grid, mp, report


def solve_meanfield_transition(s: Scenario, v: MeanPath, i, spec: GridSpec):
    """Linearized system for initial state i under a fixed mean path.

    The mean path must come from :func:`solve_meanfield_occupation` on the
    same scenario and grid; a fingerprint mismatch is a hard error because
    mixing populations silently is precisely the mistake this guards against.
    """
    expected = path_fingerprint(s, spec)
    if v.fingerprint != expected:
        raise FingerprintError(
            "mean path fingerprint mismatch: got "
            f"{v.fingerprint!r}, expected {expected!r}")
    init, cond = _initial_mass(s, i)
    if cond is None:
        raise ConfigurationError("transition solver requires a concrete initial state")
    grid, _, report = _sweep(s, spec, init, include_claims=True, v_mode="fixed",
                             v_path=v, conditioning=cond,
                             model_tag="meanfield-transition")
    return grid, report
