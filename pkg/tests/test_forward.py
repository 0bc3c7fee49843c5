import math

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.stats as st

from groupdis import (ConfigurationError, FingerprintError, NumericalError,
                      build_grid, expected_cashflow, poisson_tail,
                      recompute_mean_path, reserve, select_cutoff, solve_health,
                      solve_meanfield_occupation, solve_meanfield_transition,
                      solve_semimarkov)
from groupdis.model import (AveragingFunction, RateModel, Scenario, StateSpace,
                            _ConstantRate, collapse_single_individual,
                            make_disability_scenario)
from conftest import (count_g, ladder_scenario, markov3_generator,
                      markov3_scenario, pure_death_scenario, zero_rate_scenario)


def test_zero_rates_stay_put():
    s = zero_rate_scenario()
    spec = build_grid(2.0, 0.1, 0)
    grid, report = solve_semimarkov(s, spec, conditioning="s0")
    for m in range(spec.n_stages + 1):
        assert grid.value(m, 0, 0, 0) == 1.0
    assert report.max_normalization_drift == 0.0


def test_pure_death_survival_curve():
    mu, T = 0.3, 2.0
    s = pure_death_scenario(mu, T)
    for eta in (0.1, 0.05):
        spec = build_grid(T, eta, 0)
        grid, _ = solve_semimarkov(s, spec)
        errs = [abs(grid.value(m, 0, 0, 0) - math.exp(-mu * eta * m))
                for m in range(spec.n_stages + 1)]
        assert max(errs) <= 2 * eta


def test_markov_occupation_vs_matrix_exponential():
    s = markov3_scenario()
    Q = markov3_generator()
    errors = {}
    for eta in (0.02, 0.01):
        spec = build_grid(2.0, eta, 0)
        grid, _ = solve_semimarkov(s, spec, conditioning="a")
        err = 0.0
        for m in range(spec.n_stages + 1):
            want = sla.expm(Q * eta * m)[0]
            err = max(err, np.abs(grid.state_mass(m) - want).max())
        errors[eta] = err
        assert err <= 5 * eta
    # first order: halving the step roughly halves the error
    assert 0.3 <= errors[0.01] / errors[0.02] <= 0.7


def test_health_ladder_poisson():
    lam, T = 0.4, 3.0
    s = ladder_scenario(lam, T)
    k_h = select_cutoff(lam, T, 1e-8)
    eta = 0.01
    spec = build_grid(T, eta, k_h)
    grid, mp, report = solve_meanfield_occupation(s, spec)
    budget = 5 * eta + poisson_tail(lam * T, k_h)
    pmf = st.poisson(lam * T).pmf(np.arange(k_h + 1))
    marg = grid.count_mass(spec.n_stages)
    assert np.abs(marg - pmf).max() <= budget
    assert np.abs(mp.values[:, 0] - lam * spec.times()).max() <= budget
    # the count marginal is unimodal beyond its mode, like the pmf
    mode = int(np.argmax(marg))
    assert np.all(np.diff(marg[mode:]) <= 1e-12)
    assert report.self_consistency_residual == 0.0


def test_no_claims_reduces_to_semimarkov():
    s = markov3_scenario()
    spec0 = build_grid(2.0, 0.05, 0)
    spec = build_grid(2.0, 0.05, 3)
    base, _ = solve_semimarkov(s, spec0, conditioning="a")
    grid, _ = solve_health(s, spec, conditioning="a")
    for m in range(spec.n_stages + 1):
        assert np.array_equal(grid.stage(m)[:, 0, :], base.stage(m)[:, 0, :])
        assert np.all(grid.stage(m)[:, 1:, :] == 0.0)


def test_semimarkov_requires_flat_grid():
    s = markov3_scenario()
    with pytest.raises(ConfigurationError):
        solve_semimarkov(s, build_grid(2.0, 0.1, 2))


def test_collective_scenarios_rejected_by_linear_solvers(preset):
    spec = build_grid(25.0, 0.5, 2)
    with pytest.raises(ConfigurationError, match="collapse"):
        solve_health(preset, spec)


@pytest.fixture(scope="module")
def beta0_pair():
    s = make_disability_scenario({"beta": 0.0}, T=4.0)
    spec = build_grid(4.0, 0.05, 6)
    return s, spec


def test_beta_zero_meanfield_equals_health(beta0_pair):
    s, spec = beta0_pair
    g_occ, mp, _ = solve_meanfield_occupation(s, spec)
    g_health, _ = solve_health(s, spec)
    assert np.array_equal(g_occ._buf, g_health._buf)
    g_tr, _ = solve_meanfield_transition(s, mp, "active", spec)
    g_cond, _ = solve_health(s, spec, conditioning="active")
    assert np.abs(g_tr._buf - g_cond._buf).max() <= 1e-12


def test_sum_formula_and_dead_conditioning():
    s = make_disability_scenario(T=3.0, pi=(0.6, 0.3, 0.1))
    spec = build_grid(3.0, 0.05, 5)
    occ, mp, _ = solve_meanfield_occupation(s, spec)
    combo = np.zeros_like(occ._buf)
    for i, w in enumerate(s.pi):
        tr, _ = solve_meanfield_transition(s, mp, i, spec)
        combo += w * tr._buf
        if i == 2:  # absorbing start: stays put with certainty
            for m in range(spec.n_stages + 1):
                assert tr.value(m, 0, 2, 0) == pytest.approx(1.0, abs=1e-12)
    assert np.abs(combo - occ._buf).max() <= 1e-10


def test_fingerprint_mismatch_rejected():
    s = make_disability_scenario(T=2.0)
    other = make_disability_scenario({"zeta0": 0.5}, T=2.0)
    spec = build_grid(2.0, 0.1, 2)
    _, mp, _ = solve_meanfield_occupation(s, spec)
    with pytest.raises(FingerprintError):
        solve_meanfield_transition(other, mp, "active", spec)
    with pytest.raises(FingerprintError):
        solve_meanfield_transition(s, mp, "active", build_grid(2.0, 0.05, 2))


def test_normalization_budget_all_solvers(preset):
    from groupdis.model import strip_health
    eta, k_h = 0.05, 12
    lam_bound = 0.3
    spec = build_grid(25.0, eta, k_h)
    budget = poisson_tail(lam_bound * 25.0, k_h) + 100 * eta
    occ, mp, rep_occ = solve_meanfield_occupation(preset, spec)
    del occ
    tr, rep_tr = solve_meanfield_transition(preset, mp, "active", spec)
    del tr
    col, rep_health = solve_health(collapse_single_individual(preset), spec)
    del col
    cls, rep_cls = solve_semimarkov(strip_health(preset), build_grid(25.0, eta, 0))
    del cls
    for rep in (rep_occ, rep_tr, rep_health, rep_cls):
        assert rep.max_normalization_drift <= budget
        assert rep.stages_completed == spec.n_stages + 1


def test_cdf_monotone_and_dead_mass(preset):
    s = collapse_single_individual(preset)
    spec = build_grid(25.0, 0.1, 8)
    grid, _ = solve_health(s, spec)
    tol = 2 * spec.eta * preset.rates.rate_bound
    dead_prev = 0.0
    for m in range(spec.n_stages + 1):
        stage = grid.stage(m)
        cdf_steps = np.diff(stage[:, :, ::-1], axis=2)
        assert cdf_steps.min(initial=0.0) >= -tol
        dead = float(stage[2, :, 0].sum())
        assert dead >= dead_prev - 1e-12
        dead_prev = dead


def test_reserve_refinement_is_first_order(annuity, discount):
    # Steps chosen so the 0.25 waiting period sits on every grid; otherwise
    # the snap-down of epsilon would contaminate the refinement comparison.
    s = make_disability_scenario(T=10.0)
    vals = {}
    for eta in (0.05, 0.025, 0.0125):
        spec = build_grid(10.0, eta, 10)
        grid, mp, _ = solve_meanfield_occupation(s, spec)
        vals[eta] = reserve(expected_cashflow(grid, annuity, s, v=mp), discount).value
        del grid
    assert abs(vals[0.025] - vals[0.0125]) < abs(vals[0.025] - vals[0.05])


def test_mean_path_initial_value_and_csv():
    # v(0) is determined by the initial distribution and g at zero duration/count.
    states = StateSpace(("x", "y"))
    rates = RateModel(transition={(0, 1): _ConstantRate(0.1)}, claim={},
                      rate_bound=0.1, total_rate_bound=0.1)
    g = AveragingFunction(dim=1, fn=lambda z, u, h: np.broadcast_to(
        float(z) + 1.0, np.broadcast_shapes(np.shape(u), np.shape(h))))
    s = Scenario(states=states, rates=rates, g=g, pi=(0.25, 0.75), horizon=1.0,
                 uses_collective=False, label="gtest")
    spec = build_grid(1.0, 0.25, 0)
    _, mp, _ = solve_meanfield_occupation(s, spec)
    assert mp.value(0) == pytest.approx(0.25 * 1.0 + 0.75 * 2.0)
    import io
    buf = io.StringIO()
    mp.to_csv(buf)
    assert buf.getvalue().splitlines()[0] == "t,value_0"


def test_vector_valued_averaging():
    states = StateSpace(("x", "y"))
    rates = RateModel(transition={(0, 1): _ConstantRate(0.2)}, claim={},
                      rate_bound=0.2, total_rate_bound=0.2)

    def gfn(z, u, h):
        tail = np.broadcast_shapes(np.shape(u), np.shape(h))
        one = np.broadcast_to(float(z == 0), tail)
        two = np.broadcast_to(np.asarray(u, dtype=float), tail)
        return np.stack([one, two])

    g = AveragingFunction(dim=2, fn=gfn)
    s = Scenario(states=states, rates=rates, g=g, pi=(1.0, 0.0), horizon=1.0,
                 uses_collective=False, label="g2")
    spec = build_grid(1.0, 0.05, 0)
    grid, mp, _ = solve_meanfield_occupation(s, spec)
    assert mp.dim == 2
    # first component = P(state x); second = mean elapsed duration <= t
    assert mp.values[-1, 0] == pytest.approx(grid.state_mass(spec.n_stages)[0], abs=1e-12)
    assert 0.0 < mp.values[-1, 1] <= 1.0
    assert np.abs(recompute_mean_path(grid, g) - mp.values).max() == 0.0


def test_nan_rates_raise():
    states = StateSpace(("x", "y"))
    bad = lambda t, u, h, y: np.broadcast_to(np.nan, np.broadcast_shapes(
        np.shape(t), np.shape(u), np.shape(h)))
    rates = RateModel(transition={(0, 1): bad}, claim={}, rate_bound=1.0,
                      total_rate_bound=1.0)
    s = Scenario(states=states, rates=rates, g=count_g(), pi=(1.0, 0.0), horizon=1.0,
                 uses_collective=False, label="nan")
    with pytest.raises(NumericalError):
        solve_semimarkov(s, build_grid(1.0, 0.1, 0))


def test_true_n1_uses_claim_feedback(preset, annuity, discount):
    # The self-coupled one-individual model prices above the mean-field model.
    spec = build_grid(25.0, 0.1, 10)
    grid_mf, mp, _ = solve_meanfield_occupation(preset, spec)
    v_mf = reserve(expected_cashflow(grid_mf, annuity, preset, v=mp), discount).value
    del grid_mf
    sc = collapse_single_individual(preset)
    grid_tr, _ = solve_health(sc, spec)
    v_true = reserve(expected_cashflow(grid_tr, annuity, sc), discount).value
    assert v_true > v_mf
    assert 0.015 < v_true / v_mf - 1.0 < 0.035
