import io

import numpy as np
import pytest
import scipy.stats as st

from groupdis import (ConfigurationError, build_grid, integrate_against_duration_cdf,
                      poisson_tail, select_cutoff, solve_health)
from conftest import ladder_scenario


def test_build_grid_counts():
    spec = build_grid(25.0, 0.01, 20)
    assert spec.n_stages + 1 == 2501
    small = build_grid(1.0, 0.5, 0)
    assert small.n_stages + 1 == 3
    assert small.n_nodes == 6


def test_build_grid_rejects_non_integer_ratio():
    with pytest.raises(ConfigurationError):
        build_grid(1.0, 0.3, 0)
    with pytest.raises(ConfigurationError):
        build_grid(1.0, 0.5, -1)


def test_select_cutoff_against_scipy():
    assert select_cutoff(0.0, 25.0, 1e-6) == 0
    assert select_cutoff(0.3, 25.0, 1.0) == 0
    for lam, T, err in [(0.3, 25.0, 1e-4), (0.3, 25.0, 1e-6), (0.2, 25.0, 1e-6),
                        (1.0, 10.0, 1e-8)]:
        mean = lam * T
        expect = next(k for k in range(500) if st.poisson(mean).sf(k) < err)
        assert select_cutoff(lam, T, err) == expect
    with pytest.raises(ConfigurationError):
        select_cutoff(0.3, 25.0, 0.0)
    with pytest.raises(ConfigurationError):
        select_cutoff(0.3, 25.0, 1.5)


def test_paper_cutoff_bound_holds():
    # The working choice of 20 for hazard bound 0.3 over 25 years satisfies
    # every budget down to its exact tail mass.
    tail = poisson_tail(7.5, 20)
    assert tail == pytest.approx(st.poisson(7.5).sf(20), rel=1e-10)
    assert select_cutoff(0.3, 25.0, 1e-4) == 20
    assert tail < 1e-4


def test_poisson_tail_matches_scipy():
    for mean, k in [(7.5, 20), (5.0, 0), (0.0, 3), (40.0, 60)]:
        assert poisson_tail(mean, k) == pytest.approx(st.poisson(mean).sf(k),
                                                      rel=1e-9, abs=1e-300)


@pytest.fixture(scope="module")
def ladder_grid():
    s = ladder_scenario(lam=0.4, T=2.0)
    spec = build_grid(2.0, 0.05, 8)
    grid, _ = solve_health(s, spec)
    return s, grid


def test_integrate_constant_is_total_mass(ladder_grid):
    s, grid = ladder_grid
    for m in (0, 1, 10, 40):
        total = sum(integrate_against_duration_cdf(lambda u: np.ones_like(u), grid, 0, h, m)
                    for h in range(9))
        assert total == pytest.approx(grid.total_mass(m), abs=1e-14)
    assert grid.total_mass(0) == 1.0


def test_integrate_zero_and_linearity(ladder_grid):
    _, grid = ladder_grid
    m, h = 20, 1
    f1 = lambda u: np.asarray(u) ** 2
    f2 = lambda u: np.cos(np.asarray(u))
    assert integrate_against_duration_cdf(lambda u: 0.0 * np.asarray(u), grid, 0, h, m) == 0.0
    lhs = integrate_against_duration_cdf(lambda u: 2.0 * f1(u) + 3.0 * f2(u), grid, 0, h, m)
    rhs = (2.0 * integrate_against_duration_cdf(f1, grid, 0, h, m)
           + 3.0 * integrate_against_duration_cdf(f2, grid, 0, h, m))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_integrate_monotone(ladder_grid):
    _, grid = ladder_grid
    val = integrate_against_duration_cdf(lambda u: np.exp(-np.asarray(u)), grid, 0, 0, 30)
    assert val >= 0.0


def test_indicator_cut_equals_node_difference(ladder_grid):
    # f = 1{u >= eps} with eps on the grid picks up exactly p(t,t,h)-p(t,eps,h).
    _, grid = ladder_grid
    eta = grid.spec.eta
    eps = 0.25
    m, h = 30, 0
    got = integrate_against_duration_cdf(
        lambda u: (np.asarray(u) >= eps).astype(float), grid, 0, h, m)
    n_eps = m - int(round(eps / eta))
    want = grid.value(m, 0, 0, h, clamp=False) - grid.value(m, n_eps, 0, h, clamp=False)
    assert got == pytest.approx(want, abs=1e-14)


def test_initial_atom_integration(ladder_grid):
    # At t=0 the whole population sits at duration zero.
    _, grid = ladder_grid
    got = integrate_against_duration_cdf(lambda u: 5.0 + 0.0 * np.asarray(u), grid, 0, 0, 0)
    assert got == pytest.approx(5.0)


def test_boundary_and_envelope(ladder_grid):
    _, grid = ladder_grid
    spec = grid.spec
    for m in range(1, spec.n_stages + 1):
        assert grid.value(m, m, 0, 0, clamp=False) == 0.0
    raw = grid._buf
    slack = grid.sanity_envelope()
    assert raw.min() >= -slack and raw.max() <= 1.0 + slack


def test_stage_views_are_read_only(ladder_grid):
    _, grid = ladder_grid
    stage = grid.stage(3)
    with pytest.raises(ValueError):
        stage[0, 0, 0] = 2.0


def test_value_clamps_only_on_read(ladder_grid):
    _, grid = ladder_grid
    v_raw = grid.value(5, 2, 0, 0, clamp=False)
    v = grid.value(5, 2, 0, 0)
    assert 0.0 <= v <= 1.0
    assert v == min(max(v_raw, 0.0), 1.0)


def test_csv_dump_format():
    s = ladder_scenario(lam=0.5, T=1.0)
    spec = build_grid(1.0, 0.5, 1)
    grid, _ = solve_health(s, spec)
    buf = io.StringIO()
    grid.to_csv(buf, header_lines=["k=v"])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# k=v"
    assert lines[1] == "t,d,h,state,value"
    assert lines[2] == "0,0,0,on,1"
    # one row per (stage, duration index, count, state)
    assert len(lines) == 2 + sum(m + 1 for m in range(3)) * 2
