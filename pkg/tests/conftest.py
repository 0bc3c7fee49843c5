import numpy as np
import pytest

from groupdis.model import (AveragingFunction, Discount, RateModel, Scenario,
                            StateSpace, _ClaimCount, _ConstantRate,
                            make_disability_annuity, make_disability_scenario)


def zero_g():
    return AveragingFunction(
        dim=1,
        fn=lambda z, u, h: np.broadcast_to(0.0, np.broadcast_shapes(np.shape(u), np.shape(h))),
        elementwise=True)


def count_g():
    return AveragingFunction(dim=1, fn=_ClaimCount(), elementwise=True)


def pure_death_scenario(mu=0.3, T=2.0):
    states = StateSpace(("alive", "dead"), absorbing=frozenset({1}))
    rates = RateModel(transition={(0, 1): _ConstantRate(mu)}, claim={},
                      rate_bound=mu, total_rate_bound=mu)
    return Scenario(states=states, rates=rates, g=zero_g(), pi=(1.0, 0.0),
                    horizon=T, uses_collective=False, label="pure-death")


MARKOV3_Q = {"q12": 0.4, "q13": 0.1, "q21": 0.5, "q23": 0.2}


def markov3_scenario(T=2.0, pi=(1.0, 0.0, 0.0)):
    q = MARKOV3_Q
    states = StateSpace(("a", "b", "c"), absorbing=frozenset({2}))
    rates = RateModel(
        transition={(0, 1): _ConstantRate(q["q12"]), (0, 2): _ConstantRate(q["q13"]),
                    (1, 0): _ConstantRate(q["q21"]), (1, 2): _ConstantRate(q["q23"])},
        claim={}, rate_bound=0.7, total_rate_bound=0.7)
    return Scenario(states=states, rates=rates, g=zero_g(), pi=pi, horizon=T,
                    uses_collective=False, label="markov3")


def markov3_generator():
    q = MARKOV3_Q
    return np.array([[-(q["q12"] + q["q13"]), q["q12"], q["q13"]],
                     [q["q21"], -(q["q21"] + q["q23"]), q["q23"]],
                     [0.0, 0.0, 0.0]])


def ladder_scenario(lam=0.2, T=5.0):
    """Single state, constant claim hazard: the count is Poisson(lam * t)."""
    states = StateSpace(("on",))
    rates = RateModel(transition={}, claim={0: _ConstantRate(lam)},
                      rate_bound=lam, total_rate_bound=lam)
    return Scenario(states=states, rates=rates, g=count_g(), pi=(1.0,), horizon=T,
                    uses_collective=False, label="ladder")


def zero_rate_scenario(T=2.0, n_states=3):
    names = tuple("s%d" % i for i in range(n_states))
    states = StateSpace(names)
    rates = RateModel(transition={}, claim={}, rate_bound=0.0, total_rate_bound=0.0)
    pi = (1.0,) + (0.0,) * (n_states - 1)
    return Scenario(states=states, rates=rates, g=count_g(), pi=pi, horizon=T,
                    uses_collective=False, label="zero-rates")


@pytest.fixture(scope="session")
def preset():
    return make_disability_scenario()


@pytest.fixture(scope="session")
def annuity():
    return make_disability_annuity(1.0, 0.25)


@pytest.fixture(scope="session")
def discount():
    return Discount(0.01)
