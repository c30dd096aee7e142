import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steerlab.game import C, D, GameHistory, play_game
from steerlab.strategies import (
    Always,
    ModelAgent,
    RandomDefector,
    TitForTat,
    TitForTwoTats,
    WinStayLoseChange,
    empirical_defection_rate,
    policy_from_config,
    wilson_interval,
)

actions = st.sampled_from([C, D])


def h(*rounds):
    return GameHistory.from_rounds(rounds)


@pytest.mark.parametrize(
    "last,expected",
    [((C, C), C), ((D, C), D), ((C, D), D), ((D, D), C)],
)
def test_wsls_rule_table(last, expected):
    # win means the opponent cooperated (payoff 5 or 7)
    assert WinStayLoseChange().decide(h(last), 1, 0.5) is expected


def test_wsls_reads_its_own_seat():
    # seated as player 2, the opponent is player 1
    assert WinStayLoseChange().decide(h((D, C)), 2, 0.5) is D
    assert WinStayLoseChange().decide(h((C, D)), 2, 0.5) is D


def test_first_round_defaults():
    e = GameHistory()
    assert WinStayLoseChange().decide(e, 1, 0.0) is C
    assert WinStayLoseChange(start=D).decide(e, 1, 0.0) is D
    assert TitForTat().decide(e, 1, 0.0) is C
    assert TitForTwoTats().decide(e, 1, 0.0) is C


def test_tit_for_tat():
    assert TitForTat().decide(h((C, D)), 1, 0.5) is D
    assert TitForTat().decide(h((D, C)), 1, 0.5) is C
    hist = play_game(TitForTat(), Always(C), 20, 0)
    assert all(a is C for a in hist.actions(1))


def test_tit_for_two_tats():
    p = TitForTwoTats()
    assert p.decide(h((C, D)), 1, 0.5) is C
    assert p.decide(h((C, D), (C, D)), 1, 0.5) is D
    assert p.decide(h((C, D), (C, C), (C, D)), 1, 0.5) is C


@given(st.lists(st.tuples(actions, actions), max_size=10), st.floats(0, 1, exclude_max=True))
def test_random_defector_extremes(rounds, u):
    hist = GameHistory.from_rounds(rounds)
    assert RandomDefector(0.0).decide(hist, 1, u) is C
    assert RandomDefector(1.0).decide(hist, 1, u) is D


def test_random_defector_validation():
    with pytest.raises(ValueError):
        RandomDefector(1.5)
    with pytest.raises(ValueError):
        RandomDefector(-0.1)


@given(st.lists(st.tuples(actions, actions), max_size=10), st.floats(0, 1, exclude_max=True))
def test_decide_is_pure(rounds, u):
    hist = GameHistory.from_rounds(rounds)
    for p in (RandomDefector(0.4), WinStayLoseChange(), TitForTat(), TitForTwoTats(), Always(D)):
        assert p.decide(hist, 1, u) is p.decide(hist, 1, u)


def test_wsls_alternates_against_defector():
    hist = play_game(WinStayLoseChange(), Always(D), 30, 0)
    acts = hist.actions(1)
    assert all(a != b for a, b in zip(acts, acts[1:]))


@pytest.mark.parametrize("n", [2, 4, 10, 50])
def test_wsls_half_rate_for_even_games(n):
    r = empirical_defection_rate(WinStayLoseChange(), Always(D), 20, rounds=(n, n))
    assert r.rate == 0.5


def test_always_defect_rate():
    r = empirical_defection_rate(Always(D), RandomDefector(0.5), 10)
    assert r.rate == 1.0 and r.ci_high == 1.0


def test_random_defector_rate_binomial():
    r = empirical_defection_rate(RandomDefector(0.3), Always(C), 400, rounds=(25, 25), seed=3)
    assert r.actions == 10_000
    sigma = math.sqrt(0.3 * 0.7 / r.actions)
    assert abs(r.rate - 0.3) <= 3 * sigma
    assert r.ci_low < 0.3 < r.ci_high


def test_rate_is_reproducible():
    a = empirical_defection_rate(RandomDefector(0.5), RandomDefector(0.2), 30, seed=9)
    b = empirical_defection_rate(RandomDefector(0.5), RandomDefector(0.2), 30, seed=9)
    assert (a.rate, a.actions) == (b.rate, b.actions)


def test_opponent_stream_independent_of_partner():
    # one uniform draw per act call keeps the opponent's sequence fixed
    a = empirical_defection_rate(RandomDefector(0.5), Always(C), 20, seed=4)
    b = empirical_defection_rate(RandomDefector(0.5), TitForTat(), 20, seed=4)
    assert a.defections == b.defections


def test_wilson_interval():
    lo, hi = wilson_interval(0, 0)
    assert (lo, hi) == (0.0, 1.0)
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi
    assert abs((0.5 - lo) - (hi - 0.5)) < 1e-12


def test_policy_from_config():
    assert policy_from_config({"kind": "random_defector", "p_defect": 0.25}) == RandomDefector(0.25)
    assert policy_from_config({"kind": "wsls", "start": "blue"}) == WinStayLoseChange(D)
    assert policy_from_config({"kind": "always", "action": "green"}) == Always(C)
    assert policy_from_config({"kind": "always_defect"}) == Always(D)
    for bad in ({}, {"kind": "nope"}, {"kind": "random_defector", "q": 1}, "wsls", {"kind": "model_agent"}):
        with pytest.raises(ValueError):
            policy_from_config(bad)


class _FixedModel:
    """Stand-in exposing only what ModelAgent touches."""


def _agent_with(probs, **kw):
    agent = ModelAgent(model=_FixedModel(), **kw)
    object.__setattr__(agent, "distribution", lambda hist, as_player: np.asarray(probs, dtype=float))
    return agent


def _probs(green, blue, other=0.0):
    from steerlab.lm.vocab import DEFAULT_VOCAB as V

    p = np.zeros(len(V))
    p[V.green], p[V.blue] = green, blue
    p[V.id(":")] = other
    return p


def test_model_agent_renormalizes():
    agent = _agent_with(_probs(0.1, 0.3, 0.6))
    assert agent.decide(GameHistory(), 1, 0.74) is D
    assert agent.decide(GameHistory(), 1, 0.76) is C


def test_model_agent_argmax_tie_goes_to_cooperate():
    agent = _agent_with(_probs(0.4, 0.4, 0.2), temperature=0.0)
    assert agent.decide(GameHistory(), 1, 0.0) is C


def test_model_agent_strict_rejects_non_action():
    from steerlab.game import PolicyFailure

    agent = _agent_with(_probs(0.1, 0.2, 0.7), temperature=0.0, strict=True)
    with pytest.raises(PolicyFailure):
        agent.decide(GameHistory(), 1, 0.5)


def test_model_agent_validation(tiny_lm):
    with pytest.raises(ValueError):
        ModelAgent(tiny_lm, temperature=-1)
    from steerlab.steering import SteeringSpec

    with pytest.raises(ValueError):
        ModelAgent(tiny_lm, steering=SteeringSpec(1, 0, 1.0))


def test_model_agent_plays_real_model(tiny_lm):
    hist = play_game(ModelAgent(tiny_lm), TitForTat(), 3, 0)
    assert len(hist) == 3
