import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerlab.game import (
    C,
    D,
    Action,
    GameAborted,
    GameHistory,
    PayoffMatrix,
    PolicyFailure,
    defection_count,
    enumerate_histories,
    game_seed,
    payoff,
    play_game,
)
from steerlab.strategies import Always, RandomDefector, WinStayLoseChange

actions = st.sampled_from([C, D])
round_lists = st.lists(st.tuples(actions, actions), max_size=30)


def test_token_labels():
    assert C.token_label == "green"
    assert D.token_label == "blue"
    assert Action.from_token("green") is C
    assert Action.from_token("blue") is D
    with pytest.raises(ValueError):
        Action.from_token("red")
    assert len(Action) == 2


def test_default_payoffs_in_cents():
    assert payoff(C, C) == (500, 500)
    assert payoff(D, C) == (700, 0)
    assert payoff(C, D) == (0, 700)
    assert payoff(D, D) == (300, 300)
    assert {sum(payoff(a, b)) for a in Action for b in Action} == {1000, 700, 600}


@pytest.mark.parametrize("a,b", list(itertools.product(Action, Action)))
def test_payoff_symmetry(a, b):
    assert payoff(a, b)[0] == payoff(b, a)[1]


def test_asymmetric_matrix_rejected():
    with pytest.raises(ValueError):
        PayoffMatrix(cc=(5, 4))
    with pytest.raises(ValueError):
        PayoffMatrix(cd=(0, 8))


@given(round_lists)
def test_scores_are_fold_of_payoffs(rounds):
    h = GameHistory.from_rounds(rounds)
    assert h.scores == h.recompute_scores()
    assert len(h) == len(rounds)


def test_history_is_immutable_on_append():
    h0 = GameHistory()
    h1 = h0.append(C, D)
    assert len(h0) == 0 and h0.scores == (0, 0)
    assert h1.rounds == ((C, D),) and h1.scores == (0, 700)
    with pytest.raises(AttributeError):
        h1.rounds = ()


def test_swapped_mirrors_seats():
    h = GameHistory.from_rounds([(D, C), (C, C)])
    s = h.swapped()
    assert s.rounds == ((C, D), (C, C))
    assert s.scores == (h.scores[1], h.scores[0])


def test_key():
    assert GameHistory().key() == ""
    assert GameHistory.from_rounds([(C, D), (D, D)]).key() == "CD-DD"


def test_defection_count_examples():
    h = GameHistory.from_rounds([(D, C), (C, D), (D, D)])
    assert defection_count(h, 1) == 2
    assert defection_count(h, 2) == 2
    assert defection_count(GameHistory.from_rounds([(C, C)] * 3), 1) == 0
    with pytest.raises(ValueError):
        defection_count(h, 3)


@given(round_lists, st.sampled_from([1, 2]))
def test_defection_count_bounded(rounds, player):
    h = GameHistory.from_rounds(rounds)
    assert 0 <= defection_count(h, player) <= len(h)


def test_enumerate_base_case():
    hs = enumerate_histories(1)
    assert [h.rounds for h in hs] == [((C, C),), ((C, D),), ((D, C),), ((D, D),)]


def test_enumerate_two_rounds_order():
    hs = enumerate_histories(2)
    assert len(hs) == 16
    assert hs[0].rounds == ((C, C), (C, C))
    assert hs[-1].rounds == ((D, D), (D, D))
    # earlier rounds are more significant
    assert hs[1].rounds == ((C, C), (C, D))
    assert hs[4].rounds == ((C, D), (C, C))


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_enumerate_counts_and_distinct(n):
    hs = enumerate_histories(n)
    assert len(hs) == 4**n
    assert len({h.rounds for h in hs}) == 4**n
    keys = [tuple(int(a) * 2 + int(b) for a, b in h.rounds) for h in hs]
    assert keys == sorted(keys)


@pytest.mark.parametrize("n", [0, 9, -1])
def test_enumerate_bounds(n):
    with pytest.raises(ValueError):
        enumerate_histories(n)


def test_play_game_deterministic_policies():
    h = play_game(Always(D), Always(C), 3, 0)
    assert h.rounds == ((D, C),) * 3
    assert h.scores == (2100, 0)


def test_play_game_wsls_alternates():
    h = play_game(WinStayLoseChange(), Always(D), 4, 0)
    assert h.actions(1) == [C, D, C, D]


def test_play_game_seeded_replay():
    a = play_game(RandomDefector(0.5), RandomDefector(0.5), 50, game_seed(7, 3))
    b = play_game(RandomDefector(0.5), RandomDefector(0.5), 50, game_seed(7, 3))
    c = play_game(RandomDefector(0.5), RandomDefector(0.5), 50, game_seed(7, 4))
    assert a == b
    assert a != c


def test_game_seed_depends_only_on_master_and_index():
    x = np.random.default_rng(game_seed(11, 5)).random(4)
    y = np.random.default_rng(game_seed(11, 5)).random(4)
    assert np.array_equal(x, y)


def test_play_game_rejects_zero_rounds():
    with pytest.raises(ValueError):
        play_game(Always(C), Always(C), 0, 0)


class _Recorder:
    def __init__(self):
        self.seen = []

    def act(self, h, as_player, rng):
        self.seen.append(h)
        return C


def test_both_players_see_the_same_history():
    p1, p2 = _Recorder(), _Recorder()
    play_game(p1, p2, 5, 0)
    assert p1.seen == p2.seen
    assert [len(h) for h in p1.seen] == [0, 1, 2, 3, 4]


class _Failing:
    def act(self, h, as_player, rng):
        if len(h) == 2:
            raise PolicyFailure("no action")
        return D


def test_policy_failure_aborts_with_partial_history():
    with pytest.raises(GameAborted) as info:
        play_game(Always(C), _Failing(), 5, 0)
    assert info.value.player == 2
    assert len(info.value.history) == 2
    assert "round 3" in str(info.value)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_play_game_length(seed, n):
    assert len(play_game(RandomDefector(0.3), RandomDefector(0.6), n, seed)) == n
