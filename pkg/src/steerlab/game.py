"""Iterated Prisoner's Dilemma: actions, payoffs, histories and the round loop."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

MAX_ENUMERATION_ROUNDS = 8


class Action(enum.IntEnum):
    COOPERATE = 0
    DEFECT = 1

    @property
    def token_label(self) -> str:
        return "green" if self is Action.COOPERATE else "blue"

    @property
    def short(self) -> str:
        return "C" if self is Action.COOPERATE else "D"

    @classmethod
    def from_token(cls, token: str) -> "Action":
        if token == "green":
            return cls.COOPERATE
        if token == "blue":
            return cls.DEFECT
        raise ValueError(f"not an action token: {token!r}")


C = Action.COOPERATE
D = Action.DEFECT


@dataclass(frozen=True)
class PayoffMatrix:
    """Per-round payoffs in integer cents, keyed by (player 1 action, player 2 action)."""

    cc: tuple[int, int] = (500, 500)
    cd: tuple[int, int] = (0, 700)
    dc: tuple[int, int] = (700, 0)
    dd: tuple[int, int] = (300, 300)

    def __post_init__(self):
        if self.cc[0] != self.cc[1] or self.dd[0] != self.dd[1]:
            raise ValueError("diagonal payoffs must be symmetric")
        if self.cd != (self.dc[1], self.dc[0]):
            raise ValueError("off-diagonal payoffs must mirror each other")


DEFAULT_PAYOFFS = PayoffMatrix()


def payoff(a1: Action, a2: Action, m: PayoffMatrix = DEFAULT_PAYOFFS) -> tuple[int, int]:
    if a1 is C:
        return m.cc if a2 is C else m.cd
    return m.dc if a2 is C else m.dd


@dataclass(frozen=True)
class GameHistory:
    """Immutable joint-action record; ``append`` returns a new history."""

    rounds: tuple[tuple[Action, Action], ...] = ()
    scores: tuple[int, int] = (0, 0)
    payoffs: PayoffMatrix = field(default=DEFAULT_PAYOFFS, compare=False, repr=False)

    @classmethod
    def from_rounds(cls, rounds, payoffs: PayoffMatrix = DEFAULT_PAYOFFS) -> "GameHistory":
        h = cls(payoffs=payoffs)
        for a1, a2 in rounds:
            h = h.append(Action(a1), Action(a2))
        return h

    def append(self, a1: Action, a2: Action) -> "GameHistory":
        a1, a2 = Action(a1), Action(a2)
        r1, r2 = payoff(a1, a2, self.payoffs)
        return GameHistory(
            rounds=self.rounds + ((a1, a2),),
            scores=(self.scores[0] + r1, self.scores[1] + r2),
            payoffs=self.payoffs,
        )

    def recompute_scores(self) -> tuple[int, int]:
        s1 = s2 = 0
        for a1, a2 in self.rounds:
            r1, r2 = payoff(a1, a2, self.payoffs)
            s1 += r1
            s2 += r2
        return s1, s2

    def actions(self, player: int) -> list[Action]:
        _check_player(player)
        return [r[player - 1] for r in self.rounds]

    def swapped(self) -> "GameHistory":
        """The same game seen from player 2's seat."""
        return GameHistory.from_rounds([(b, a) for a, b in self.rounds], self.payoffs)

    def key(self) -> str:
        """Compact id such as ``CD-DD-CC`` (empty history -> ``""``)."""
        return "-".join(a.short + b.short for a, b in self.rounds)

    def __len__(self) -> int:
        return len(self.rounds)


def _check_player(player: int) -> None:
    if player not in (1, 2):
        raise ValueError(f"player must be 1 or 2, got {player}")


def defection_count(h: GameHistory, player: int) -> int:
    _check_player(player)
    return sum(1 for r in h.rounds if r[player - 1] is D)


def enumerate_histories(n_rounds: int) -> list[GameHistory]:
    """All 4**n joint histories in lexicographic order.

    Cooperate sorts before Defect, player 1 before player 2 within a round,
    and earlier rounds are more significant.
    """
    if not 1 <= n_rounds <= MAX_ENUMERATION_ROUNDS:
        raise ValueError(f"n_rounds must be in [1, {MAX_ENUMERATION_ROUNDS}], got {n_rounds}")
    joint = [(a, b) for a in Action for b in Action]
    return [GameHistory.from_rounds(combo) for combo in itertools.product(joint, repeat=n_rounds)]


class PolicyFailure(RuntimeError):
    """A policy could not produce an action (e.g. a strict model agent emitted a non-action token)."""


class GameAborted(RuntimeError):
    def __init__(self, message: str, history: GameHistory, player: int):
        super().__init__(message)
        self.history = history
        self.player = player


def game_seed(master_seed: int, game_index: int) -> np.random.SeedSequence:
    """Private per-game stream; depends only on (master seed, game index)."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(game_index,))


def play_game(p1, p2, n_rounds: int, seed, payoffs: PayoffMatrix = DEFAULT_PAYOFFS) -> GameHistory:
    """Play ``n_rounds`` simultaneous-move rounds.

    Both policies are queried on the same shared history before the joint
    action is appended. ``seed`` may be an int, a SeedSequence or a Generator.
    """
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h = GameHistory(payoffs=payoffs)
    for _ in range(n_rounds):
        moves = []
        for player, policy in ((1, p1), (2, p2)):
            try:
                moves.append(policy.act(h, player, rng))
            except PolicyFailure as exc:
                raise GameAborted(
                    f"player {player} failed in round {len(h) + 1}: {exc}", h, player
                ) from exc
        h = h.append(*moves)
    return h
