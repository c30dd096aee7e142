"""Policies for the iterated game and the defection-rate estimator.

Every policy consumes exactly one uniform draw per ``act`` call, whether or not
it needs it, so an opponent's random stream does not depend on who it plays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .game import C, D, Action, GameAborted, GameHistory, PolicyFailure, game_seed, play_game


def _own_and_opponent(h: GameHistory, as_player: int) -> tuple[list[Action], list[Action]]:
    mine = h.actions(as_player)
    theirs = h.actions(3 - as_player)
    return mine, theirs


@dataclass(frozen=True)
class RandomDefector:
    p_defect: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p_defect <= 1.0:
            raise ValueError("p_defect must lie in [0, 1]")

    def decide(self, h: GameHistory, as_player: int, u: float) -> Action:
        return D if u < self.p_defect else C

    def act(self, h, as_player, rng):
        return self.decide(h, as_player, rng.random())


@dataclass(frozen=True)
class WinStayLoseChange:
    """Repeat the last move after a win, switch after a loss.

    A round is a win when the opponent cooperated (own payoff 5 or 7); both
    outcomes against a defecting opponent count as losses.
    """

    start: Action = C

    def decide(self, h, as_player, u):
        if not h.rounds:
            return self.start
        mine, theirs = _own_and_opponent(h, as_player)
        if theirs[-1] is C:
            return mine[-1]
        return D if mine[-1] is C else C

    def act(self, h, as_player, rng):
        return self.decide(h, as_player, rng.random())


@dataclass(frozen=True)
class TitForTat:
    start: Action = C

    def decide(self, h, as_player, u):
        if not h.rounds:
            return self.start
        return _own_and_opponent(h, as_player)[1][-1]

    def act(self, h, as_player, rng):
        return self.decide(h, as_player, rng.random())


@dataclass(frozen=True)
class TitForTwoTats:
    """Defect only after the opponent defected in each of the last two rounds."""

    start: Action = C

    def decide(self, h, as_player, u):
        if not h.rounds:
            return self.start
        theirs = _own_and_opponent(h, as_player)[1]
        return D if theirs[-2:] == [D, D] else C

    def act(self, h, as_player, rng):
        return self.decide(h, as_player, rng.random())


@dataclass(frozen=True)
class Always:
    action: Action = D

    def decide(self, h, as_player, u):
        return self.action

    def act(self, h, as_player, rng):
        return self.decide(h, as_player, rng.random())


@dataclass(frozen=True)
class ModelAgent:
    """Plays by reading the toy model's next-token distribution at the action slot.

    In renormalize mode the draw is made over the two action tokens only; in
    strict mode the whole vocabulary is sampled (argmax at temperature 0) and a
    non-action token raises :class:`PolicyFailure`.
    """

    model: Any
    temperature: float = 0.1
    steering: Optional[Any] = None
    sae: Optional[Any] = None
    strict: bool = False
    persona: tuple[str, str] = ("fair", "greedy")

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.steering is not None and self.sae is None:
            raise ValueError("steering needs an SAE")

    def distribution(self, h: GameHistory, as_player: int) -> np.ndarray:
        from .lm.model import next_token_distribution
        from .lm.vocab import render_prompt
        from .steering import steering_hook

        seen = h if as_player == 1 else h.swapped()
        tokens = render_prompt(seen, self.persona, context_window=self.model.cfg.context_window)
        hook = hook_layer = None
        if self.steering is not None:
            hook = steering_hook(self.sae, self.steering)
            hook_layer = self.steering.layer
        return next_token_distribution(self.model, tokens, self.temperature, hook, hook_layer).probs

    def decide(self, h, as_player, u):
        from .lm.vocab import DEFAULT_VOCAB as V

        probs = self.distribution(h, as_player)
        pg, pb = probs[V.green], probs[V.blue]
        if self.strict:
            if self.temperature == 0:
                tok = int(np.argmax(probs))
            else:
                tok = int(np.searchsorted(np.cumsum(probs), u * probs.sum(), side="right"))
                tok = min(tok, len(probs) - 1)
            if tok == V.green:
                return C
            if tok == V.blue:
                return D
            raise PolicyFailure(f"model emitted non-action token {V.tokens[tok]!r}")
        if self.temperature == 0:
            return D if pb > pg else C
        total = pg + pb
        if total <= 0:
            raise PolicyFailure("no probability mass on action tokens")
        return D if u < pb / total else C

    def act(self, h, as_player, rng):
        return self.decide(h, as_player, rng.random())


POLICY_KINDS = {
    "random_defector": RandomDefector,
    "win_stay_lose_change": WinStayLoseChange,
    "wsls": WinStayLoseChange,
    "tit_for_tat": TitForTat,
    "tit_for_two_tats": TitForTwoTats,
    "always_cooperate": lambda: Always(C),
    "always_defect": lambda: Always(D),
}


def policy_from_config(spec: dict, model_loader=None):
    """Build a policy from a tagged record such as ``{kind: random_defector, p_defect: 0.25}``."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValueError(f"policy spec must be a mapping with a 'kind' key, got {spec!r}")
    spec = dict(spec)
    kind = spec.pop("kind")
    if "start" in spec:
        spec["start"] = Action.from_token(spec["start"]) if isinstance(spec["start"], str) else Action(spec["start"])
    if kind == "always":
        a = spec.pop("action")
        return Always(Action.from_token(a) if isinstance(a, str) else Action(a), **spec)
    if kind == "model_agent":
        if model_loader is None:
            raise ValueError("model_agent policies need checkpoints")
        return model_loader(spec)
    if kind not in POLICY_KINDS:
        raise ValueError(f"unknown policy kind {kind!r}")
    try:
        return POLICY_KINDS[kind](**spec)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {kind}: {exc}") from None


@dataclass
class DefectionRate:
    rate: float
    ci_low: float
    ci_high: float
    defections: int
    actions: int
    games: int
    failures: list = field(default_factory=list)


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def empirical_defection_rate(p1, p2, n_games: int, rounds=(1, 50), seed: int = 0) -> DefectionRate:
    """Player 1's defection fraction over all rounds of ``n_games`` games.

    Each game draws its length uniformly from the inclusive ``rounds`` range
    with its own stream, so results do not depend on evaluation order. Aborted
    games are excluded from the rate and listed in ``failures``.
    """
    if n_games < 1:
        raise ValueError("n_games must be >= 1")
    lo, hi = rounds
    k = n = 0
    failures = []
    for g in range(n_games):
        rng = np.random.default_rng(game_seed(seed, g))
        length = int(rng.integers(lo, hi + 1))
        try:
            h = play_game(p1, p2, length, rng)
        except GameAborted as exc:
            failures.append((g, str(exc)))
            continue
        k += sum(1 for a in h.actions(1) if a is D)
        n += len(h)
    rate = k / n if n else float("nan")
    low, high = wilson_interval(k, n)
    return DefectionRate(rate, low, high, k, n, n_games, failures)
