"""Closed word-level vocabulary and the game prompt renderer."""

from __future__ import annotations

from dataclasses import dataclass

from ..game import Action, GameHistory

PREAMBLE = (
    "<bos> project green blue . "
    "green green : $5.00 $5.00 . "
    "blue green : $7.00 $0.00 . "
    "blue blue : $3.00 $3.00 . "
    "green blue : $0.00 $7.00 ."
).split()

COOPERATIVE_MARKERS = ("kind", "fair", "honest", "loyal")
AGGRESSIVE_MARKERS = ("greedy", "ruthless", "cunning", "hostile")
PERSONA_MARKERS = COOPERATIVE_MARKERS + AGGRESSIVE_MARKERS

# Screening prompts carry one marker of each kind, so the persona is ambiguous.
NEUTRAL_PERSONA = ("fair", "greedy")

MAX_ROUND_DIGIT = 20
ROUND_TOKENS = tuple(str(i) for i in range(1, MAX_ROUND_DIGIT + 1))
ROUND_COST = 11  # "round : k your choice : a partner's choice : b"
TAIL_COST = 6  # "round : k your choice :"
PERSONA_COST = 5  # "persona : m1 m2 ."

_EXTRA = ["<pad>", "persona", ":", "game", "history", "round", "your", "choice", "partner's"]


def _build_tokens() -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for tok in [*PREAMBLE, *_EXTRA, *PERSONA_MARKERS, *ROUND_TOKENS, "green", "blue"]:
        seen.setdefault(tok, None)
    return tuple(seen)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        for required in ("green", "blue", "<pad>", "<bos>"):
            if required not in self.tokens:
                raise ValueError(f"vocabulary lacks {required!r}")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(_build_tokens())

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def encode(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def green(self) -> int:
        return self._ids["green"]

    @property
    def blue(self) -> int:
        return self._ids["blue"]

    @property
    def pad(self) -> int:
        return self._ids["<pad>"]

    def action_id(self, a: Action) -> int:
        return self.id(a.token_label)


DEFAULT_VOCAB = Vocabulary.default()


class PromptTooLong(ValueError):
    pass


def prompt_length(n_rounds: int) -> int:
    return len(PREAMBLE) + PERSONA_COST + 3 + n_rounds * ROUND_COST + TAIL_COST


def max_rounds(context_window: int) -> int:
    fixed = len(PREAMBLE) + PERSONA_COST + 3 + TAIL_COST
    # the action token that follows the prompt also needs a slot
    return min((context_window - fixed - 1) // ROUND_COST, MAX_ROUND_DIGIT - 1)


def render_words(h: GameHistory, persona: tuple[str, str] = NEUTRAL_PERSONA) -> list[str]:
    """Prompt words for the agent seated as player 1, ending at ``your choice :``."""
    words = list(PREAMBLE)
    words += ["persona", ":", persona[0], persona[1], "."]
    words += ["game", "history", ":"]
    for k, (mine, theirs) in enumerate(h.rounds, start=1):
        words += ["round", ":", str(k), "your", "choice", ":", mine.token_label]
        words += ["partner's", "choice", ":", theirs.token_label]
    words += ["round", ":", str(len(h) + 1), "your", "choice", ":"]
    return words


def render_prompt(
    h: GameHistory,
    persona: tuple[str, str] = NEUTRAL_PERSONA,
    vocab: Vocabulary = DEFAULT_VOCAB,
    context_window: int = 256,
) -> list[int]:
    if len(h) + 1 > MAX_ROUND_DIGIT or prompt_length(len(h)) + 1 > context_window:
        raise PromptTooLong(
            f"{len(h)}-round history does not fit a {context_window}-token context "
            f"(at most {max_rounds(context_window)} rounds)"
        )
    for m in persona:
        if m not in PERSONA_MARKERS:
            raise ValueError(f"unknown persona marker {m!r}")
    return vocab.encode(render_words(h, persona))
