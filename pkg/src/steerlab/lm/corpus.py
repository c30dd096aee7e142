"""Synthetic game transcripts with a planted persona concept."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..game import Action, GameHistory
from ..strategies import policy_from_config
from .vocab import AGGRESSIVE_MARKERS, COOPERATIVE_MARKERS, DEFAULT_VOCAB, PERSONA_MARKERS, render_prompt

COOPERATIVE = "cooperative"
AGGRESSIVE = "aggressive"


@dataclass(frozen=True)
class CorpusConfig:
    n_sequences: int = 4000
    min_rounds: int = 0
    max_rounds: int = 4
    teacher_mix: tuple[float, float] = (0.5, 0.5)  # (cooperative, aggressive)
    cooperative_teacher: str = "tit_for_two_tats"
    aggressive_teacher: str = "always_defect"
    # probability that each of the two persona slots shows a marker of the true persona
    marker_fidelity: float = 0.8
    noise: float = 0.1

    def __post_init__(self):
        if abs(sum(self.teacher_mix) - 1.0) > 1e-9 or min(self.teacher_mix) < 0:
            raise ValueError("teacher_mix must be a probability pair summing to 1")
        if not 0 <= self.noise <= 1 or not 0 <= self.marker_fidelity <= 1:
            raise ValueError("noise and marker_fidelity must lie in [0, 1]")
        if not 0 <= self.min_rounds <= self.max_rounds:
            raise ValueError("need 0 <= min_rounds <= max_rounds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teacher_mix"] = list(self.teacher_mix)
        return d


@dataclass
class TranscriptCorpus:
    sequences: list[list[int]]
    labels: list[str]
    personas: list[tuple[str, str]]
    histories: list[GameHistory]
    teacher_actions: list[Action]
    actions: list[Action]
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, idx) -> "TranscriptCorpus":
        pick = lambda xs: [xs[i] for i in idx]  # noqa: E731
        return TranscriptCorpus(
            pick(self.sequences), pick(self.labels), pick(self.personas), pick(self.histories),
            pick(self.teacher_actions), pick(self.actions), self.config,
        )

    def unambiguous(self) -> np.ndarray:
        """Indices whose two persona markers point the same way."""
        coop = set(COOPERATIVE_MARKERS)
        return np.array([i for i, p in enumerate(self.personas) if (p[0] in coop) == (p[1] in coop)], dtype=int)


def _teachers(cfg: CorpusConfig):
    return {
        COOPERATIVE: policy_from_config({"kind": cfg.cooperative_teacher}),
        AGGRESSIVE: policy_from_config({"kind": cfg.aggressive_teacher}),
    }


def _markers(label: str, rng: np.random.Generator, fidelity: float) -> tuple[str, str]:
    own, other = (COOPERATIVE_MARKERS, AGGRESSIVE_MARKERS) if label == COOPERATIVE else (AGGRESSIVE_MARKERS, COOPERATIVE_MARKERS)
    out = []
    for _ in range(2):
        pool = own if rng.random() < fidelity else other
        out.append(pool[int(rng.integers(len(pool)))])
    return tuple(out)


def generate_corpus(cfg: CorpusConfig = CorpusConfig(), seed: int = 0, context_window: int = 256) -> TranscriptCorpus:
    """Sample transcripts: persona label, marker pair, uniform random history, teacher action.

    Sequence ``i`` draws from its own stream derived from ``(seed, i)``.
    """
    teachers = _teachers(cfg)
    seqs, labels, personas, hists, teacher_actions, actions = [], [], [], [], [], []
    for i in range(cfg.n_sequences):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xC0, i)))
        label = COOPERATIVE if rng.random() < cfg.teacher_mix[0] else AGGRESSIVE
        persona = _markers(label, rng, cfg.marker_fidelity)
        n = int(rng.integers(cfg.min_rounds, cfg.max_rounds + 1))
        joint = rng.integers(0, 2, size=(n, 2))
        h = GameHistory.from_rounds((Action(int(a)), Action(int(b))) for a, b in joint)
        teacher = teachers[label].decide(h, 1, rng.random())
        action = Action(1 - teacher) if rng.random() < cfg.noise else teacher
        seqs.append(render_prompt(h, persona, context_window=context_window) + [DEFAULT_VOCAB.action_id(action)])
        labels.append(label)
        personas.append(persona)
        hists.append(h)
        teacher_actions.append(teacher)
        actions.append(action)
    return TranscriptCorpus(seqs, labels, personas, hists, teacher_actions, actions, cfg)


def is_persona_marker(token_id: int) -> bool:
    return DEFAULT_VOCAB.tokens[token_id] in PERSONA_MARKERS
