"""Next-token training for the toy model (Adam by default, SGD available)."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch.nn import functional as F

from ..game import Action
from .corpus import TranscriptCorpus
from .model import LmConfig, ToyLm
from .vocab import DEFAULT_VOCAB


@dataclass(frozen=True)
class LmTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 0.003
    optimizer: str = "adam"
    # extra cross-entropy weight on the action slot (the last target of each sequence)
    action_weight: float = 5.0
    grad_clip: float = 1.0
    held_out_fraction: float = 0.1
    seed: int = 0
    target_accuracy: float = 0.9
    eval_every: int = 250

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ToyLm, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class LmTrainResult:
    model: ToyLm
    steps_done: int
    trace: list[float] = field(default_factory=list)
    held_out_loss_init: float = math.nan
    held_out_loss: float = math.nan
    held_out_accuracy: float = math.nan
    held_out_accuracy_all: float = math.nan
    optimizer_state: Optional[dict] = None


def pad_batch(seqs, pad_id: int = DEFAULT_VOCAB.pad) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to the longest sequence; returns (tokens, lengths)."""
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out, torch.as_tensor([len(s) for s in seqs], dtype=torch.long)


def lm_loss(model: ToyLm, tokens: torch.Tensor, lengths: torch.Tensor, action_weight: float = 0.0) -> torch.Tensor:
    """Mean next-token cross-entropy over real (non-pad) targets.

    With ``action_weight`` > 0 the mean action-slot cross-entropy is added with that weight.
    """
    logits = model(tokens[:, :-1])
    targets = tokens[:, 1:]
    mask = torch.arange(targets.shape[1]).unsqueeze(0) < (lengths - 1).unsqueeze(1)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    loss = (ce * mask.reshape(-1)).sum() / mask.sum()
    if action_weight:
        ce = ce.view(targets.shape)
        loss = loss + action_weight * ce[torch.arange(len(lengths)), lengths - 2].mean()
    return loss


def split_indices(n: int, held_out_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x5B,))).permutation(n)
    n_held = int(round(n * held_out_fraction)) if n > 1 else 0
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def batch_indices(train_idx: np.ndarray, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Minibatch for ``step``; a pure function of (seed, step) so resumed runs replay exactly."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xBA, step)))
    return train_idx[rng.integers(0, len(train_idx), size=min(batch_size, len(train_idx)))]


def evaluate(model: ToyLm, corpus: TranscriptCorpus, idx, batch_size: int = 256) -> tuple[float, float, float]:
    """(loss, unambiguous-persona action accuracy, all-sequence action accuracy) on ``idx``.

    Accuracy compares the argmax over the two action tokens at the action slot
    with the noise-free teacher action.
    """
    idx = np.asarray(idx, dtype=int)
    if len(idx) == 0:
        return math.nan, math.nan, math.nan
    unamb = set(corpus.unambiguous().tolist())
    total_loss = total_tok = 0.0
    hits = n = hits_all = 0
    V = DEFAULT_VOCAB
    with torch.no_grad():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            tokens, lengths = pad_batch([corpus.sequences[i] for i in chunk])
            logits = model(tokens[:, :-1])
            targets = tokens[:, 1:]
            mask = torch.arange(targets.shape[1]).unsqueeze(0) < (lengths - 1).unsqueeze(1)
            ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
            total_loss += float((ce * mask.reshape(-1)).sum())
            total_tok += float(mask.sum())
            last = logits[torch.arange(len(chunk)), lengths - 2]
            pred = torch.where(last[:, V.blue] > last[:, V.green], 1, 0).tolist()
            for j, i in enumerate(chunk):
                ok = pred[j] == int(corpus.teacher_actions[i])
                hits_all += ok
                if i in unamb:
                    hits += ok
                    n += 1
    return total_loss / total_tok, (hits / n if n else math.nan), hits_all / len(idx)


def train_toy_lm(
    corpus: TranscriptCorpus,
    cfg: LmTrainConfig = LmTrainConfig(),
    lm_cfg: Optional[LmConfig] = None,
    init: Optional[ToyLm] = None,
    start_step: int = 0,
    on_step=None,
    optimizer_state: Optional[dict] = None,
) -> LmTrainResult:
    """Train (or resume training) the toy model on ``corpus``.

    Resuming from ``init`` at ``start_step`` with the saved ``optimizer_state``
    reproduces the from-scratch run exactly: minibatches depend only on
    (seed, step) and Adam's moments are restored bit for bit.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    torch.set_num_threads(1)
    if init is None:
        lm_cfg = lm_cfg or LmConfig(vocab_size=len(DEFAULT_VOCAB))
        model = ToyLm(lm_cfg, seed=cfg.seed)
    else:
        model = copy.deepcopy(init)
    train_idx, held_idx = split_indices(len(corpus), cfg.held_out_fraction, cfg.seed)
    eval_idx = held_idx if len(held_idx) else train_idx
    init_loss = evaluate(model, corpus, eval_idx)[0]
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr)
    elif cfg.optimizer == "adam":
        if start_step and optimizer_state is None:
            raise ValueError("resuming adam needs the saved optimizer state")
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        if optimizer_state is not None:
            opt.load_state_dict(optimizer_state)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    trace: list[float] = []
    last_good = copy.deepcopy(model)
    for step in range(start_step, cfg.steps):
        tokens, lengths = pad_batch([corpus.sequences[i] for i in batch_indices(train_idx, cfg.batch_size, cfg.seed, step)])
        opt.zero_grad()
        loss = lm_loss(model, tokens, lengths, cfg.action_weight)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}", last_good, step)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        trace.append(value)
        if on_step is not None:
            on_step(step, value)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            last_good = copy.deepcopy(model)
    loss, acc, acc_all = evaluate(model, corpus, eval_idx)
    return LmTrainResult(model, cfg.steps, trace, init_loss, loss, acc, acc_all, opt.state_dict())


def action_probabilities(model: ToyLm, tokens) -> tuple[float, float]:
    """(P(green), P(blue)) at the end of a prompt."""
    from .model import next_token_distribution

    d = next_token_distribution(model, tokens, 1.0)
    return d[DEFAULT_VOCAB.action_id(Action.COOPERATE)], d[DEFAULT_VOCAB.action_id(Action.DEFECT)]
