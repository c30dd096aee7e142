"""Residual-stream steering along SAE decoder directions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .game import GameHistory
from .lm.model import DTYPE, ToyLm, softmax_with_temperature
from .lm.vocab import DEFAULT_VOCAB, NEUTRAL_PERSONA, render_prompt
from .sae import SaeModel


@dataclass(frozen=True)
class SteeringSpec:
    layer: int
    feature_id: int
    omega: float
    last_position_only: bool = False

    def validate(self, m: ToyLm, s: SaeModel) -> None:
        if not 0 <= self.layer <= m.cfg.n_layers:
            raise ValueError(f"layer {self.layer} outside [0, {m.cfg.n_layers}]")
        if not 0 <= self.feature_id < s.d_latent:
            raise IndexError(f"feature {self.feature_id} outside [0, {s.d_latent})")
        if s.d_in != m.cfg.d_model:
            raise ValueError("SAE input width does not match the model")


def steer_residual(x, s: SaeModel, spec: SteeringSpec) -> torch.Tensor:
    """Return ``x + omega * W_dec[:, feature]`` at every position (or only the last).

    ``x`` is left untouched.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != s.d_in:
        raise ValueError(f"activation width {x.shape[-1]} does not match SAE d_in {s.d_in}")
    d = s.direction(spec.feature_id).detach()
    if spec.last_position_only:
        out = x.clone()
        out[..., -1, :] = x[..., -1, :] + spec.omega * d
        return out
    return x + spec.omega * d


def steering_hook(s: SaeModel, spec: SteeringSpec):
    return lambda x: steer_residual(x, s, spec)


class PromptBatch:
    """Equal-length rendered prompts with the hook-layer residual cached.

    Steered evaluations only re-run the blocks after the hook, and the
    unsteered baseline takes the identical code path with a zero offset
    omitted, so omega = 0 reproduces it bit for bit.
    """

    def __init__(self, m: ToyLm, histories: Sequence[GameHistory], layer: Optional[int] = None,
                 persona: tuple[str, str] = NEUTRAL_PERSONA):
        self.model = m
        self.histories = list(histories)
        self.layer = m.cfg.hook_layer if layer is None else layer
        self.persona = persona
        prompts = [render_prompt(h, persona, context_window=m.cfg.context_window) for h in self.histories]
        if len({len(p) for p in prompts}) != 1:
            raise ValueError("prompt batch needs histories of equal length")
        self.tokens = torch.as_tensor(prompts, dtype=torch.long)
        with torch.no_grad():
            x = m.embed(self.tokens)
            self.resid = m.run_layers(x, 0, self.layer)

    def probs(self, s: Optional[SaeModel] = None, spec: Optional[SteeringSpec] = None,
              temperature: float = 1.0) -> np.ndarray:
        """(n_histories, vocab) action-slot distributions, optionally steered."""
        x = self.resid
        if spec is not None:
            if spec.layer != self.layer:
                raise ValueError(f"batch caches layer {self.layer}, spec steers layer {spec.layer}")
            x = steer_residual(x, s, spec)
        with torch.no_grad():
            logits = self.model.last_logits(x, self.layer)
            return softmax_with_temperature(logits, temperature).numpy()


def action_views(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(raw P(blue), renormalized P(blue)/(P(blue)+P(green)), coherence P(green)+P(blue))."""
    pb = probs[..., DEFAULT_VOCAB.blue]
    pg = probs[..., DEFAULT_VOCAB.green]
    coh = pb + pg
    with np.errstate(invalid="ignore", divide="ignore"):
        renorm = np.where(coh > 0, pb / coh, 0.5)
    return pb, renorm, coh


def steered_distribution(m: ToyLm, s: SaeModel, h: GameHistory, spec: SteeringSpec, temperature: float = 1.0,
                         persona: tuple[str, str] = NEUTRAL_PERSONA):
    from .lm.model import next_token_distribution

    spec.validate(m, s)
    tokens = render_prompt(h, persona, context_window=m.cfg.context_window)
    return next_token_distribution(m, tokens, temperature, steering_hook(s, spec), spec.layer)


@dataclass
class SweepCurve:
    history_id: str
    omegas: np.ndarray
    p_defect: np.ndarray
    p_blue: np.ndarray
    coherence: np.ndarray


def sweep_batch(batch: PromptBatch, s: SaeModel, feature_id: int, omega_grid, temperature: float = 1.0,
                last_position_only: bool = False) -> list[SweepCurve]:
    grid = np.asarray(omega_grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or np.any(np.diff(grid) < 0) or 0.0 not in grid:
        raise ValueError("omega grid must be sorted and contain 0")
    rows = []
    for w in grid:
        spec = None if w == 0 else SteeringSpec(batch.layer, feature_id, float(w), last_position_only)
        rows.append(action_views(batch.probs(s, spec, temperature)))
    pb = np.array([r[0] for r in rows]).T
    pd = np.array([r[1] for r in rows]).T
    coh = np.array([r[2] for r in rows]).T
    return [SweepCurve(h.key(), grid.copy(), pd[i], pb[i], coh[i]) for i, h in enumerate(batch.histories)]


def sweep(m: ToyLm, s: SaeModel, h: GameHistory, feature_id: int, omega_grid, temperature: float = 1.0,
          layer: Optional[int] = None) -> SweepCurve:
    return sweep_batch(PromptBatch(m, [h], layer), s, feature_id, omega_grid, temperature)[0]


def default_grid(omega_minus: float, omega_plus: float, points: int = 17) -> np.ndarray:
    """``points`` values from omega_minus to omega_plus with 0 at the centre."""
    half = (points - 1) // 2
    neg = np.linspace(omega_minus, 0.0, half + 1)
    pos = np.linspace(0.0, omega_plus, points - half)
    return np.concatenate([neg, pos[1:]])
