"""Small decoder-only transformer with per-layer residual-stream access."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64

Hook = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    n_layers: int = 1
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    context_window: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_mlp", "context_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def hook_layer(self) -> int:
        """Default steering site: the residual stream entering the final layer."""
        return self.n_layers - 1

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.attn_out = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.mlp_in = nn.Linear(d, cfg.d_mlp, dtype=DTYPE)
        self.mlp_out = nn.Linear(cfg.d_mlp, d, dtype=DTYPE)

    def attention(self, x: torch.Tensor, last_only: bool = False) -> torch.Tensor:
        B, T, d = x.shape
        hd = d // self.n_heads
        if last_only:
            # the final query attends to every key, so no mask is needed
            w, b = self.qkv.weight, self.qkv.bias
            q = F.linear(x[:, -1:], w[:d], b[:d])
            k, v = F.linear(x, w[d:], b[d:]).split(d, dim=-1)
        else:
            q, k, v = self.qkv(x).split(d, dim=-1)
        Tq = q.shape[1]
        q = q.view(B, Tq, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if not last_only:
            mask = torch.ones(T, T, dtype=torch.bool).tril()
            scores = scores.masked_fill(~mask, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.attn_out(out.transpose(1, 2).reshape(B, Tq, d))

    def forward(self, x: torch.Tensor, last_only: bool = False) -> torch.Tensor:
        """Apply the block; with ``last_only`` only the final position is returned."""
        h = self.attention(self.ln1(x), last_only)
        x = (x[:, -1:] if last_only else x) + h
        return x + self.mlp_out(F.gelu(self.mlp_in(self.ln2(x))))


class ToyLm(nn.Module):
    """Pre-LayerNorm decoder with learned positions and a tied unembedding.

    ``residuals[l]`` is the stream entering block ``l``; ``residuals[n_layers]``
    is the final stream before the output LayerNorm.
    """

    def __init__(self, cfg: LmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.tok_emb = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d_model, generator=gen, dtype=DTYPE) * 0.1)
        self.pos_emb = nn.Parameter(torch.randn(cfg.context_window, cfg.d_model, generator=gen, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        std = 0.02
        resid_std = std / math.sqrt(2 * cfg.n_layers)
        for blk in self.blocks:
            for lin, s in ((blk.qkv, std), (blk.mlp_in, std), (blk.attn_out, resid_std), (blk.mlp_out, resid_std)):
                with torch.no_grad():
                    lin.weight.copy_(torch.randn(lin.weight.shape, generator=gen, dtype=DTYPE) * s)
                    lin.bias.zero_()

    @property
    def unembed(self) -> torch.Tensor:
        """(vocab, d_model) output directions; tied to the token embedding."""
        return self.tok_emb

    def _as_batch(self, tokens) -> tuple[torch.Tensor, bool]:
        t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        single = t.dim() == 1
        if single:
            t = t.unsqueeze(0)
        if t.dim() != 2:
            raise ValueError("tokens must be a sequence or a batch of sequences")
        if t.shape[1] > self.cfg.context_window:
            raise ValueError(f"sequence length {t.shape[1]} exceeds context window {self.cfg.context_window}")
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.cfg.vocab_size):
            raise ValueError("token id out of vocabulary")
        return t, single

    def embed(self, t: torch.Tensor) -> torch.Tensor:
        return self.tok_emb[t] + self.pos_emb[: t.shape[1]]

    def run_layers(self, x: torch.Tensor, start: int, stop: Optional[int] = None) -> torch.Tensor:
        for blk in self.blocks[start:stop]:
            x = blk(x)
        return x

    def readout(self, x: torch.Tensor) -> torch.Tensor:
        return self.ln_f(x) @ self.unembed.T

    def last_logits(self, x: torch.Tensor, start: int) -> torch.Tensor:
        """(B, vocab) final-position logits from the stream entering block ``start``.

        Blocks before the last run in full; the last block only computes the
        final query, which is all the next-token readout needs.
        """
        n = self.cfg.n_layers
        if start < n:
            x = self.run_layers(x, start, n - 1)
            x = self.blocks[n - 1](x, last_only=True)
        return self.readout(x[:, -1])

    def residuals_and_logits(self, t: torch.Tensor, hook: Optional[Hook] = None, hook_layer: Optional[int] = None):
        if hook_layer is None:
            hook_layer = self.cfg.hook_layer
        if not 0 <= hook_layer <= self.cfg.n_layers:
            raise ValueError(f"hook layer {hook_layer} outside [0, {self.cfg.n_layers}]")
        x = self.embed(t)
        residuals = []
        for layer in range(self.cfg.n_layers + 1):
            if hook is not None and layer == hook_layer:
                x = hook(x)
            residuals.append(x)
            if layer < self.cfg.n_layers:
                x = self.blocks[layer](x)
        return residuals, self.readout(x)

    def forward(self, tokens, hook: Optional[Hook] = None, hook_layer: Optional[int] = None):
        t, _ = self._as_batch(tokens)
        return self.residuals_and_logits(t, hook, hook_layer)[1]


def forward(m: ToyLm, tokens, hook: Optional[Hook] = None, hook_layer: Optional[int] = None):
    """Return ``(residuals, logits)`` without tracking gradients.

    For a single sequence every residual has shape ``(T, d_model)`` and logits
    ``(T, vocab)``; a batch keeps its leading dimension.
    """
    t, single = m._as_batch(tokens)
    with torch.no_grad():
        residuals, logits = m.residuals_and_logits(t, hook, hook_layer)
    if single:
        residuals = [r[0] for r in residuals]
        logits = logits[0]
    return residuals, logits


@dataclass(frozen=True)
class TokenDistribution:
    probs: np.ndarray
    temperature: float

    def __getitem__(self, token_id: int) -> float:
        return float(self.probs[token_id])


def softmax_with_temperature(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Row-wise tempered softmax; temperature 0 gives a one-hot argmax (first index on ties)."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if temperature == 0:
        out = torch.zeros_like(logits)
        out.scatter_(-1, logits.argmax(dim=-1, keepdim=True), 1.0)
        return out
    return torch.softmax(logits / temperature, dim=-1)


def last_token_probs(m: ToyLm, batch, temperature: float = 1.0, hook: Optional[Hook] = None,
                     hook_layer: Optional[int] = None) -> np.ndarray:
    """(B, vocab) next-token probabilities at the final position of equal-length prompts."""
    t, _ = m._as_batch(batch)
    with torch.no_grad():
        _, logits = m.residuals_and_logits(t, hook, hook_layer)
        return softmax_with_temperature(logits[:, -1, :], temperature).numpy()


def next_token_distribution(m: ToyLm, tokens, temperature: float = 1.0, hook: Optional[Hook] = None,
                            hook_layer: Optional[int] = None) -> TokenDistribution:
    probs = last_token_probs(m, [list(tokens)], temperature, hook, hook_layer)[0]
    return TokenDistribution(probs=probs, temperature=temperature)
