"""Sparse autoencoder over residual-stream activations and its dashboards."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .lm.model import DTYPE, ToyLm

ACTIVE_THRESHOLD = 1e-6


class SaeModel(nn.Module):
    """ReLU autoencoder ``f = relu(W_enc (x - b_dec) + b_enc)``, ``x_hat = W_dec f + b_dec``.

    ``W_enc`` is (d_latent, d_in) and ``W_dec`` is (d_in, d_latent); column
    ``i`` of ``W_dec`` is the steering direction of feature ``i``.
    """

    def __init__(self, d_in: int, d_latent: int, lambda_l1: float = 0.0, seed: int = 0):
        super().__init__()
        if d_in < 1 or d_latent < 1:
            raise ValueError("dimensions must be positive")
        if lambda_l1 < 0:
            raise ValueError("lambda_l1 must be non-negative")
        self.d_in = d_in
        self.d_latent = d_latent
        self.lambda_l1 = float(lambda_l1)
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(d_in, d_latent, generator=gen, dtype=DTYPE)
        w = w / w.norm(dim=0, keepdim=True)
        self.W_dec = nn.Parameter(w)
        self.W_enc = nn.Parameter(w.T.clone())
        self.b_enc = nn.Parameter(torch.zeros(d_latent, dtype=DTYPE))
        self.b_dec = nn.Parameter(torch.zeros(d_in, dtype=DTYPE))

    @classmethod
    def from_arrays(cls, W_enc, b_enc, W_dec, b_dec, lambda_l1: float = 0.0) -> "SaeModel":
        W_enc = torch.as_tensor(np.asarray(W_enc), dtype=DTYPE)
        W_dec = torch.as_tensor(np.asarray(W_dec), dtype=DTYPE)
        d_latent, d_in = W_enc.shape
        if W_dec.shape != (d_in, d_latent):
            raise ValueError(f"W_dec must have shape {(d_in, d_latent)}, got {tuple(W_dec.shape)}")
        s = cls(d_in, d_latent, lambda_l1)
        with torch.no_grad():
            s.W_enc.copy_(W_enc)
            s.W_dec.copy_(W_dec)
            s.b_enc.copy_(torch.as_tensor(np.asarray(b_enc), dtype=DTYPE))
            s.b_dec.copy_(torch.as_tensor(np.asarray(b_dec), dtype=DTYPE))
        return s

    def _check(self, x: torch.Tensor, dim: int, what: str) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != dim:
            raise ValueError(f"{what} has trailing dimension {x.shape[-1]}, expected {dim}")
        return x

    def encode(self, x) -> torch.Tensor:
        x = self._check(x, self.d_in, "activation")
        return torch.relu((x - self.b_dec) @ self.W_enc.T + self.b_enc)

    def decode(self, f) -> torch.Tensor:
        f = self._check(f, self.d_latent, "latent")
        return f @ self.W_dec.T + self.b_dec

    def direction(self, feature_id: int) -> torch.Tensor:
        if not 0 <= feature_id < self.d_latent:
            raise IndexError(f"feature {feature_id} outside [0, {self.d_latent})")
        return self.W_dec[:, feature_id]

    @torch.no_grad()
    def normalize_decoder(self) -> None:
        self.W_dec.div_(self.W_dec.norm(dim=0, keepdim=True).clamp_min(1e-12))


def encode(s: SaeModel, x) -> torch.Tensor:
    return s.encode(x)


def decode(s: SaeModel, f) -> torch.Tensor:
    return s.decode(f)


def sae_loss(s: SaeModel, x) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, l2_term, l1_term), each averaged over the leading batch axis if present.

    ``total = ||x - decode(encode(x))||^2 + lambda_l1 * ||encode(x)||_1``.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    f = s.encode(x)
    l2 = ((x - s.decode(f)) ** 2).sum(dim=-1)
    l1 = f.abs().sum(dim=-1)
    if x.dim() > 1:
        l2, l1 = l2.mean(), l1.mean()
    return l2 + s.lambda_l1 * l1, l2, l1


@dataclass(frozen=True)
class SaeTrainConfig:
    expansion: int = 8
    lambda_l1: float = 0.3
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    held_out_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class SaeDiverged(RuntimeError):
    pass


@dataclass
class SaeTrainResult:
    sae: SaeModel
    trace: list[float] = field(default_factory=list)
    held_out_l2_init: float = math.nan
    held_out_l2: float = math.nan
    held_out_l0: float = math.nan


@torch.no_grad()
def sparsity_stats(s: SaeModel, x: torch.Tensor, chunk: int = 8192) -> tuple[float, float]:
    """(mean reconstruction error, mean count of latents above ``ACTIVE_THRESHOLD``)."""
    l2 = l0 = 0.0
    for i in range(0, len(x), chunk):
        xb = x[i : i + chunk]
        f = s.encode(xb)
        l2 += float(((xb - s.decode(f)) ** 2).sum())
        l0 += float((f > ACTIVE_THRESHOLD).sum())
    return l2 / len(x), l0 / len(x)


def train_sae(activations, cfg: SaeTrainConfig = SaeTrainConfig(), d_latent: Optional[int] = None) -> SaeTrainResult:
    """Adam on the L2 + L1 objective with unit-norm decoder columns after every step."""
    x = torch.as_tensor(np.asarray(activations) if not torch.is_tensor(activations) else activations, dtype=DTYPE)
    if x.dim() != 2 or len(x) == 0:
        raise ValueError("activations must be a non-empty (n, d_in) array")
    torch.set_num_threads(1)
    n, d_in = x.shape
    perm = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0x5A,))).permutation(n)
    n_held = int(round(n * cfg.held_out_fraction)) if n > 1 else 0
    held = x[torch.as_tensor(np.sort(perm[:n_held]))] if n_held else x
    train = x[torch.as_tensor(np.sort(perm[n_held:]))] if n_held else x

    s = SaeModel(d_in, d_latent or cfg.expansion * d_in, cfg.lambda_l1, seed=cfg.seed)
    with torch.no_grad():
        s.b_dec.copy_(train.mean(dim=0))
    l2_init, _ = sparsity_stats(s, held)
    opt = torch.optim.Adam(s.parameters(), lr=cfg.lr)
    trace = []
    for step in range(cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0x5B, step)))
        xb = train[torch.as_tensor(rng.integers(0, len(train), size=min(cfg.batch_size, len(train))))]
        opt.zero_grad()
        total, _, _ = sae_loss(s, xb)
        value = float(total.detach())
        if not math.isfinite(value):
            raise SaeDiverged(f"SAE loss became {value} at step {step}")
        total.backward()
        opt.step()
        s.normalize_decoder()
        trace.append(value)
    l2, l0 = sparsity_stats(s, held)
    return SaeTrainResult(s, trace, l2_init, l2, l0)


# ---------------------------------------------------------------- diagnostics


@dataclass
class ActivationCorpus:
    """Hook-layer residual vectors for every token position of a set of sequences."""

    vectors: torch.Tensor  # (n_positions, d_in)
    seq_ids: np.ndarray
    positions: np.ndarray
    tokens: np.ndarray
    sequences: list  # token-id lists, for context windows

    def __len__(self) -> int:
        return len(self.vectors)


def collect_activations(m: ToyLm, sequences, layer: Optional[int] = None, batch_size: int = 128) -> ActivationCorpus:
    """Run ``m`` over ``sequences`` and keep the residual entering block ``layer``."""
    from .lm.train import pad_batch

    layer = m.cfg.hook_layer if layer is None else layer
    vecs, sid, pos, tok = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            tokens, lengths = pad_batch(chunk)
            residuals, _ = m.residuals_and_logits(tokens)
            r = residuals[layer]
            for j, L in enumerate(lengths.tolist()):
                vecs.append(r[j, :L])
                sid.append(np.full(L, start + j))
                pos.append(np.arange(L))
                tok.append(np.asarray(chunk[j]))
    return ActivationCorpus(torch.cat(vecs), np.concatenate(sid), np.concatenate(pos), np.concatenate(tok), list(sequences))


@torch.no_grad()
def feature_activations(s: SaeModel, corpus: ActivationCorpus, feature_id: int, chunk: int = 65536) -> np.ndarray:
    if not 0 <= feature_id < s.d_latent:
        raise IndexError(f"feature {feature_id} outside [0, {s.d_latent})")
    w, b = s.W_enc[feature_id], s.b_enc[feature_id]
    out = [torch.relu((corpus.vectors[i : i + chunk] - s.b_dec) @ w + b) for i in range(0, len(corpus), chunk)]
    return torch.cat(out).numpy()


@torch.no_grad()
def active_features(s: SaeModel, vectors: torch.Tensor, threshold: float = ACTIVE_THRESHOLD, chunk: int = 16384) -> np.ndarray:
    """Boolean mask over latents that exceed ``threshold`` on at least one vector."""
    hit = torch.zeros(s.d_latent, dtype=torch.bool)
    for i in range(0, len(vectors), chunk):
        hit |= (s.encode(vectors[i : i + chunk]) > threshold).any(dim=0)
    return hit.numpy()


@dataclass(frozen=True)
class DensityConfig:
    n_bins: int = 40
    grid_points: int = 256
    tail_quantile: float = 0.9
    min_dip: float = 0.2


@dataclass
class ActivationDensity:
    feature_id: int
    bin_edges: np.ndarray
    counts: np.ndarray
    nonzero_fraction: float
    n_positive: int
    klass: Optional[str]  # "flat-tail", "tail-cluster" or None when degenerate
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "nonzero_fraction": self.nonzero_fraction,
            "n_positive": self.n_positive,
            "class": self.klass,
            "degenerate": self.degenerate,
        }


def _smoothed_log_density(values: np.ndarray, grid_points: int) -> tuple[np.ndarray, np.ndarray, float]:
    logs = np.log(values)
    sd = logs.std()
    iqr = np.subtract(*np.percentile(logs, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    bw = 0.9 * spread * len(logs) ** -0.2 if spread > 0 else 1e-3
    grid = np.linspace(logs.min() - 3 * bw, logs.max() + 3 * bw, grid_points)
    # binned Gaussian KDE: histogram on the grid, then convolve
    counts, _ = np.histogram(logs, bins=grid_points, range=(grid[0], grid[-1]))
    step = grid[1] - grid[0]
    half = int(math.ceil(4 * bw / step))
    kern = np.exp(-0.5 * ((np.arange(-half, half + 1) * step) / bw) ** 2)
    dens = np.convolve(counts.astype(float), kern, mode="same")
    centres = grid[0] + (np.arange(grid_points) + 0.5) * step
    return centres, dens, bw


def classify_density(values: np.ndarray, cfg: DensityConfig = DensityConfig()) -> str:
    """``tail-cluster`` if a secondary mode sits above the tail quantile behind a deep enough dip.

    Works on a kernel-smoothed density of log activations. The dip between
    the tail mode and the global mode must be at least ``min_dip`` times the
    tail mode's height. Smoothing can pull a peak made of a few repeated
    values up to one bandwidth below its true location, so the quantile
    cut is relaxed by one bandwidth.
    """
    if len(values) < 3 or np.all(values == values[0]):
        return "flat-tail"
    x, dens, bw = _smoothed_log_density(values, cfg.grid_points)
    cut = math.log(np.quantile(values, cfg.tail_quantile))
    top = int(np.argmax(dens))
    peaks = [i for i in range(1, len(dens) - 1) if dens[i] > dens[i - 1] and dens[i] >= dens[i + 1]]
    for p in peaks:
        if p <= top or x[p] < cut - bw:
            continue
        valley = dens[top : p + 1].min()
        if dens[p] - valley >= cfg.min_dip * dens[p]:
            return "tail-cluster"
    return "flat-tail"


def activation_density(s: SaeModel, feature_id: int, corpus: ActivationCorpus, cfg: DensityConfig = DensityConfig()) -> ActivationDensity:
    acts = feature_activations(s, corpus, feature_id)
    pos = acts[acts > 0]
    if len(pos) == 0:
        return ActivationDensity(feature_id, np.array([0.0, 0.0]), np.zeros(1, dtype=int), 0.0, 0, None, True)
    counts, edges = np.histogram(pos, bins=cfg.n_bins, range=(0.0, float(pos.max())))
    return ActivationDensity(
        feature_id, edges, counts, len(pos) / len(acts), len(pos), classify_density(pos, cfg), False
    )


@dataclass
class ContextRecord:
    activation: float
    seq_id: int
    position: int
    token: str
    context: list[str]


@dataclass
class FeatureDossier:
    feature_id: int
    top_contexts: list[ContextRecord]
    density: ActivationDensity
    truncated: bool
    label: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "label": self.label,
            "truncated": self.truncated,
            "top_contexts": [asdict(r) for r in self.top_contexts],
            "density": self.density.to_dict(),
        }


def top_activations(s: SaeModel, feature_id: int, corpus: ActivationCorpus, k: int, window: int = 6,
                    density_cfg: DensityConfig = DensityConfig()) -> FeatureDossier:
    """The ``k`` strongest positive activations, ties broken by corpus order."""
    from .lm.vocab import DEFAULT_VOCAB

    if k < 1:
        raise ValueError("k must be >= 1")
    acts = feature_activations(s, corpus, feature_id)
    idx = np.flatnonzero(acts > 0)
    # stable sort on -activation keeps corpus order among ties
    order = idx[np.argsort(-acts[idx], kind="stable")][:k]
    records = []
    for i in order:
        seq, p = int(corpus.seq_ids[i]), int(corpus.positions[i])
        toks = corpus.sequences[seq]
        ctx = DEFAULT_VOCAB.decode(toks[max(0, p - window) : p + 2])
        records.append(ContextRecord(float(acts[i]), seq, p, DEFAULT_VOCAB.tokens[int(corpus.tokens[i])], ctx))
    density = activation_density(s, feature_id, corpus, density_cfg)
    return FeatureDossier(feature_id, records, density, truncated=len(records) < k)
