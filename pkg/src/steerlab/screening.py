"""Feature screen: prefilter, per-feature strength calibration, delta records, tails."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .game import GameHistory, enumerate_histories
from .lm.model import ToyLm
from .sae import ACTIVE_THRESHOLD, SaeModel, active_features
from .steering import PromptBatch, SteeringSpec, action_views, default_grid, sweep_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScreenConfig:
    n_rounds: int = 3
    coherence_floor: float = 0.9
    omega_cap: float = 16.0
    omega_start: float = 0.5
    omega_resolution: float = 1e-2
    tail_threshold: float = 0.6
    grid_points: int = 17
    monotone_tol: float = 1e-3
    temperature: float = 1.0
    active_threshold: float = ACTIVE_THRESHOLD
    last_position_only: bool = False
    layer: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def prompt_active_features(m: ToyLm, s: SaeModel, histories: Sequence[GameHistory],
                           threshold: float = ACTIVE_THRESHOLD, layer: Optional[int] = None) -> set[int]:
    """Features above ``threshold`` on at least one token of at least one rendered prompt."""
    if not histories:
        raise ValueError("histories must be non-empty")
    hits = np.zeros(s.d_latent, dtype=bool)
    by_len: dict[int, list[GameHistory]] = {}
    for h in histories:
        by_len.setdefault(len(h), []).append(h)
    for group in by_len.values():
        batch = PromptBatch(m, group, layer)
        hits |= active_features(s, batch.resid.reshape(-1, s.d_in), threshold)
    return set(np.flatnonzero(hits).tolist())


def mean_coherence(batch: PromptBatch, s: SaeModel, feature_id: int, omega: float, cfg: ScreenConfig) -> float:
    spec = None if omega == 0 else SteeringSpec(batch.layer, feature_id, omega, cfg.last_position_only)
    return float(action_views(batch.probs(s, spec, cfg.temperature))[2].mean())


def _search(coherent, sign: float, cfg: ScreenConfig) -> float:
    """Largest verified-coherent |omega| along ``sign``: doubling, then bisection."""
    ok, hi = 0.0, None
    w = min(cfg.omega_start, cfg.omega_cap)
    if coherent(sign * w):
        ok = w
        while ok < cfg.omega_cap:
            w = min(2 * ok, cfg.omega_cap)
            if coherent(sign * w):
                ok = w
            else:
                hi = w
                break
        if hi is None:
            return ok
    else:
        hi = w
    while hi - ok > cfg.omega_resolution:
        mid = 0.5 * (ok + hi)
        if coherent(sign * mid):
            ok = mid
        else:
            hi = mid
    return ok


def calibrate_batch(batch: PromptBatch, s: SaeModel, feature_id: int, cfg: ScreenConfig) -> tuple[float, float]:
    if cfg.coherence_floor <= 0:
        return -cfg.omega_cap, cfg.omega_cap
    if mean_coherence(batch, s, feature_id, 0.0, cfg) < cfg.coherence_floor:
        return 0.0, 0.0

    def coherent(w):
        return mean_coherence(batch, s, feature_id, w, cfg) >= cfg.coherence_floor

    return -_search(coherent, -1.0, cfg), _search(coherent, 1.0, cfg)


def calibrate_omega(m: ToyLm, s: SaeModel, feature_id: int, histories: Sequence[GameHistory],
                    coherence_floor: float = 0.9, cfg: Optional[ScreenConfig] = None) -> tuple[float, float]:
    """(omega_minus, omega_plus): the strongest strengths keeping mean coherence at the floor."""
    if not 0 <= coherence_floor < 1:
        raise ValueError("coherence_floor must lie in [0, 1)")
    cfg = cfg or ScreenConfig()
    cfg = ScreenConfig(**{**cfg.to_dict(), "coherence_floor": coherence_floor})
    return calibrate_batch(PromptBatch(m, histories, cfg.layer), s, feature_id, cfg)


@dataclass
class DeltaRecord:
    feature_id: int
    omega_plus: float
    omega_minus: float
    p_plus: float
    p_minus: float
    delta: float
    p_plus_renorm: float
    p_minus_renorm: float
    delta_renorm: float
    coherence_plus: float
    coherence_minus: float
    monotone_fraction: float
    degenerate: bool
    grid_plus: list[float] = field(repr=False)
    grid_zero: list[float] = field(repr=False)
    grid_minus: list[float] = field(repr=False)

    def to_dict(self) -> dict:
        return asdict(self)


def monotone(values: np.ndarray, tol: float = 1e-3) -> bool:
    d = np.diff(np.asarray(values, dtype=float))
    return bool(np.all(d >= -tol) or np.all(d <= tol))


def monotonicity_score(curves, tol: float = 1e-3) -> float:
    """Fraction of curves whose p_defect sequence is monotone within ``tol``."""
    curves = list(curves)
    if not curves:
        return float("nan")
    for c in curves:
        if len(c.p_defect) < 3:
            raise ValueError("monotonicity needs at least 3 grid points per curve")
    return sum(monotone(c.p_defect, tol) for c in curves) / len(curves)


def screen_batch(batch: PromptBatch, s: SaeModel, feature_id: int, omega_plus: float, omega_minus: float,
                 cfg: ScreenConfig) -> DeltaRecord:
    def at(w):
        spec = None if w == 0 else SteeringSpec(batch.layer, feature_id, w, cfg.last_position_only)
        return action_views(batch.probs(s, spec, cfg.temperature))

    plus, zero, minus = at(omega_plus), at(0.0), at(omega_minus)
    lo, hi = min(omega_minus, omega_plus), max(omega_minus, omega_plus)
    curves = sweep_batch(batch, s, feature_id, default_grid(lo, hi, cfg.grid_points), cfg.temperature,
                         cfg.last_position_only)
    p_plus, p_minus = float(plus[0].mean()), float(minus[0].mean())
    r_plus, r_minus = float(plus[1].mean()), float(minus[1].mean())
    return DeltaRecord(
        feature_id=int(feature_id),
        omega_plus=float(omega_plus),
        omega_minus=float(omega_minus),
        p_plus=p_plus,
        p_minus=p_minus,
        delta=p_plus - p_minus,
        p_plus_renorm=r_plus,
        p_minus_renorm=r_minus,
        delta_renorm=r_plus - r_minus,
        coherence_plus=float(plus[2].mean()),
        coherence_minus=float(minus[2].mean()),
        monotone_fraction=monotonicity_score(curves, cfg.monotone_tol) if cfg.grid_points >= 3 else float("nan"),
        degenerate=omega_plus == 0 and omega_minus == 0,
        grid_plus=plus[0].tolist(),
        grid_zero=zero[0].tolist(),
        grid_minus=minus[0].tolist(),
    )


def screen_feature(m: ToyLm, s: SaeModel, feature_id: int, omega_plus: float, omega_minus: float,
                   histories: Sequence[GameHistory], cfg: Optional[ScreenConfig] = None) -> DeltaRecord:
    """Delta record for one feature: mean raw P(blue) under +/- steering over ``histories``."""
    cfg = cfg or ScreenConfig()
    return screen_batch(PromptBatch(m, histories, cfg.layer), s, feature_id, omega_plus, omega_minus, cfg)


@dataclass
class ScreeningReport:
    model_id: str
    sae_id: str
    config: dict
    histories: list[str]
    baseline: list[float]
    baseline_mean: float
    prefiltered_count: int
    dead_features: list[int]
    records: list[DeltaRecord]
    failures: list[tuple[int, str]] = field(default_factory=list)

    @property
    def dead_count(self) -> int:
        return len(self.dead_features)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "sae_id": self.sae_id,
            "config": self.config,
            "histories": self.histories,
            "baseline": self.baseline,
            "baseline_mean": self.baseline_mean,
            "prefiltered_count": self.prefiltered_count,
            "dead_count": self.dead_count,
            "dead_features": self.dead_features,
            "failures": [list(f) for f in self.failures],
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ScreeningReport":
        return cls(
            d["model_id"], d["sae_id"], d["config"], d["histories"], d["baseline"], d["baseline_mean"],
            d["prefiltered_count"], d["dead_features"], [DeltaRecord(**r) for r in d["records"]],
            [tuple(f) for f in d.get("failures", [])],
        )

    def record(self, feature_id: int) -> DeltaRecord:
        for r in self.records:
            if r.feature_id == feature_id:
                return r
        raise KeyError(feature_id)


def tensor_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().astype("<f8").tobytes())
    return h.hexdigest()[:16]


def screen_all(m: ToyLm, s: SaeModel, cfg: ScreenConfig = ScreenConfig(), workers: int = 1,
               dead_features: Optional[Sequence[int]] = None, features: Optional[Sequence[int]] = None) -> ScreeningReport:
    """Screen every prompt-active, non-dead feature.

    Features are evaluated independently on a thread pool and collected in
    feature order, so the report does not depend on ``workers``.
    """
    torch.set_num_threads(1)
    histories = enumerate_histories(cfg.n_rounds)
    batch = PromptBatch(m, histories, cfg.layer)
    active = active_features(s, batch.resid.reshape(-1, s.d_in), cfg.active_threshold)
    dead = sorted(set(int(f) for f in dead_features)) if dead_features is not None else []
    candidates = [int(f) for f in np.flatnonzero(active) if int(f) not in set(dead)]
    if features is not None:
        wanted = set(int(f) for f in features)
        candidates = [f for f in candidates if f in wanted]
    base = action_views(batch.probs(None, None, cfg.temperature))[0]

    def run(f):
        try:
            om, op = calibrate_batch(batch, s, f, cfg)
            return screen_batch(batch, s, f, op, om, cfg)
        except Exception as exc:  # isolate per-feature failures
            log.warning("feature %d failed: %s", f, exc)
            return f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, candidates))
    else:
        results = [run(f) for f in candidates]
    records = [r for r in results if isinstance(r, DeltaRecord)]
    failures = [(f, r) for f, r in zip(candidates, results) if not isinstance(r, DeltaRecord)]
    return ScreeningReport(
        model_id=tensor_digest(m),
        sae_id=tensor_digest(s),
        config=cfg.to_dict(),
        histories=[h.key() for h in histories],
        baseline=base.tolist(),
        baseline_mean=float(base.mean()),
        prefiltered_count=int(active.sum()),
        dead_features=dead,
        records=records,
        failures=failures,
    )


def tail_features(report: ScreeningReport, threshold: float = 0.6) -> list[DeltaRecord]:
    """Records with |delta| > threshold, largest first (ties by feature id)."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    out = [r for r in report.records if abs(r.delta) > threshold]
    return sorted(out, key=lambda r: (-abs(r.delta), r.feature_id))
