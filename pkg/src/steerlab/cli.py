"""``steerlab`` command line: simulate, train, screen, dashboard, sweep."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .checkpoint import CorruptCheckpoint, file_sha256, load_lm, load_sae, save_lm, save_sae
from .config import ConfigError, RunConfig, load_config
from .game import GameAborted, enumerate_histories, game_seed, payoff, play_game
from .strategies import ModelAgent, RandomDefector, policy_from_config

log = logging.getLogger("steerlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_POLICY = 3
EXIT_DIVERGED = 4
EXIT_CORRUPT = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def fmt(v) -> str:
    """CSV cell: floats with 17 significant digits, everything else via str."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


class RunDir:
    """One fresh output directory per run; files are registered for the manifest."""

    def __init__(self, root, command: str, cfg: RunConfig):
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        base = Path(root) / f"{command}-{cfg.hash()}-{stamp}"
        path, n = base, 1
        while True:
            try:
                path.mkdir(parents=True, exist_ok=False)
                break
            except FileExistsError:
                n += 1
                path = Path(f"{base}-{n}")
        self.path = path
        self.files: list[str] = []

    def file(self, name: str) -> Path:
        self.files.append(name)
        return self.path / name

    def write_csv(self, name: str, header: list[str], rows) -> None:
        with open(self.file(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) for v in r])

    def write_json(self, name: str, obj) -> None:
        self.file(name).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")

    def digests(self) -> dict[str, str]:
        return {name: file_sha256(self.path / name) for name in sorted(set(self.files))}


def _workers(arg: Optional[int], cfg: RunConfig) -> int:
    if arg is not None:
        n = arg
    elif cfg.workers is not None:
        n = cfg.workers
    else:
        env = os.environ.get("STEERLAB_WORKERS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise CliError(f"STEERLAB_WORKERS must be an integer, got {env!r}", EXIT_CONFIG) from None
    if n < 1:
        raise CliError("workers must be >= 1", EXIT_CONFIG)
    return n


def _load_checkpoints(cfg: RunConfig, need_sae: bool = True):
    paths = {"model": cfg.checkpoints.model, "sae": cfg.checkpoints.sae if need_sae else None}
    for name, p in paths.items():
        if name == "sae" and not need_sae:
            continue
        if not p:
            raise CliError(f"checkpoints.{name} is not set", EXIT_CONFIG)
        if not Path(p).is_file():
            raise CliError(f"checkpoint {p} does not exist", EXIT_CONFIG)
    try:
        m, mmeta, _ = load_lm(paths["model"])
        s, smeta = load_sae(paths["sae"]) if need_sae else (None, {})
    except CorruptCheckpoint as exc:
        raise CliError(f"corrupt checkpoint: {exc}", EXIT_CORRUPT) from None
    if s is not None and s.d_in != m.cfg.d_model:
        raise CliError("SAE width does not match the model", EXIT_CONFIG)
    inputs = {p: file_sha256(p) for p in paths.values() if p}
    return m, mmeta, s, smeta, inputs


# ---------------------------------------------------------------- simulate


def _model_loader(cfg: RunConfig, inputs: dict):
    def load(spec: dict):
        m, _, s, _, used = _load_checkpoints(cfg, need_sae="steering" in spec)
        inputs.update(used)
        spec = dict(spec)
        steering = spec.pop("steering", None)
        if steering is not None:
            from .steering import SteeringSpec

            steering = SteeringSpec(m.cfg.hook_layer, **steering)
            steering.validate(m, s)
        if "persona" in spec:
            spec["persona"] = tuple(spec["persona"])
        try:
            return ModelAgent(m, steering=steering, sae=s, **spec)
        except TypeError as exc:
            raise ValueError(f"bad parameters for model_agent: {exc}") from None

    return load


def cmd_simulate(cfg: RunConfig, rd: RunDir, workers: int) -> dict:
    from . import plots
    from .stats import gmm_fit, logistic_fit

    sim = cfg.simulate
    if not 1 <= sim.min_rounds <= sim.max_rounds:
        raise CliError("simulate needs 1 <= min_rounds <= max_rounds", EXIT_CONFIG)
    if sim.n_games < 1:
        raise CliError("simulate.n_games must be >= 1", EXIT_CONFIG)
    inputs: dict = {}
    try:
        player = policy_from_config(sim.player, _model_loader(cfg, inputs))
        opponent = policy_from_config(sim.opponent) if sim.opponent is not None else None
    except ValueError as exc:
        raise CliError(f"invalid policy: {exc}", EXIT_CONFIG) from None

    def one(g: int):
        rng = np.random.default_rng(game_seed(cfg.seed, g))
        length = int(rng.integers(sim.min_rounds, sim.max_rounds + 1))
        p = float(rng.random()) if opponent is None else None
        opp = RandomDefector(p) if opponent is None else opponent
        return p, play_game(player, opp, length, rng)

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                games = list(pool.map(one, range(sim.n_games)))
        else:
            games = [one(g) for g in range(sim.n_games)]
    except GameAborted as exc:
        raise CliError(f"policy failure: {exc} (after {len(exc.history)} rounds)", EXIT_POLICY) from None

    rows, pts = [], []
    for g, (p, h) in enumerate(games):
        d1 = sum(int(a) for a in h.actions(1)) / len(h)
        d2 = sum(int(a) for a in h.actions(2)) / len(h)
        rows.append([g, "" if p is None else p, d2, d1, len(h), h.scores[0] / 100, h.scores[1] / 100])
        pts.append((d2, d1))
    rd.write_csv("games.csv", ["game", "p2_defect_param", "p2_defect", "p1_defect", "rounds", "score1", "score2"], rows)
    pts = np.array(pts)

    summary: dict = {"games": len(games), "mean_p1_defect": float(pts[:, 1].mean())}
    fit = None
    if len(pts) >= 5:
        fit = logistic_fit(pts[:, 0], pts[:, 1])
        summary["logistic"] = fit.to_dict()
    k = min(sim.gmm_k, len(pts))
    gmm = gmm_fit(pts, k=k, seed=cfg.seed)
    summary["gmm"] = gmm.to_dict()
    labels = gmm.predict(pts)

    longest = max(len(h) for _, h in games)
    cum = np.zeros((longest, 2))
    cnt = np.zeros(longest)
    for _, h in games:
        per_round = np.array([payoff(a, b, h.payoffs) for a, b in h.rounds], dtype=float)
        running = np.cumsum(per_round, axis=0) / 100
        cum[: len(h)] += running
        cnt[: len(h)] += 1
    mean_scores = cum / cnt[:, None]
    rd.write_csv("scores_per_turn.csv", ["turn", "mean_score1", "mean_score2", "games"],
                 [[t + 1, mean_scores[t, 0], mean_scores[t, 1], int(cnt[t])] for t in range(longest)])
    rd.write_json("summary.json", summary)
    plots.defection_scatter(rd.file("defection_scatter.svg"), pts[:, 0], pts[:, 1], fit)
    plots.score_per_turn(rd.file("score_per_turn.svg"), mean_scores)
    plots.gmm_clusters(rd.file("gmm_clusters.svg"), pts, labels, gmm.means)
    return {**summary, "_inputs": inputs}


# ---------------------------------------------------------------- train


def cmd_train(cfg: RunConfig, rd: RunDir, workers: int) -> dict:
    from . import plots
    from .lm.corpus import generate_corpus
    from .lm.model import LmConfig
    from .lm.train import TrainingDiverged, train_toy_lm
    from .lm.vocab import DEFAULT_VOCAB
    from .sae import SaeDiverged, active_features, collect_activations, train_sae

    torch.set_num_threads(1)
    lm_cfg = LmConfig(vocab_size=len(DEFAULT_VOCAB), **cfg.model.__dict__)
    tcfg = cfg.lm_train()
    corpus = generate_corpus(cfg.corpus, cfg.seed, lm_cfg.context_window)
    init = opt_state = None
    start = 0
    loss_init = None
    inputs = {}
    if cfg.resume.checkpoint:
        p = cfg.resume.checkpoint
        if not Path(p).is_file():
            raise CliError(f"resume checkpoint {p} does not exist", EXIT_CONFIG)
        try:
            init, meta, opt_state = load_lm(p)
        except CorruptCheckpoint as exc:
            raise CliError(f"corrupt checkpoint: {exc}", EXIT_CORRUPT) from None
        if init.cfg != lm_cfg:
            raise CliError("resume checkpoint architecture differs from the config", EXIT_CONFIG)
        if meta.get("seed") != cfg.seed or meta.get("corpus") != cfg.corpus.to_dict():
            raise CliError("resume checkpoint was trained with a different seed or corpus", EXIT_CONFIG)
        start = int(meta.get("step", 0))
        loss_init = meta.get("held_out_loss_init")
        if start > tcfg.steps:
            raise CliError(f"checkpoint is at step {start}, beyond train.steps={tcfg.steps}", EXIT_CONFIG)
        inputs[p] = file_sha256(p)

    t0 = time.perf_counter()
    try:
        res = train_toy_lm(corpus, tcfg, lm_cfg, init=init, start_step=start, optimizer_state=opt_state)
    except TrainingDiverged as exc:
        path = rd.file("model-last-good.ckpt")
        save_lm(path, exc.last_good, {"seed": cfg.seed, "corpus": cfg.corpus.to_dict(), "diverged_at": exc.step})
        raise CliError(f"training diverged: {exc}; last good checkpoint at {path}", EXIT_DIVERGED) from None
    t_lm = time.perf_counter() - t0
    # a resumed run reports the loss of the original untrained model
    if loss_init is None:
        loss_init = res.held_out_loss_init
    meta = {
        "seed": cfg.seed,
        "step": res.steps_done,
        "corpus": cfg.corpus.to_dict(),
        "train": tcfg.to_dict(),
        "held_out_loss_init": loss_init,
        "held_out_loss": res.held_out_loss,
        "held_out_accuracy": res.held_out_accuracy,
    }
    save_lm(rd.file("model.ckpt"), res.model, meta, res.optimizer_state)
    rd.write_csv("lm_trace.csv", ["step", "loss"], [[start + i, v] for i, v in enumerate(res.trace)])
    plots.loss_trace(rd.file("lm_trace.svg"), res.trace, "training loss")

    t0 = time.perf_counter()
    layer = res.model.cfg.hook_layer
    acts = collect_activations(res.model, corpus.sequences, layer)
    try:
        sres = train_sae(acts.vectors, cfg.sae_train())
    except SaeDiverged as exc:
        raise CliError(f"SAE training diverged: {exc}", EXIT_DIVERGED) from None
    dead = np.flatnonzero(~active_features(sres.sae, acts.vectors)).tolist()
    t_sae = time.perf_counter() - t0
    save_sae(rd.file("sae.ckpt"), sres.sae, {
        "seed": cfg.seed,
        "layer": layer,
        "train": cfg.sae_train().to_dict(),
        "held_out_l2_init": sres.held_out_l2_init,
        "held_out_l2": sres.held_out_l2,
        "held_out_l0": sres.held_out_l0,
        "dead_features": dead,
    })
    rd.write_csv("sae_trace.csv", ["step", "loss"], list(enumerate(sres.trace)))
    return {
        "_inputs": inputs,
        "_timings": {"lm_train_s": t_lm, "sae_train_s": t_sae},
        "resumed_from_step": start,
        "held_out_loss_init": loss_init,
        "held_out_loss": res.held_out_loss,
        "held_out_accuracy": res.held_out_accuracy,
        "held_out_accuracy_all": res.held_out_accuracy_all,
        "target_accuracy": tcfg.target_accuracy,
        "target_met": bool(res.held_out_accuracy >= tcfg.target_accuracy),
        "sae_held_out_l2_init": sres.held_out_l2_init,
        "sae_held_out_l2": sres.held_out_l2,
        "sae_held_out_l0": sres.held_out_l0,
        "dead_count": len(dead),
        "hook_layer": layer,
    }


# ---------------------------------------------------------------- screen


def cmd_screen(cfg: RunConfig, rd: RunDir, workers: int) -> dict:
    from . import plots
    from .screening import screen_all, tail_features
    from .stats import strategy_area

    m, _, s, smeta, inputs = _load_checkpoints(cfg)
    t0 = time.perf_counter()
    try:
        report = screen_all(m, s, cfg.screen, workers=workers, dead_features=smeta.get("dead_features"))
    except (ValueError, IndexError) as exc:
        raise CliError(f"screen failed: {exc}", EXIT_CONFIG) from None
    t_screen = time.perf_counter() - t0
    rd.file("report.json").write_text(report.to_json() + "\n")
    cols = ["feature_id", "p_plus", "p_minus", "delta", "coherence_plus", "coherence_minus",
            "omega_plus", "omega_minus", "monotone_fraction"]
    rd.write_csv("report.csv", cols, [[getattr(r, c) for c in cols] for r in report.records])
    counts = plots.delta_histogram(rd.file("delta_histogram.svg"), [r.delta for r in report.records])
    out = {
        "_inputs": inputs,
        "_timings": {"screen_s": t_screen},
        "screened": len(report.records),
        "prefiltered_count": report.prefiltered_count,
        "dead_count": report.dead_count,
        "failures": len(report.failures),
        "baseline_mean": report.baseline_mean,
        "histogram_counts": counts.tolist(),
    }
    if len(report.records) >= 3:
        area = strategy_area(report.records, report.baseline_mean)
        rd.write_json("strategy_area.json", area.to_dict())
        plots.strategy_area_plot(rd.file("strategy_area.svg"), area)
        out["strategy_area"] = area.area
    tails = tail_features(report, cfg.screen.tail_threshold)
    histories = enumerate_histories(cfg.screen.n_rounds)
    for r in tails:
        plots.history_grids(rd.file(f"grids_feature{r.feature_id}.svg"), histories, r)
    out["tail_features"] = [r.feature_id for r in tails]
    return out


# ---------------------------------------------------------------- dashboard / sweep


def _feature(feature_id: Optional[int], s) -> int:
    if feature_id is None:
        raise CliError("--feature is required", EXIT_CONFIG)
    if not 0 <= feature_id < s.d_latent:
        raise CliError(f"feature {feature_id} outside [0, {s.d_latent})", EXIT_CONFIG)
    return feature_id


def cmd_dashboard(cfg: RunConfig, rd: RunDir, workers: int, feature_id: Optional[int] = None) -> dict:
    from . import plots
    from .lm.corpus import CorpusConfig, generate_corpus
    from .sae import collect_activations, top_activations

    m, mmeta, s, smeta, inputs = _load_checkpoints(cfg)
    f = _feature(feature_id, s)
    corpus_cfg = mmeta.get("corpus")
    corpus_cfg = CorpusConfig(**{**corpus_cfg, "teacher_mix": tuple(corpus_cfg["teacher_mix"])}) if corpus_cfg else cfg.corpus
    seed = mmeta.get("seed", cfg.seed)
    corpus = generate_corpus(corpus_cfg, seed, m.cfg.context_window)
    acts = collect_activations(m, corpus.sequences, smeta.get("layer", m.cfg.hook_layer))
    dossier = top_activations(s, f, acts, cfg.dashboard.top_k, cfg.dashboard.window, cfg.density)
    rd.write_json("dashboard.json", dossier.to_dict())
    rd.write_csv("top_contexts.csv", ["rank", "activation", "seq_id", "position", "token", "context"],
                 [[i + 1, r.activation, r.seq_id, r.position, r.token, " ".join(r.context)]
                  for i, r in enumerate(dossier.top_contexts)])
    plots.density_plot(rd.file("density.svg"), dossier.density)
    return {
        "_inputs": inputs,
        "feature_id": f,
        "class": dossier.density.klass,
        "degenerate": dossier.density.degenerate,
        "truncated": dossier.truncated,
        "n_positive": dossier.density.n_positive,
    }


def cmd_sweep(cfg: RunConfig, rd: RunDir, workers: int, feature_id: Optional[int] = None) -> dict:
    from . import plots
    from .screening import calibrate_batch, monotonicity_score
    from .steering import PromptBatch, default_grid, sweep_batch

    m, _, s, _, inputs = _load_checkpoints(cfg)
    f = _feature(feature_id, s)
    sc = cfg.screen
    batch = PromptBatch(m, enumerate_histories(sc.n_rounds), sc.layer)
    om, op = cfg.sweep.omega_minus, cfg.sweep.omega_plus
    if om is None or op is None:
        cm, cp = calibrate_batch(batch, s, f, sc)
        om = cm if om is None else om
        op = cp if op is None else op
    if om > 0 or op < 0:
        raise CliError("sweep needs omega_minus <= 0 <= omega_plus", EXIT_CONFIG)
    grid = default_grid(om, op, cfg.sweep.grid_points)
    curves = sweep_batch(batch, s, f, grid, sc.temperature, sc.last_position_only)
    rows = [[c.history_id, w, pd, pb, coh] for c in curves
            for w, pd, pb, coh in zip(c.omegas, c.p_defect, c.p_blue, c.coherence)]
    rd.write_csv("sweep.csv", ["history_id", "omega", "p_defect", "p_blue", "coherence"], rows)
    plots.sweep_plot(rd.file("sweep.svg"), curves)
    score = monotonicity_score(curves, sc.monotone_tol) if len(grid) >= 3 else float("nan")
    return {"_inputs": inputs, "feature_id": f, "omega_minus": om, "omega_plus": op,
            "grid": grid.tolist(), "monotone_fraction": score}


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "screen": cmd_screen,
    "dashboard": cmd_dashboard,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steerlab", description=__doc__)
    p.add_argument("--version", action="version", version=f"steerlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--workers", type=int, default=None, help="worker threads (default: STEERLAB_WORKERS or 1)")
        sp.add_argument("--out", default=None, help="parent directory for the run directory")
        if name in ("dashboard", "sweep"):
            sp.add_argument("--feature", type=int, default=None, help="SAE feature id")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> tuple[int, Optional[Path]]:
    """Execute one command; returns (exit code, run directory or None)."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    rd = None
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.replace(seed=args.seed)
        if args.out is not None:
            cfg = cfg.replace(out=args.out)
        workers = _workers(args.workers, cfg)
        cfg = cfg.replace(workers=None)
        rd = RunDir(cfg.out, args.command, cfg)
        t0 = time.perf_counter()
        extra = {"feature_id": args.feature} if args.command in ("dashboard", "sweep") else {}
        results = COMMANDS[args.command](cfg, rd, workers, **extra)
        elapsed = time.perf_counter() - t0
    except ConfigError as exc:
        print(f"steerlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, rd and rd.path
    except CliError as exc:
        print(f"steerlab: {exc}", file=sys.stderr)
        return exc.code, rd and rd.path
    inputs = results.pop("_inputs", {})
    timings = results.pop("_timings", {})
    timings["total_s"] = elapsed
    manifest = {
        "command": args.command,
        "tool_version": __version__,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed},
        "workers": workers,
        "inputs": inputs,
        "outputs": rd.digests(),
        "timings": timings,
        "results": results,
    }
    (rd.path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print(rd.path)
    return EXIT_OK, rd.path


def main(argv=None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
