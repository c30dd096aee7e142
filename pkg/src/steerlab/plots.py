"""SVG figures with byte-stable output (fixed hash salt, no date stamp)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "steerlab"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def defection_scatter(path, p2, p1, fit=None, labels=None) -> None:
    """Player-1 defection rate against opponent defection rate, with the 4PL fit."""
    fig, ax = plt.subplots(figsize=(5, 4))
    if labels is None:
        ax.scatter(p2, p1, s=10, color="tab:blue")
    else:
        ax.scatter(p2, p1, s=10, c=labels, cmap="viridis")
    if fit is not None:
        xs = np.linspace(0, 1, 201)
        ax.plot(xs, fit.predict(xs), color="tab:red", label=f"4PL fit, r2={fit.r_squared:.3f}")
        ax.legend(loc="lower right")
    ax.set_xlabel("opponent defection rate")
    ax.set_ylabel("agent defection rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    _save(fig, path)


def score_per_turn(path, mean_scores: np.ndarray) -> None:
    """Mean cumulative score (dollars) per turn for both players."""
    fig, ax = plt.subplots(figsize=(5, 4))
    turns = np.arange(1, len(mean_scores) + 1)
    ax.plot(turns, mean_scores[:, 0], label="agent")
    ax.plot(turns, mean_scores[:, 1], label="opponent")
    ax.set_xlabel("turn")
    ax.set_ylabel("mean cumulative score ($)")
    ax.legend()
    _save(fig, path)


def gmm_clusters(path, points: np.ndarray, labels: np.ndarray, means: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(points[:, 0], points[:, 1], c=labels, s=10, cmap="tab10", vmin=0, vmax=9)
    ax.scatter(means[:, 0], means[:, 1], marker="x", s=80, color="black")
    ax.set_xlabel("opponent defection rate")
    ax.set_ylabel("agent defection rate")
    _save(fig, path)


def delta_histogram(path, deltas, bins: int = 20) -> np.ndarray:
    """Histogram of delta over [-1, 1]; returns the bin counts that were drawn."""
    counts, edges = np.histogram(np.asarray(deltas, dtype=float), bins=bins, range=(-1.0, 1.0))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.stairs(counts, edges, fill=True)
    ax.set_xlabel("delta")
    ax.set_ylabel("features")
    _save(fig, path)
    return counts


def strategy_area_plot(path, area) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    pts = area.points
    ax.scatter(pts[:, 0], pts[:, 1], s=8)
    if len(area.hull) >= 2:
        hull = np.vstack([area.hull, area.hull[:1]])
        ax.plot(hull[:, 0], hull[:, 1], color="tab:orange")
    ax.scatter([area.center[0]], [area.center[1]], marker="*", s=120, color="tab:red")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.5)
    ax.set_xlabel("P(blue | +feature)")
    ax.set_ylabel("P(blue | -feature)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title(f"area {area.area:.4f}")
    _save(fig, path)


def defection_count_grid(histories, values) -> np.ndarray:
    """4x4 mean of ``values`` indexed by (player-1 defections, player-2 defections)."""
    from .game import defection_count

    n = max(len(h) for h in histories) + 1
    total = np.zeros((n, n))
    count = np.zeros((n, n))
    for h, v in zip(histories, values):
        i, j = defection_count(h, 1), defection_count(h, 2)
        total[i, j] += v
        count[i, j] += 1
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def history_grids(path, histories, record) -> None:
    """Three panels (+, 0, -) of mean P(blue) by defection counts."""
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    panels = (("+", record.grid_plus), ("0", record.grid_zero), ("-", record.grid_minus))
    for ax, (name, vals) in zip(axes, panels):
        g = defection_count_grid(histories, vals)
        im = ax.imshow(g, origin="lower", vmin=0, vmax=1, cmap="coolwarm")
        ax.set_title(f"feature {record.feature_id} ({name})")
        ax.set_xlabel("partner defections")
        ax.set_ylabel("agent defections")
    fig.colorbar(im, ax=axes, shrink=0.8, label="P(blue)")
    _save(fig, path)


def density_plot(path, density) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if not density.degenerate:
        ax.stairs(density.counts, density.bin_edges, fill=True)
    ax.set_yscale("log")
    ax.set_xlabel("activation")
    ax.set_ylabel("count")
    ax.set_title(f"feature {density.feature_id}: {density.klass or 'degenerate'}")
    _save(fig, path)


def sweep_plot(path, curves) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for c in curves:
        ax.plot(c.omegas, c.p_defect, lw=0.6, alpha=0.6)
    ax.axvline(0, color="grey", lw=0.5)
    ax.set_xlabel("omega")
    ax.set_ylabel("P(blue) / (P(blue) + P(green))")
    ax.set_ylim(-0.02, 1.02)
    _save(fig, path)


def loss_trace(path, trace, label: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(len(trace)), trace, lw=0.6)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(label)
    _save(fig, path)
