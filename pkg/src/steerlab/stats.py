"""Logistic response fits, two-sample tests, GMM clustering and strategy areas."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.special import kolmogorov, logsumexp
from scipy.stats import norm, rankdata


# ---------------------------------------------------------------- logistic


def logistic4(x, midpoint: float, slope: float, lower: float, upper: float) -> np.ndarray:
    z = np.clip(-slope * (np.asarray(x, dtype=float) - midpoint), -700, 700)
    return lower + (upper - lower) / (1.0 + np.exp(z))


@dataclass(frozen=True)
class LogisticFit:
    midpoint: float
    slope: float
    lower: float
    upper: float
    r_squared: float
    ss_res: float
    zero_variance: bool = False

    def predict(self, x) -> np.ndarray:
        return logistic4(x, self.midpoint, self.slope, self.lower, self.upper)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def logistic_fit(x, y) -> LogisticFit:
    """Least-squares four-parameter logistic, best of several local starts.

    The flat curve at mean(y) is always among the candidates, so the fit is
    never worse than a constant.  Parameters are reported with lower <= upper.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(x) < 5:
        raise ValueError("logistic_fit needs at least 5 points")
    ybar = float(y.mean())
    ss_tot = float(((y - ybar) ** 2).sum())
    if ss_tot == 0.0:
        return LogisticFit(float(np.median(x)), 0.0, ybar, ybar, 1.0, 0.0, zero_variance=True)

    def resid(p):
        return logistic4(x, *p) - y

    span = max(float(x.max() - x.min()), 1e-12)
    lo, hi = float(y.min()), float(y.max())
    best = np.array([float(np.median(x)), 0.0, ybar, ybar])
    best_ss = float((resid(best) ** 2).sum())
    for q in (0.25, 0.5, 0.75):
        mid = float(np.quantile(x, q))
        for k in (1.0, 4.0, 16.0, 64.0):
            for sign in (1.0, -1.0):
                p0 = np.array([mid, sign * k / span, lo, hi])
                try:
                    sol = least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=4000)
                except (ValueError, FloatingPointError):
                    continue
                ss = float((sol.fun ** 2).sum())
                if np.all(np.isfinite(sol.x)) and ss < best_ss:
                    best, best_ss = sol.x, ss
    mid, slope, lower, upper = (float(v) for v in best)
    if lower > upper:
        lower, upper, slope = upper, lower, -slope
    return LogisticFit(mid, slope, lower, upper, 1.0 - best_ss / ss_tot, best_ss)


# ---------------------------------------------------------------- two-sample tests


class KsResult(NamedTuple):
    statistic: float
    p_value: float


def ks_test(a, b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov: sup |ECDF_a - ECDF_b| and its asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.union1d(a, b)
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    d = float(np.max(np.abs(fa - fb)))
    en = math.sqrt(len(a) * len(b) / (len(a) + len(b)))
    return KsResult(d, float(min(1.0, max(0.0, kolmogorov(en * d)))))


class MannWhitneyResult(NamedTuple):
    u: float
    p_value: float
    u_b: float
    exact: bool


def _u_from_ranks(ranks: np.ndarray, n_a: int) -> float:
    return float(ranks.sum() - n_a * (n_a + 1) / 2)


def mann_whitney(a, b, exact_max: int = 12) -> MannWhitneyResult:
    """U statistic of ``a`` with midranks and a two-sided p-value.

    The p-value enumerates every split of the pooled ranks when
    |a| + |b| <= ``exact_max``; otherwise it uses the tie-corrected normal
    approximation with a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n_a, n_b = len(a), len(b)
    if n_a == 0 or n_b == 0:
        raise ValueError("both samples must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    u = _u_from_ranks(ranks[:n_a], n_a)
    mean = n_a * n_b / 2
    n = n_a + n_b
    if n <= exact_max:
        dev = abs(u - mean)
        us = np.array([_u_from_ranks(ranks[list(c)], n_a) for c in itertools.combinations(range(n), n_a)])
        p = float(np.mean(np.abs(us - mean) >= dev - 1e-9))
        return MannWhitneyResult(u, min(1.0, p), n_a * n_b - u, True)
    _, counts = np.unique(ranks, return_counts=True)
    tie = float((counts ** 3 - counts).sum())
    var = n_a * n_b / 12 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u, 1.0, n_a * n_b - u, False)
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    return MannWhitneyResult(u, float(min(1.0, 2 * norm.sf(z))), n_a * n_b - u, False)


# ---------------------------------------------------------------- gaussian mixture


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float
    trace: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    seed_index: int = 0

    @property
    def k(self) -> int:
        return len(self.weights)

    def log_resp(self, x) -> np.ndarray:
        return _log_joint(np.atleast_2d(np.asarray(x, dtype=float)), self.weights, self.means, self.covariances)

    def predict(self, x) -> np.ndarray:
        return self.log_resp(x).argmax(axis=1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihood": self.log_likelihood,
            "trace": self.trace,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


def _log_joint(x, weights, means, covs) -> np.ndarray:
    n, d = x.shape
    out = np.empty((n, len(weights)))
    for j in range(len(weights)):
        chol = np.linalg.cholesky(covs[j])
        z = np.linalg.solve(chol, (x - means[j]).T)
        logdet = 2 * np.log(np.diag(chol)).sum()
        out[:, j] = math.log(weights[j]) - 0.5 * (d * math.log(2 * math.pi) + logdet + (z ** 2).sum(axis=0))
    return out


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability proportional to D^2."""
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centres)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.integers(len(x)) if total == 0 else rng.choice(len(x), p=d2 / total)
        centres.append(x[idx])
    return np.array(centres)


def _em(x, k, rng, reg, tol, max_iter) -> GmmModel:
    n, d = x.shape
    eye = np.eye(d)
    means = kmeans_pp(x, k, rng)
    cov0 = np.atleast_2d(np.cov(x.T, bias=True)) + reg * eye
    covs = np.array([cov0] * k)
    weights = np.full(k, 1.0 / k)
    trace: list[float] = []
    converged = False
    for it in range(max_iter + 1):
        lj = _log_joint(x, weights, means, covs)
        ll = float(logsumexp(lj, axis=1).sum())
        if trace and ll < trace[-1]:
            # a decrease can only be round-off or the regularizer at convergence:
            # keep the previous iterate so the trace stays monotone
            weights, means, covs = prev
            converged = True
            break
        trace.append(ll)
        if len(trace) > 1 and ll - trace[-2] < tol * abs(trace[-2]):
            converged = True
            break
        if it == max_iter:
            break
        prev = (weights, means, covs)
        resp = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((k, d, d))
        for j in range(k):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + reg * eye
            covs[j] = 0.5 * (covs[j] + covs[j].T)
    return GmmModel(weights, means, covs, trace[-1], trace, len(trace) - 1, converged)


def gmm_fit(points, k: int = 3, seed: int = 0, n_init: int = 4, reg: float = 1e-6, tol: float = 1e-8,
            max_iter: int = 500) -> GmmModel:
    """Full-covariance Gaussian mixture by EM from k-means++ starts.

    Each start has its own seed-derived stream; the best final
    log-likelihood wins, ties going to the lower start index.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("points must be an (n, d) array")
    if k < 1 or k > len(x):
        raise ValueError(f"k={k} must lie in [1, {len(x)}]")
    best = None
    for i in range(n_init):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x63, i)))
        model = _em(x, k, rng, reg, tol, max_iter)
        model.seed_index = i
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    return best


# ---------------------------------------------------------------- strategy area


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull vertices by Andrew's monotone chain (collinear points dropped)."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def shoelace_area(polygon) -> float:
    p = np.asarray(polygon, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


@dataclass
class StrategyArea:
    points: np.ndarray
    hull: np.ndarray
    area: float
    center: tuple[float, float]
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "hull": self.hull.tolist(),
            "area": self.area,
            "center": list(self.center),
            "degenerate": self.degenerate,
        }


def strategy_area(records: Sequence, baseline: float) -> StrategyArea:
    """Convex hull of (p_plus, p_minus) over screened features.

    ``records`` holds DeltaRecords or plain (p_plus, p_minus) pairs.
    """
    pts = np.array([(r.p_plus, r.p_minus) if hasattr(r, "p_plus") else tuple(r) for r in records], dtype=float)
    if len(pts) < 3:
        raise ValueError("strategy_area needs at least 3 records")
    hull = convex_hull(pts)
    area = shoelace_area(hull)
    return StrategyArea(pts, hull, area, (float(baseline), float(baseline)), area == 0.0)
