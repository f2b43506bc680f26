"""Two-sample distribution distances: energy statistic, MMD, Wasserstein.

These are evaluation-side metrics: pairwise distances are exact Euclidean
norms (no smoothing). Pairwise sums run in a fixed order, so every value
here is deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist

WASSERSTEIN_SIZE_CAP = 2048
MEDIAN = "median"

_CROSS_BLOCK = 4_000_000  # max pairwise entries materialized at once


@dataclass(frozen=True)
class EnergyEstimatorConfig:
    """Within-term convention for the plug-in energy statistic.

    mode "u": 1/(m(m-1)) over i != j (unbiased); needs both sets >= 2.
    mode "v": 1/m^2 including the zero diagonal (nonnegative statistic).
    include_constant: whether the Y-Y' term enters (drop it to get the
    training-style objective that ignores the data-only constant).
    """
    mode: str = "v"
    include_constant: bool = True

    def __post_init__(self):
        if self.mode not in ("u", "v"):
            raise ValueError(f"mode must be 'u' or 'v', got {self.mode!r}")


def _as_points(tag: str, arr) -> np.ndarray:
    pts = np.asarray(getattr(arr, "points", arr), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"{tag}: expected (n, d) points, got shape {pts.shape}")
    return pts


def _pair_sum_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Sum over all pairs of |x_i - y_j| via sorted prefix sums."""
    xs = np.sort(x)
    pre = np.concatenate([[0.0], np.cumsum(xs)])
    cnt = np.searchsorted(xs, y, side="right")
    below = cnt * y - pre[cnt]
    above = (pre[-1] - pre[cnt]) - (len(xs) - cnt) * y
    return float(np.sum(below + above))


def _within_sum_1d(x: np.ndarray) -> float:
    """Sum over ordered pairs (i != j) of |x_i - x_j|."""
    xs = np.sort(x)
    idx = np.arange(len(xs), dtype=np.float64)
    return 2.0 * float(np.sum((2.0 * idx - len(xs) + 1.0) * xs))


def _cross_sum(x: np.ndarray, y: np.ndarray) -> float:
    """Sum of Euclidean distances over all (i, j) pairs, in fixed block order."""
    if x.shape[1] == 1:
        return _pair_sum_1d(x[:, 0], y[:, 0])
    rows = max(1, _CROSS_BLOCK // max(len(y), 1))
    totals = 0.0
    for start in range(0, len(x), rows):
        totals += float(cdist(x[start:start + rows], y).sum())
    return totals


def _within_sum(x: np.ndarray) -> float:
    """Sum over ordered pairs (i != j) of pairwise distances within one set."""
    if len(x) < 2:
        return 0.0
    if x.shape[1] == 1:
        return _within_sum_1d(x[:, 0])
    if len(x) * len(x) <= _CROSS_BLOCK:
        return 2.0 * float(pdist(x).sum())
    return _cross_sum(x, x)   # diagonal contributes zeros


def energy_statistic(x, y, cfg: EnergyEstimatorConfig = EnergyEstimatorConfig()) -> float:
    """Plug-in energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| between samples."""
    xp = _as_points("X", x)
    yp = _as_points("Y", y)
    if xp.shape[1] != yp.shape[1]:
        raise ValueError(f"dimension mismatch: {xp.shape[1]} vs {yp.shape[1]}")
    m, n = len(xp), len(yp)
    if cfg.mode == "u" and (m < 2 or n < 2):
        raise ValueError("U-mode estimator needs at least 2 points per set")
    value = 2.0 * _cross_sum(xp, yp) / (m * n)
    value -= _within_sum(xp) / (m * (m - 1) if cfg.mode == "u" else m * m)
    if cfg.include_constant:
        value -= _within_sum(yp) / (n * (n - 1) if cfg.mode == "u" else n * n)
    return value


def gaussian_energy_oracle(mu: float) -> float:
    """Closed-form energy distance between N(0,1) and N(mu,1) in 1-D.

    Uses the folded-normal mean E|N(m, s^2)| =
    s sqrt(2/pi) exp(-m^2 / 2 s^2) + m (1 - 2 Phi(-m/s)) with s = sqrt(2).
    """
    s = math.sqrt(2.0)

    def folded_mean(m: float) -> float:
        phi = 0.5 * (1.0 + math.erf((-m / s) / math.sqrt(2.0)))
        return s * math.sqrt(2.0 / math.pi) * math.exp(-m * m / (2 * s * s)) \
            + m * (1.0 - 2.0 * phi)

    return 2.0 * folded_mean(abs(mu)) - 2.0 * folded_mean(0.0)


def median_pairwise_distance(points: np.ndarray) -> float:
    d = pdist(np.asarray(points, dtype=np.float64))
    return float(np.median(d)) if d.size else 0.0


def mmd_gaussian(x, y, bandwidth: float | str = MEDIAN) -> tuple[float, float]:
    """Biased (V-statistic) squared MMD with RBF kernel exp(-r^2 / 2 sigma^2).

    bandwidth MEDIAN resolves sigma to the median pairwise distance of the
    pooled set. Returns (mmd2, bandwidth_used). Symmetric in its arguments
    by canonical internal ordering.
    """
    xp = _as_points("X", x)
    yp = _as_points("Y", y)
    if xp.shape[1] != yp.shape[1]:
        raise ValueError(f"dimension mismatch: {xp.shape[1]} vs {yp.shape[1]}")
    # canonical order makes mmd(X, Y) == mmd(Y, X) bit-for-bit
    if (len(xp), xp.tobytes()) > (len(yp), yp.tobytes()):
        xp, yp = yp, xp
    if bandwidth == MEDIAN:
        sigma = median_pairwise_distance(np.concatenate([xp, yp], axis=0))
    else:
        sigma = float(bandwidth)
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError(f"degenerate kernel bandwidth {sigma!r} (pooled points "
                         "may be identical); pass an explicit bandwidth")
    inv = -0.5 / (sigma * sigma)
    kxx = np.exp(inv * cdist(xp, xp, "sqeuclidean"))
    kyy = np.exp(inv * cdist(yp, yp, "sqeuclidean"))
    kxy = np.exp(inv * cdist(xp, yp, "sqeuclidean"))
    return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean()), sigma


def wasserstein_assignment(x, y, order: int = 1) -> float:
    """Exact optimal-assignment Wasserstein distance between equal-size sets.

    order 1: mean matched Euclidean distance; order 2: root mean matched
    squared distance. Sizes are capped to keep the dense assignment cheap.
    """
    xp = _as_points("X", x)
    yp = _as_points("Y", y)
    if xp.shape[1] != yp.shape[1]:
        raise ValueError(f"dimension mismatch: {xp.shape[1]} vs {yp.shape[1]}")
    if len(xp) != len(yp):
        raise ValueError(f"set sizes differ: {len(xp)} vs {len(yp)}")
    if len(xp) > WASSERSTEIN_SIZE_CAP:
        raise ValueError(f"size {len(xp)} exceeds cap {WASSERSTEIN_SIZE_CAP}")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    cost = cdist(xp, yp)
    if order == 2:
        rows, cols = linear_sum_assignment(cost * cost)
        return float(np.sqrt((cost[rows, cols] ** 2).mean()))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class MetricsReport:
    """One evaluation row: generated-vs-reference distances plus provenance."""
    method: str
    steps: int
    seed: int
    n: int
    mmd: float
    wsd: float
    energy_u: float
    energy_v: float
    bandwidth: float

    CSV_HEADER = "method,steps,seed,n,mmd,wsd,energy_u,energy_v,bandwidth"

    def __post_init__(self):
        for name in ("mmd", "wsd", "energy_u", "energy_v", "bandwidth"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"MetricsReport.{name} is not finite")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    def csv_row(self) -> str:
        return ",".join([self.method, str(self.steps), str(self.seed), str(self.n),
                         repr(self.mmd), repr(self.wsd), repr(self.energy_u),
                         repr(self.energy_v), repr(self.bandwidth)])


def evaluate_samples(generated, reference, method: str, steps: int, seed: int,
                     bandwidth: float | str = MEDIAN) -> MetricsReport:
    """Full report between generated points and a reference batch."""
    gen = _as_points("generated", generated)
    ref = _as_points("reference", reference)
    mmd2, sigma = mmd_gaussian(gen, ref, bandwidth)
    wsd = wasserstein_assignment(gen, ref)
    e_u = energy_statistic(gen, ref, EnergyEstimatorConfig(mode="u"))
    e_v = energy_statistic(gen, ref, EnergyEstimatorConfig(mode="v"))
    return MetricsReport(method, steps, seed, len(gen), mmd2, wsd, e_u, e_v, sigma)
