"""Geometric median: Weiszfeld iteration, norm-thresholded variant, scalar median."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import AllFiltered, DimensionMismatch, EmptyInput

# Relative slack on the norm filter so a payload scaled to exactly the
# threshold is not dropped by the last bit of rounding in its norm.
FILTER_RTOL = 1e-9


@dataclass(frozen=True)
class GmConfig:
    max_iterations: int = 10
    step_tolerance: float = 1e-10
    denom_guard: float = 1e-12
    init: str = "mean"  # "mean" | "beck"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_tolerance <= 0 or self.denom_guard <= 0:
            raise ValueError("step_tolerance and denom_guard must be positive")
        if self.init not in ("mean", "beck"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass(frozen=True)
class GmResult:
    point: np.ndarray
    iterations_used: int
    objective: float
    filtered_count: int = 0
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    kept: Optional[np.ndarray] = field(default=None, repr=False)


def _as_points(points) -> np.ndarray:
    if isinstance(points, np.ndarray) and points.ndim <= 2:
        if points.ndim == 1:
            points = points[:, None]
        if points.size == 0 or points.shape[0] == 0:
            raise EmptyInput("no points")
        return points.reshape(points.shape[0], -1).astype(np.float64, copy=False)
    points = list(points)
    if not points:
        raise EmptyInput("no points")
    flat = [np.asarray(p, dtype=np.float64).ravel(order="F") for p in points]
    d = flat[0].size
    if any(f.size != d for f in flat):
        raise DimensionMismatch("points have different dimensions")
    return np.stack(flat)


def gm_objective(points, z) -> float:
    """Sum of Euclidean distances from ``z`` to every point."""
    P = _as_points(points)
    z = np.asarray(z, dtype=np.float64).ravel(order="F")
    if z.size != P.shape[1]:
        raise DimensionMismatch(f"z has dimension {z.size}, points have {P.shape[1]}")
    return float(np.sqrt(((P - z) ** 2).sum(axis=1)).sum())


def _beck_start(P: np.ndarray, guard: float):
    """Analytic start ``z_p + t_p d_p`` from the best data point.

    Returns ``(z0, optimal)``; ``optimal`` is True when ``z_p`` itself is
    already a geometric median (no descent direction leaves it).
    """
    L = P.shape[0]
    D = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(axis=2))
    p = int(np.argmin(D.sum(axis=1)))
    others = [i for i in range(L) if D[p, i] > guard]
    if not others:
        return P[p].copy(), True
    # gradient at z_p of the objective without its own (non-smooth) term
    R = sum((P[p] - P[i]) / D[p, i] for i in others)
    mult = L - len(others)  # copies of z_p in the set
    nR = np.linalg.norm(R)
    if nR <= mult:
        return P[p].copy(), True
    d = -R / nR
    t = (nR - mult) / sum(1.0 / D[p, i] for i in others)
    return P[p] + t * d, False


def weiszfeld_gm(points, cfg: GmConfig = GmConfig()) -> GmResult:
    """Approximate geometric median by Weiszfeld's fixed-point iteration.

    ``points`` is an (L, d) array or a sequence of equally-sized arrays
    (matrices are flattened column-major). Distances below
    ``denom_guard * scale`` are clamped, where ``scale`` is the largest
    point norm (or 1 if all points are zero).
    """
    P = _as_points(points)
    if not np.all(np.isfinite(P)):
        raise ValueError("points must be finite")
    scale = max(float(np.sqrt((P**2).sum(axis=1)).max()), 1.0)
    guard = cfg.denom_guard * scale
    if cfg.init == "beck":
        z0, optimal = _beck_start(P, guard)
        if optimal:
            obj = gm_objective(P, z0)
            return GmResult(z0, 0, obj, objective_trace=np.array([obj]))
    else:
        z0 = P.mean(axis=0)
    z, its, trace = _kernels.weiszfeld_points(P, z0, cfg.max_iterations, cfg.step_tolerance, guard)
    return GmResult(z, int(its), float(trace[-1]), objective_trace=trace)


def weiszfeld_gm_gram(gram: np.ndarray, cfg: GmConfig = GmConfig()):
    """Weiszfeld iteration expressed through the points' Gram matrix.

    Equivalent to :func:`weiszfeld_gm` with mean initialization, but only
    needs inner products. Returns ``(weights, distances, iterations,
    objective_trace)`` where the median is ``sum_i weights[i] * z_i`` and
    ``distances[j]`` is its distance to point ``j``.
    """
    gram = np.asarray(gram, dtype=np.float64)
    L = gram.shape[0]
    if L == 0:
        raise EmptyInput("no points")
    scale = max(float(np.sqrt(np.abs(np.diag(gram)).max())), 1.0)
    w0 = np.full(L, 1.0 / L)
    return _kernels.weiszfeld_gram(gram, w0, cfg.max_iterations, cfg.step_tolerance, cfg.denom_guard * scale)


def thresholded_gm(points, omega: float, cfg: GmConfig = GmConfig()) -> GmResult:
    """Geometric median of the points whose norm does not exceed ``omega``."""
    if not omega > 0:
        raise ValueError("omega must be positive")
    P = _as_points(points)
    norms = np.sqrt((P**2).sum(axis=1))
    keep = norms <= omega * (1.0 + FILTER_RTOL)
    if not keep.any():
        raise AllFiltered(f"all {P.shape[0]} points exceed omega={omega:.6g}")
    res = weiszfeld_gm(P[keep], cfg)
    return GmResult(
        res.point,
        res.iterations_used,
        res.objective,
        filtered_count=int((~keep).sum()),
        objective_trace=res.objective_trace,
        kept=np.flatnonzero(keep),
    )


def scalar_median(values: Sequence[float]) -> float:
    """Sample median; an even count averages the two central values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("no values")
    return float(np.median(v))
