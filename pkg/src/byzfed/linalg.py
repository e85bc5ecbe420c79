"""Dense linear-algebra primitives: QR bases, projections, subspace distances
and the power method for top-r eigenspaces."""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, RankDeficient

RANK_RTOL = 1e-12
DENSE_EIG_MAX_N = 512


@dataclass(frozen=True)
class PowerMethodConfig:
    rank: int
    iterations: int = 10
    seed: Optional[int] = None
    # Early exit when SD_F between successive iterates drops below this.
    tol: Optional[float] = None

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations (T_pow) must be >= 1")


def qr_basis(M: np.ndarray) -> np.ndarray:
    """Q factor of a thin QR with the diagonal of R made non-negative.

    No rank check: for rank-deficient input the Householder Q is still
    orthonormal, its extra columns are just arbitrary.
    """
    Q, R = np.linalg.qr(M)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def orthonormalize(M: np.ndarray) -> np.ndarray:
    """Orthonormal basis for the column span of ``M`` (QR, diag(R) >= 0).

    Raises RankDeficient when the smallest singular value of ``M`` is not
    above ``1e-12`` times the largest, or when ``M`` has non-finite entries.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {M.shape}")
    if M.shape[1] > M.shape[0]:
        raise RankDeficient(f"{M.shape[1]} columns cannot be independent in R^{M.shape[0]}")
    if not np.all(np.isfinite(M)):
        raise RankDeficient("matrix has non-finite entries")
    Q, R = np.linalg.qr(M)
    # singular values of R equal those of M
    sv = np.linalg.svd(R, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] <= RANK_RTOL * sv[0]:
        raise RankDeficient(f"smallest/largest singular value ratio {sv[-1] / max(sv[0], 1e-300):.3e}")
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def random_basis(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    return qr_basis(rng.standard_normal((n, r)))


def projection(U: np.ndarray) -> np.ndarray:
    return U @ U.T


def _check_pair(U1, U2):
    if U1.shape[0] != U2.shape[0]:
        raise DimensionMismatch(f"ambient dimensions differ: {U1.shape[0]} vs {U2.shape[0]}")


def _residual(U1, U2):
    return U2 - U1 @ (U1.T @ U2)


def sd_F(U1: np.ndarray, U2: np.ndarray) -> float:
    """Frobenius subspace distance ``||(I - U1 U1^T) U2||_F``."""
    _check_pair(U1, U2)
    return float(np.linalg.norm(_residual(U1, U2)))


def sd_2(U1: np.ndarray, U2: np.ndarray) -> float:
    """Spectral subspace distance ``||(I - U1 U1^T) U2||_2``."""
    _check_pair(U1, U2)
    return float(np.linalg.norm(_residual(U1, U2), 2))


def power_method_topr(
    apply: Callable[[np.ndarray], np.ndarray],
    n: int,
    cfg: PowerMethodConfig,
    init: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Top-r eigenspace of a symmetric PSD operator by subspace iteration.

    ``apply`` maps an (n, r) matrix U to Phi @ U. The start is ``init`` if
    given (the shared U_rand of a Monte-Carlo run), otherwise a Gaussian
    matrix drawn from ``cfg.seed``. Each iterate is orthonormalized;
    RankDeficient propagates if the operator collapses the iterate.
    """
    r = cfg.rank
    if r > n:
        raise DimensionMismatch(f"rank {r} exceeds dimension {n}")
    if init is None:
        init = np.random.default_rng(cfg.seed).standard_normal((n, r))
    elif init.shape != (n, r):
        raise DimensionMismatch(f"init has shape {init.shape}, expected {(n, r)}")
    U = orthonormalize(init)
    for _ in range(cfg.iterations):
        U_next = orthonormalize(apply(U))
        done = cfg.tol is not None and sd_F(U, U_next) < cfg.tol
        U = U_next
        if done:
            break
    return U


def topr_left_singular(
    D: np.ndarray, cfg: PowerMethodConfig, init: Optional[np.ndarray] = None
) -> np.ndarray:
    """Top-r left singular vectors of D via the power method on ``v -> D(D^T v)``."""
    n, q = D.shape
    if cfg.rank > min(n, q):
        raise DimensionMismatch(f"rank {cfg.rank} exceeds min{D.shape}")
    return power_method_topr(lambda U: D @ (D.T @ U), n, cfg, init)


def topr_eig(Phi: np.ndarray, r: int) -> np.ndarray:
    """Exact top-r eigenvectors of a symmetric matrix (dense eigh)."""
    w, V = np.linalg.eigh((Phi + Phi.T) / 2.0)
    order = np.argsort(w)[::-1][:r]
    return qr_basis(V[:, order])


def topr_svd(D: np.ndarray, r: int) -> np.ndarray:
    """Exact top-r left singular vectors (dense SVD)."""
    Uf, _, _ = np.linalg.svd(D, full_matrices=False)
    return Uf[:, :r].copy()
