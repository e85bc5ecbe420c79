"""Federated PCA problem layer: models, Gaussian shards, node covariances
and data-driven parameter estimates."""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateGap, DimensionMismatch, IndivisibleSplit, InvalidSpectrum
from .linalg import qr_basis

# Chosen so the T_pow heuristic gives 10 on the n=1000, r=60, q/L=600
# rank-(r+1) configuration with eps=0.1, where sigma_r/gap*log(n/eps)
# measures 11.3-11.6 across seeds.
T_POW_CONSTANT = 0.85


@dataclass(frozen=True)
class PcaModel:
    n: int
    r: int
    spectrum: np.ndarray = field(repr=False)
    u_star_full: np.ndarray = field(repr=False)
    seed: Optional[int] = None

    @property
    def u_star(self) -> np.ndarray:
        return self.u_star_full[:, : self.r]

    @property
    def phi_star(self) -> np.ndarray:
        return (self.u_star_full * self.spectrum) @ self.u_star_full.T

    @property
    def gap(self) -> float:
        s = self.spectrum
        return float(s[self.r - 1] - (s[self.r] if self.r < self.n else 0.0))


def make_spectrum(spec: Union[str, Sequence[float]], n: int, r: int) -> np.ndarray:
    """``full_rank_15``: r x 15, then 1, 1-1/n, 1-2/n, ...;
    ``low_rank_15``: r x 15, then 1, then zeros; or an explicit list."""
    if isinstance(spec, str):
        s = np.zeros(n)
        s[:r] = 15.0
        if r < n:
            s[r] = 1.0
        if spec == "full_rank_15":
            tail = n - r - 1
            s[r + 1 :] = 1.0 - np.arange(1, tail + 1) / n
        elif spec != "low_rank_15":
            raise InvalidSpectrum(f"unknown spectrum {spec!r}")
        return s
    s = np.asarray(spec, dtype=np.float64)
    if s.shape != (n,):
        raise InvalidSpectrum(f"spectrum needs {n} entries, got {s.size}")
    return s


def generate_pca_model(n: int, r: int, spectrum_spec="low_rank_15", seed: int = 0) -> PcaModel:
    """Phi* = U S U^T with U from orthogonalizing an n x n Gaussian matrix."""
    if not 1 <= r <= n:
        raise DimensionMismatch(f"need 1 <= r <= n, got r={r}, n={n}")
    s = make_spectrum(spectrum_spec, n, r)
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise InvalidSpectrum("spectrum must be non-negative and non-increasing")
    if r < n and not s[r - 1] > s[r]:
        raise InvalidSpectrum(f"no gap after rank {r}")
    U = qr_basis(np.random.default_rng(seed).standard_normal((n, n)))
    return PcaModel(n, r, s, U, seed)


@dataclass(frozen=True)
class PcaShards:
    shards: List[np.ndarray]

    @property
    def num_nodes(self) -> int:
        return len(self.shards)

    @property
    def q_tilde(self) -> int:
        return self.shards[0].shape[1]

    def full(self) -> np.ndarray:
        return np.concatenate(self.shards, axis=1)


def sample_shards(model: PcaModel, q: int, L: int, seed) -> PcaShards:
    """q columns from N(0, Phi*) as U S^{1/2} g, split into L contiguous blocks."""
    if L < 1 or q % L:
        raise IndivisibleSplit(f"L={L} must divide q={q}")
    k = int(np.count_nonzero(model.spectrum))
    rng = np.random.default_rng(seed)
    if k == 0:
        D = np.zeros((model.n, q))
    else:
        g = rng.standard_normal((k, q))
        D = model.u_star_full[:, :k] @ (np.sqrt(model.spectrum[:k])[:, None] * g)
    qt = q // L
    return PcaShards([D[:, i * qt : (i + 1) * qt].copy() for i in range(L)])


def node_covariance(D: np.ndarray) -> np.ndarray:
    return D @ D.T / D.shape[1]


def node_operator(D: np.ndarray):
    """``U -> D D^T U / q`` without forming the n x n covariance."""
    qt = D.shape[1]
    return lambda U: D @ (D.T @ U) / qt


def node_operators(shards: PcaShards):
    return [node_operator(D) for D in shards.shards]


@dataclass(frozen=True)
class PcaParamEstimates:
    sigma_r_hat: float
    delta_hat: float
    sigma_1_hat: float
    r_selected: Optional[int] = None
    t_pow: Optional[int] = None


def energy_rank(eigs: np.ndarray, energy: float = 0.9) -> int:
    """Smallest r whose top-r eigenvalues hold ``energy`` of the total."""
    eigs = np.sort(np.asarray(eigs))[::-1]
    c = np.cumsum(eigs)
    return int(np.searchsorted(c, energy * c[-1] * (1 - 1e-12)) + 1)


def estimate_pca_params(
    shards: Union[PcaShards, Sequence[np.ndarray]],
    r: int,
    eps: float = 0.1,
    energy: Optional[float] = None,
    t_pow_constant: float = T_POW_CONSTANT,
) -> PcaParamEstimates:
    """Per-node spectra of Phi_l aggregated as max sigma_r, min gap, max sigma_1.

    Also returns ``T_pow = ceil(C * sigma_r / gap * log(n / eps))`` and,
    when ``energy`` is given, the largest per-node energy-rule rank.
    """
    mats = shards.shards if isinstance(shards, PcaShards) else list(shards)
    n = mats[0].shape[0]
    sig_r, gaps, sig_1, ranks = [], [], [], []
    for D in mats:
        qt = D.shape[1]
        if r + 1 > min(n, qt):
            raise DimensionMismatch(f"need r+1 <= min(n, q_l), got r={r}, shape {D.shape}")
        eig = np.linalg.svd(D, compute_uv=False) ** 2 / qt
        sig_1.append(eig[0])
        sig_r.append(eig[r - 1])
        gaps.append(eig[r - 1] - eig[r])
        if energy is not None:
            ranks.append(energy_rank(eig, energy))
    delta = float(min(gaps))
    if not delta > 0:
        raise DegenerateGap(f"estimated gap {delta:.3g} is not positive")
    s_r = float(max(sig_r))
    t_pow = max(1, math.ceil(t_pow_constant * s_r / delta * math.log(n / eps)))
    return PcaParamEstimates(s_r, delta, float(max(sig_1)), max(ranks) if ranks else None, t_pow)
