"""Resilient federated subspace estimators and their non-resilient baselines.

Node data enter as operators ``apply_l(U) = Phi_l @ U``; Byzantine
substitution happens inside :func:`byzfed.fed.run_round`.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, EmptyInput, RankDeficient
from .fed import Adversary, FederationConfig, run_round
from .gm import GmConfig, thresholded_gm, weiszfeld_gm, weiszfeld_gm_gram
from .linalg import (
    DENSE_EIG_MAX_N,
    PowerMethodConfig,
    orthonormalize,
    power_method_topr,
    qr_basis,
    random_basis,
    topr_eig,
)

NodeOperator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EstimatorConfig:
    rank: int
    t_pow: int = 10
    t_gm: int = 10
    omega: Optional[float] = None
    minibatches: Optional[int] = None
    gm_step_tolerance: float = 1e-10
    # "gram" runs Weiszfeld on inner products of the projection matrices,
    # "dense" on their explicit n^2-dimensional vectorizations.
    gm_mode: str = "gram"
    power_tol: Optional[float] = None

    def __post_init__(self):
        if self.rank < 1 or self.t_pow < 1 or self.t_gm < 1:
            raise ConfigInvalid("rank, t_pow and t_gm must be >= 1")
        if self.omega is not None and not self.omega > 0:
            raise ConfigInvalid("omega must be positive")
        if self.gm_mode not in ("gram", "dense"):
            raise ConfigInvalid(f"unknown gm_mode {self.gm_mode!r}")

    @property
    def gm(self) -> GmConfig:
        return GmConfig(max_iterations=self.t_gm, step_tolerance=self.gm_step_tolerance)

    def power(self, seed=None) -> PowerMethodConfig:
        return PowerMethodConfig(self.rank, self.t_pow, seed, self.power_tol)


@dataclass(frozen=True)
class SubspaceEstimate:
    basis: np.ndarray
    best_node: Optional[int] = None
    gm_residual: float = 0.0
    rounds: int = 0
    replaced: tuple = ()  # inputs swapped for random bases after failing QR
    filtered: tuple = field(default=(), repr=False)  # per-round filter counts


def subspace_median(
    node_bases: Sequence[np.ndarray],
    cfg: EstimatorConfig,
    rng: Optional[np.random.Generator] = None,
) -> SubspaceEstimate:
    """Geometric median of projection matrices, reported as the closest input.

    Each input is orthonormalized; an input that fails (rank-deficient or
    non-finite) is replaced by a random orthonormal basis drawn from
    ``rng``. Ties for the closest input go to the lowest index.
    """
    if len(node_bases) == 0:
        raise EmptyInput("no node bases")
    n, r = np.shape(node_bases[0])
    rng = rng if rng is not None else np.random.default_rng(0)
    Us, replaced = [], []
    for i, Uh in enumerate(node_bases):
        if np.shape(Uh) != (n, r):
            raise DimensionMismatch(f"node {i} sent shape {np.shape(Uh)}, expected {(n, r)}")
        try:
            Us.append(orthonormalize(Uh))
        except RankDeficient:
            replaced.append(i)
            Us.append(random_basis(n, r, rng))

    if cfg.gm_mode == "gram":
        # <P_i, P_j>_F = ||U_i^T U_j||_F^2, from one (Lr x Lr) product
        L = len(Us)
        M = np.concatenate(Us, axis=1)
        cross = (M.T @ M).reshape(L, r, L, r)
        gram = (cross**2).sum(axis=(1, 3))
        _, dist, _, _ = weiszfeld_gm_gram(gram, cfg.gm)
    else:
        P = np.stack([(U @ U.T).ravel() for U in Us])
        res = weiszfeld_gm(P, cfg.gm)
        dist = np.sqrt(((P - res.point) ** 2).sum(axis=1))
    best = int(np.argmin(dist))
    return SubspaceEstimate(Us[best], best, float(dist[best]), 1, tuple(replaced))


def federated_subspace_median(
    node_ops: Sequence[NodeOperator],
    n: int,
    cfg: EstimatorConfig,
    fed: Optional[FederationConfig] = None,
    adversary: Optional[Adversary] = None,
    init: Optional[np.ndarray] = None,
    seed: int = 0,
) -> SubspaceEstimate:
    """SubsMed: every node runs its own power method, the center takes the subspace median."""
    fed = fed or FederationConfig(len(node_ops), seed=seed)
    if init is None:
        init = np.random.default_rng(seed).standard_normal((n, cfg.rank))
    pcfg = cfg.power()

    def local(node):
        return power_method_topr(node_ops[node], n, pcfg, init)

    payloads = run_round(fed, local, adversary, state={"init": init})
    est = subspace_median([p.content for p in payloads], cfg, np.random.default_rng([seed, 1]))
    return est


def res_pow_meth(
    node_ops: Sequence[NodeOperator],
    n: int,
    cfg: EstimatorConfig,
    fed: Optional[FederationConfig] = None,
    adversary: Optional[Adversary] = None,
    init: Optional[np.ndarray] = None,
    seed: int = 0,
) -> SubspaceEstimate:
    """Power method whose per-round sum is replaced by a norm-thresholded GM.

    The random start is orthonormalized before the first round so the
    threshold (calibrated for ``||Phi U||_F`` with orthonormal U) applies
    from the first round on. AllFiltered propagates.
    """
    if cfg.omega is None:
        raise ConfigInvalid("ResPowMeth needs omega")
    fed = fed or FederationConfig(len(node_ops), seed=seed)
    r = cfg.rank
    if init is None:
        init = np.random.default_rng(seed).standard_normal((n, r))
    U = orthonormalize(init)
    filtered = []
    for t in range(1, cfg.t_pow + 1):
        payloads = run_round(
            fed, lambda node: node_ops[node](U), adversary, round_index=t, state={"U": U}
        )
        res = thresholded_gm([p.content for p in payloads], cfg.omega, cfg.gm)
        filtered.append(res.filtered_count)
        U = qr_basis(res.point.reshape((n, r), order="F"))
    return SubspaceEstimate(U, None, 0.0, cfg.t_pow, filtered=tuple(filtered))


def subspace_mom(
    node_ops: Sequence[NodeOperator],
    n: int,
    cfg: EstimatorConfig,
    fed: Optional[FederationConfig] = None,
    adversary: Optional[Adversary] = None,
    init: Optional[np.ndarray] = None,
    seed: int = 0,
) -> SubspaceEstimate:
    """Subspace median-of-means.

    One federated power method per minibatch (the batch members' payloads
    are summed before the center's QR), all from the same start, followed
    by the subspace median over the batch estimates.
    """
    L = len(node_ops)
    nb = cfg.minibatches or (fed.minibatches if fed else L)
    if fed is None:
        fed = FederationConfig(L, minibatches=nb, seed=seed)
    elif fed.minibatches != nb:
        fed = FederationConfig(L, fed.byzantine_ids, nb, fed.seed)
    r = cfg.rank
    if init is None:
        init = np.random.default_rng(seed).standard_normal((n, r))
    U0 = orthonormalize(init)
    Ub = [U0] * nb
    for t in range(1, cfg.t_pow + 1):
        payloads = run_round(
            fed,
            lambda node: node_ops[node](Ub[fed.batch_of(node)]),
            adversary,
            round_index=t,
            state={"U_batches": list(Ub)},
        )
        sums = [np.zeros((n, r)) for _ in range(nb)]
        for p in payloads:
            sums[fed.batch_of(p.node_id)] += p.content
        Ub = [qr_basis(S) for S in sums]
    est = subspace_median(Ub, cfg, np.random.default_rng([seed, 1]))
    return SubspaceEstimate(est.basis, est.best_node, est.gm_residual, cfg.t_pow + 1, est.replaced)


def svd_res_cov_est(
    node_matrices: Sequence[np.ndarray], cfg: EstimatorConfig, seed: int = 0
) -> SubspaceEstimate:
    """Geometric median of the vectorized node matrices, then its top-r eigenspace."""
    mats = [np.asarray(M, dtype=np.float64) for M in node_matrices]
    if not mats:
        raise EmptyInput("no node matrices")
    n = mats[0].shape[0]
    if any(M.shape != (n, n) for M in mats):
        raise DimensionMismatch("node matrices must all be n x n")
    res = weiszfeld_gm(np.stack([M.ravel() for M in mats]), cfg.gm)
    G = res.point.reshape(n, n)
    G = (G + G.T) / 2.0
    if n <= DENSE_EIG_MAX_N:
        U = topr_eig(G, cfg.rank)
    else:
        U = power_method_topr(lambda V: G @ V, n, cfg.power(seed))
    return SubspaceEstimate(U, None, 0.0, 1)


def federated_power_method_baseline(
    node_ops: Sequence[NodeOperator],
    n: int,
    cfg: EstimatorConfig,
    init: Optional[np.ndarray] = None,
    seed: int = 0,
) -> SubspaceEstimate:
    """Plain federated power method ``U <- QR(sum_l Phi_l U)``; no attack handling."""
    if init is None:
        init = np.random.default_rng(seed).standard_normal((n, cfg.rank))

    def total(U):
        out = node_ops[0](U)
        for op in node_ops[1:]:
            out = out + op(U)
        return out

    U = power_method_topr(total, n, cfg.power(), init)
    return SubspaceEstimate(U, None, 0.0, cfg.t_pow)
