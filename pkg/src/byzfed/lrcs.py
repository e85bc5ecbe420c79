"""Horizontally federated low-rank column-wise sensing (LRCS).

Node ``l`` holds ``m_tilde`` rows of every column's measurement system:
``(y_k)_l = (A_k)_l x*_k`` for all ``k``. Sensing matrices are stored as
one array of shape ``(L, q, m_tilde, n)`` so a node's data is a view.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np

from . import _kernels
from .attacks import orthogonal_attack
from .errors import ConfigInvalid, DimensionMismatch, IllConditioned, IndivisibleSplit
from .estimators import EstimatorConfig, SubspaceEstimate, subspace_median
from .fed import Adversary, AdversaryView, FederationConfig, run_round
from .gm import GmConfig, scalar_median, thresholded_gm, weiszfeld_gm
from .linalg import PowerMethodConfig, orthonormalize, power_method_topr, qr_basis, sd_F

# Smallest singular value of (A_k)_l U below which least squares is refused.
LS_MIN_SV = 1e-10


@dataclass(frozen=True)
class LrcsInstance:
    u_star: np.ndarray = field(repr=False)  # n x r
    b_star: np.ndarray = field(repr=False)  # r x q
    A: np.ndarray = field(repr=False)  # L x q x m_tilde x n
    Y: np.ndarray = field(repr=False)  # L x q x m_tilde
    kappa: float = 1.0
    mu: float = 1.0
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return self.u_star.shape[0]

    @property
    def r(self) -> int:
        return self.u_star.shape[1]

    @property
    def q(self) -> int:
        return self.b_star.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.A.shape[0]

    @property
    def m_tilde(self) -> int:
        return self.A.shape[2]

    @property
    def m(self) -> int:
        return self.m_tilde * self.num_nodes

    @property
    def x_star(self) -> np.ndarray:
        return self.u_star @ self.b_star

    @property
    def sigma_max(self) -> float:
        return float(np.linalg.svd(self.b_star, compute_uv=False)[0])

    def node(self, l: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.A[l], self.Y[l]


def generate_lrcs_truth(n: int, q: int, r: int, seed) -> Tuple[np.ndarray, np.ndarray]:
    """U* from orthogonalizing an n x r Gaussian matrix, columns of B* i.i.d. N(0, I_r)."""
    if not 1 <= r <= min(n, q):
        raise DimensionMismatch(f"need 1 <= r <= min(n, q), got r={r}")
    rng = np.random.default_rng(seed)
    U = qr_basis(rng.standard_normal((n, r)))
    B = rng.standard_normal((r, q))
    return U, B


def truth_constants(b_star: np.ndarray) -> Tuple[float, float]:
    """Condition number and incoherence ``max_k ||b_k|| / (sqrt(r/q) sigma_max)``."""
    r, q = b_star.shape
    s = np.linalg.svd(b_star, compute_uv=False)
    kappa = float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    mu = float(np.linalg.norm(b_star, axis=0).max() / (math.sqrt(r / q) * s[0])) if s[0] > 0 else 0.0
    return kappa, mu


def generate_lrcs_instance(
    n: int,
    q: int,
    r: int,
    m: int,
    L: int,
    seed,
    truth: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> LrcsInstance:
    """Gaussian sensing matrices and noiseless measurements for a rank-r X*.

    ``truth = (U*, B*)`` keeps the ground truth fixed across Monte-Carlo
    runs; otherwise it is drawn from ``seed`` as well.
    """
    if L < 1 or m % L:
        raise IndivisibleSplit(f"L={L} must divide m={m}")
    if truth is None:
        truth = generate_lrcs_truth(n, q, r, [seed, 0] if np.isscalar(seed) else seed)
    U, B = truth
    if U.shape != (n, r) or B.shape != (r, q):
        raise DimensionMismatch("truth shapes do not match (n, q, r)")
    mt = m // L
    rng = np.random.default_rng([seed, 1] if np.isscalar(seed) else seed)
    A = rng.standard_normal((L, q, mt, n))
    X = U @ B
    Y = np.einsum("lkin,nk->lki", A, X)
    kappa, mu = truth_constants(B)
    return LrcsInstance(U, B, A, Y, kappa, mu, seed)


def truncate_measurements(y: np.ndarray, alpha: float) -> np.ndarray:
    """Zero the entries with ``y_i**2 > alpha``."""
    y = np.asarray(y, dtype=np.float64)
    return np.where(y * y <= alpha, y, 0.0)


def node_alpha(Y_l: np.ndarray, c_tilde: float) -> float:
    """``c_tilde * sum_k ||(y_k)_l||^2 / (m_tilde q)`` for Y_l of shape (q, m_tilde)."""
    Y_l = np.asarray(Y_l, dtype=np.float64)
    q, mt = Y_l.shape
    return float(c_tilde * (Y_l**2).sum() / (mt * q))


def init_matrix_node(A_l: np.ndarray, Y_l: np.ndarray, alpha: float) -> np.ndarray:
    """n x q matrix whose column k is ``(A_k)_l^T trunc((y_k)_l, alpha)``."""
    return _kernels.backproject(A_l, truncate_measurements(Y_l, alpha))


def estimate_node_constants(A_l: np.ndarray, Y_l: np.ndarray, r: int) -> Tuple[float, float]:
    """Node estimates ``(kappa_l, sigma_l)`` from the untruncated init matrix.

    ``E[(X0)_l] = m_tilde X*``, so its top-r singular values divided by
    m_tilde estimate those of X*. Noise inflates the smaller ones less
    than it inflates their ratio, which only makes alpha more lenient.
    """
    mt = A_l.shape[1]
    s = np.linalg.svd(_kernels.backproject(A_l, Y_l), compute_uv=False)[:r] / mt
    return float(s[0] / s[-1]), float(s[0])


# |  Spectral initialization  |


@dataclass(frozen=True)
class InitConfig:
    rank: int
    c_tilde: Optional[float] = None  # None: 9 kappa^2 mu^2
    mu: float = 2.0
    kappa: Optional[float] = None  # None: max of node estimates
    t_pow: int = 10
    t_gm: int = 10
    minibatches: Optional[int] = None  # None or L: subspace median init

    def __post_init__(self):
        if self.c_tilde is not None and not self.c_tilde > 0:
            raise ConfigInvalid("c_tilde must be positive")
        if self.t_pow < 1 or self.t_gm < 1 or self.rank < 1:
            raise ConfigInvalid("rank, t_pow and t_gm must be >= 1")


@dataclass(frozen=True)
class InitResult:
    estimate: SubspaceEstimate
    alpha: float
    kappa_hat: float
    sigma_hat: float  # max over nodes of the sigma_1 estimate


class LrcsInitAttack:
    """Colluding payloads for the initialization exchanges.

    Threshold stage: a scalar ``scale`` times the largest honest value,
    pushing the median up. Matrix stages: the orthogonal attack against
    the honest sum at the honest payloads' average norm.
    """

    def __init__(self, scale: float = 1e3):
        self.scale = scale

    def __call__(self, view: AdversaryView):
        honest = list(view.honest_payloads.values())
        if view.state.get("stage") == "alpha":
            return self.scale * max(float(v) for v in honest)
        total = np.sum(honest, axis=0)
        size = float(np.mean([np.linalg.norm(h) for h in honest]))
        return orthogonal_attack(total, size)


def _init_prelude(inst: LrcsInstance, cfg: InitConfig, fed: FederationConfig, adversary):
    consts = [estimate_node_constants(*inst.node(l), cfg.rank) for l in range(inst.num_nodes)]
    kappa = cfg.kappa if cfg.kappa is not None else max(k for k, _ in consts)
    sigma = max(s for _, s in consts)
    c_tilde = cfg.c_tilde if cfg.c_tilde is not None else 9.0 * kappa**2 * cfg.mu**2
    payloads = run_round(
        fed, lambda l: node_alpha(inst.Y[l], c_tilde), adversary, state={"stage": "alpha"}
    )
    alpha = scalar_median([p.content for p in payloads])
    mats = [init_matrix_node(inst.A[l], inst.Y[l], alpha) for l in range(inst.num_nodes)]
    return mats, alpha, kappa, sigma


def spectral_init_median(
    inst: LrcsInstance,
    cfg: InitConfig,
    fed: Optional[FederationConfig] = None,
    adversary: Optional[Adversary] = None,
    seed: int = 0,
) -> InitResult:
    """Every node's top-r left singular vectors of its truncated init matrix, then subspace median."""
    fed = fed or FederationConfig(inst.num_nodes, seed=seed)
    mats, alpha, kappa, sigma = _init_prelude(inst, cfg, fed, adversary)
    start = np.random.default_rng([seed, 2]).standard_normal((inst.n, cfg.rank))
    pcfg = PowerMethodConfig(cfg.rank, cfg.t_pow)

    def local(l):
        X = mats[l]
        return power_method_topr(lambda V: X @ (X.T @ V), inst.n, pcfg, start)

    payloads = run_round(fed, local, adversary, state={"stage": "basis"})
    ecfg = EstimatorConfig(cfg.rank, t_pow=cfg.t_pow, t_gm=cfg.t_gm)
    est = subspace_median([p.content for p in payloads], ecfg, np.random.default_rng([seed, 3]))
    return InitResult(est, alpha, kappa, sigma)


def spectral_init_mom(
    inst: LrcsInstance,
    cfg: InitConfig,
    fed: Optional[FederationConfig] = None,
    adversary: Optional[Adversary] = None,
    seed: int = 0,
) -> InitResult:
    """One two-exchange federated power method per minibatch, then subspace median.

    Per round and batch: nodes send ``V_l = X_l^T U``, the center sums them
    to ``V``, nodes send ``X_l V`` and the center orthonormalizes the sum.
    The Byzantine set is the same in every exchange.
    """
    L = inst.num_nodes
    nb = cfg.minibatches or L
    if fed is None:
        fed = FederationConfig(L, minibatches=nb, seed=seed)
    elif fed.minibatches != nb:
        fed = FederationConfig(L, fed.byzantine_ids, nb, fed.seed)
    mats, alpha, kappa, sigma = _init_prelude(inst, cfg, fed, adversary)
    start = orthonormalize(np.random.default_rng([seed, 2]).standard_normal((inst.n, cfg.rank)))
    Ub = [start] * nb
    for t in range(1, cfg.t_pow + 1):
        right = run_round(
            fed, lambda l: mats[l].T @ Ub[fed.batch_of(l)], adversary,
            round_index=2 * t - 1, state={"stage": "right"},
        )
        Vb = [np.zeros((inst.q, cfg.rank)) for _ in range(nb)]
        for p in right:
            Vb[fed.batch_of(p.node_id)] += p.content
        left = run_round(
            fed, lambda l: mats[l] @ Vb[fed.batch_of(l)], adversary,
            round_index=2 * t, state={"stage": "left"},
        )
        sums = [np.zeros((inst.n, cfg.rank)) for _ in range(nb)]
        for p in left:
            sums[fed.batch_of(p.node_id)] += p.content
        Ub = [qr_basis(S) for S in sums]
    ecfg = EstimatorConfig(cfg.rank, t_pow=cfg.t_pow, t_gm=cfg.t_gm)
    est = subspace_median(Ub, ecfg, np.random.default_rng([seed, 3]))
    return InitResult(est, alpha, kappa, sigma)


# |  AltGDmin iterations  |


def ls_step(U: np.ndarray, A_l: np.ndarray, Y_l: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Column-wise least squares ``b_k = ((A_k)_l U)^+ (y_k)_l`` via QR.

    Returns ``(B_l, X_l)`` with B_l of shape (r, q) and ``X_l = U B_l``.
    """
    q, mt, n = A_l.shape
    if mt < U.shape[1]:
        raise IllConditioned(f"m_tilde={mt} < r={U.shape[1]}: least squares underdetermined")
    B, _, min_sv = _kernels.lrcs_node_step(A_l, Y_l, U)
    if not min_sv >= LS_MIN_SV:
        raise IllConditioned(f"smallest singular value of A_k U is {min_sv:.3g}")
    return B, U @ B


def node_gradient(U: np.ndarray, B_l: np.ndarray, A_l: np.ndarray, Y_l: np.ndarray) -> np.ndarray:
    """``sum_k (A_k)_l^T ((A_k)_l U b_k - (y_k)_l) b_k^T``."""
    q, mt, n = A_l.shape
    AU = (A_l.reshape(q * mt, n) @ U).reshape(q, mt, -1)
    res = np.einsum("kir,rk->ki", AU, B_l) - Y_l
    W = np.einsum("kin,ki->nk", A_l, res)
    return W @ B_l.T


def node_objective(U: np.ndarray, B_l: np.ndarray, A_l: np.ndarray, Y_l: np.ndarray) -> float:
    """``sum_k ||(y_k)_l - (A_k)_l U b_k||^2 / 2``, whose U-gradient is :func:`node_gradient`."""
    q, mt, n = A_l.shape
    AU = (A_l.reshape(q * mt, n) @ U).reshape(q, mt, -1)
    res = np.einsum("kir,rk->ki", AU, B_l) - Y_l
    return 0.5 * float((res**2).sum())


@dataclass(frozen=True)
class GdConfig:
    eta: float
    iterations: int
    omega: Optional[float] = None  # None: no norm filter
    t_gm: int = 10
    minibatches: Optional[int] = None
    sample_splitting: bool = False
    eps: Optional[float] = None  # stop once SD_F / sqrt(r) < eps (needs ground truth)

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigInvalid("eta must be positive")
        if self.iterations < 1:
            raise ConfigInvalid("iterations must be >= 1")
        if self.omega is not None and not self.omega > 0:
            raise ConfigInvalid("omega must be positive")


@dataclass(frozen=True)
class AltGdMinState:
    u: np.ndarray
    b: Optional[Tuple[np.ndarray, ...]] = None  # per-node B_l from the last round
    trace: Tuple[float, ...] = ()  # Error = SD_F(U*, U_t) / sqrt(r), t = 0, 1, ...
    filtered: Tuple[int, ...] = ()
    iteration: int = 0


def split_rows(m_tilde: int, parts: int, r: int) -> list:
    """Disjoint row blocks for sample splitting; each needs at least r rows."""
    size = m_tilde // parts
    if size < r:
        raise ConfigInvalid(
            f"sample splitting needs {parts} blocks of >= r={r} rows, only {m_tilde} rows per node"
        )
    return [slice(i * size, (i + 1) * size) for i in range(parts)]


def _error(inst: LrcsInstance, U: np.ndarray) -> float:
    return sd_F(inst.u_star, U) / math.sqrt(inst.r)


def gd_round(
    state: AltGdMinState,
    inst: LrcsInstance,
    cfg: GdConfig,
    fed: FederationConfig,
    adversary: Optional[Adversary] = None,
    rows: Optional[slice] = None,
) -> AltGdMinState:
    """One Byz-AltGDmin iteration: node LS + gradient, minibatch sums, thresholded GM, QR step."""
    U = state.u
    sl = rows if rows is not None else slice(None)
    Bs = {}

    def compute(l):
        A_l, Y_l = inst.A[l][:, sl, :], inst.Y[l][:, sl]
        if A_l.shape[1] < U.shape[1]:
            raise IllConditioned(f"{A_l.shape[1]} rows < r={U.shape[1]}")
        B, grad, min_sv = _kernels.lrcs_node_step(A_l, Y_l, U)
        if not min_sv >= LS_MIN_SV:
            raise IllConditioned(f"smallest singular value of A_k U is {min_sv:.3g}")
        Bs[l] = B
        return grad

    t = state.iteration + 1
    payloads = run_round(fed, compute, adversary, round_index=t, state={"U": U})
    nb = fed.minibatches
    sums = [np.zeros_like(U) for _ in range(nb)]
    for p in payloads:
        sums[fed.batch_of(p.node_id)] += p.content
    gm_cfg = GmConfig(max_iterations=cfg.t_gm)
    if cfg.omega is None:
        res = weiszfeld_gm(sums, gm_cfg)
        n_filtered = 0
    else:
        res = thresholded_gm(sums, cfg.omega, gm_cfg)
        n_filtered = res.filtered_count
    grad = res.point.reshape(U.shape, order="F")
    rows_used = inst.m_tilde if rows is None else len(range(*sl.indices(inst.m_tilde)))
    U_new = qr_basis(U - cfg.eta / (fed.batch_size * rows_used) * grad)
    good_b = tuple(Bs[l] for l in sorted(Bs) if l not in fed.byzantine_ids)
    return AltGdMinState(
        U_new,
        good_b,
        state.trace + (_error(inst, U_new),),
        state.filtered + (n_filtered,),
        t,
    )


@dataclass(frozen=True)
class AltGdMinResult:
    state: AltGdMinState
    init: InitResult
    column_errors: np.ndarray = field(repr=False)  # ||x_k - x*_k|| / ||x*_k|| from a good node

    @property
    def trace(self) -> Tuple[float, ...]:
        return self.state.trace


def default_omega(inst_m_tilde: int, r: int, kappa_hat: float, sigma_hat: float, rho: int = 1) -> float:
    """Gradient threshold ``rho * m_tilde * 14 sqrt(r) delta0 sigma_hat^2``, delta0 = 0.1/kappa^2."""
    delta0 = 0.1 / kappa_hat**2
    return rho * inst_m_tilde * 14.0 * math.sqrt(r) * delta0 * sigma_hat**2


def byz_altgdmin(
    inst: LrcsInstance,
    init_cfg: InitConfig,
    gd_cfg: GdConfig,
    fed: Optional[FederationConfig] = None,
    init_adversary: Optional[Adversary] = None,
    gd_adversary: Optional[Adversary] = None,
    seed: int = 0,
    tune: Optional[Callable[[InitResult, GdConfig], GdConfig]] = None,
) -> AltGdMinResult:
    """Resilient spectral initialization followed by thresholded-GM AltGDmin.

    ``init_cfg.minibatches`` picks the median (None or L) or MoM init;
    ``gd_cfg.minibatches`` the gradient batching. ``tune`` may rewrite the
    GD config from the initialization's estimates (step size, threshold).
    With sample splitting the node rows are cut into ``iterations + 1``
    disjoint blocks, the first feeding the initialization.
    """
    L = inst.num_nodes
    fed = fed or FederationConfig(L, seed=seed)
    blocks = None
    if gd_cfg.sample_splitting:
        blocks = split_rows(inst.m_tilde, gd_cfg.iterations + 1, inst.r)
        init_inst = replace(inst, A=inst.A[:, :, blocks[0], :], Y=inst.Y[:, :, blocks[0]])
    else:
        init_inst = inst
    if init_cfg.minibatches and init_cfg.minibatches != L:
        init_fed = FederationConfig(L, fed.byzantine_ids, init_cfg.minibatches, fed.seed)
        init = spectral_init_mom(init_inst, init_cfg, init_fed, init_adversary, seed)
    else:
        init_fed = FederationConfig(L, fed.byzantine_ids, None, fed.seed)
        init = spectral_init_median(init_inst, init_cfg, init_fed, init_adversary, seed)
    if tune is not None:
        gd_cfg = tune(init, gd_cfg)

    gfed = FederationConfig(L, fed.byzantine_ids, gd_cfg.minibatches or L, fed.seed)
    U0 = init.estimate.basis
    state = AltGdMinState(U0, None, (_error(inst, U0),))
    for t in range(gd_cfg.iterations):
        rows = blocks[t + 1] if blocks else None
        state = gd_round(state, inst, gd_cfg, gfed, gd_adversary, rows)
        if gd_cfg.eps is not None and state.trace[-1] < gd_cfg.eps:
            break
    X = state.u @ state.b[0]
    Xs = inst.x_star
    col_err = np.linalg.norm(X - Xs, axis=0) / np.linalg.norm(Xs, axis=0)
    return AltGdMinResult(state, init, col_err)


def altgdmin_plain(
    inst: LrcsInstance,
    init_cfg: InitConfig,
    gd_cfg: GdConfig,
    seed: int = 0,
    tune: Optional[Callable[[InitResult, GdConfig], GdConfig]] = None,
) -> AltGdMinResult:
    """Basic federated AltGDmin without attack handling.

    Pooled truncation threshold, federated power method on the summed
    init matrices, and plain gradient sums ``U <- QR(U - eta/m sum_l grad_l)``.
    """
    L = inst.num_nodes
    consts = [estimate_node_constants(*inst.node(l), init_cfg.rank) for l in range(L)]
    kappa = init_cfg.kappa if init_cfg.kappa is not None else max(k for k, _ in consts)
    c_tilde = init_cfg.c_tilde if init_cfg.c_tilde is not None else 9.0 * kappa**2 * init_cfg.mu**2
    alpha = float(np.mean([node_alpha(inst.Y[l], c_tilde) for l in range(L)]))
    mats = [init_matrix_node(inst.A[l], inst.Y[l], alpha) for l in range(L)]

    def apply(V):
        right = sum(X.T @ V for X in mats)
        return sum(X @ right for X in mats)

    start = np.random.default_rng([seed, 2]).standard_normal((inst.n, init_cfg.rank))
    U = power_method_topr(apply, inst.n, PowerMethodConfig(init_cfg.rank, init_cfg.t_pow), start)
    est = SubspaceEstimate(U, None, 0.0, init_cfg.t_pow)
    init = InitResult(est, alpha, kappa, max(s for _, s in consts))
    if tune is not None:
        gd_cfg = tune(init, gd_cfg)

    state = AltGdMinState(U, None, (_error(inst, U),))
    for t in range(gd_cfg.iterations):
        grads, Bs = [], []
        for l in range(L):
            B, grad, min_sv = _kernels.lrcs_node_step(inst.A[l], inst.Y[l], state.u)
            if not min_sv >= LS_MIN_SV:
                raise IllConditioned(f"smallest singular value of A_k U is {min_sv:.3g}")
            grads.append(grad)
            Bs.append(B)
        U_new = qr_basis(state.u - gd_cfg.eta / inst.m * np.sum(grads, axis=0))
        state = AltGdMinState(U_new, tuple(Bs), state.trace + (_error(inst, U_new),), state.filtered + (0,), t + 1)
        if gd_cfg.eps is not None and state.trace[-1] < gd_cfg.eps:
            break
    X = state.u @ state.b[0]
    Xs = inst.x_star
    col_err = np.linalg.norm(X - Xs, axis=0) / np.linalg.norm(Xs, axis=0)
    return AltGdMinResult(state, init, col_err)
