"""Byzantine-resilient federated subspace learning: PCA and low-rank column-wise sensing."""

from .attacks import AttackKind, AttackParams, PayloadAttack
from .errors import *  # noqa: F401,F403
from .estimators import (
    EstimatorConfig,
    SubspaceEstimate,
    federated_power_method_baseline,
    federated_subspace_median,
    res_pow_meth,
    subspace_median,
    subspace_mom,
    svd_res_cov_est,
)
from .fed import FederationConfig, run_round, spread_byzantine_ids
from .gm import GmConfig, GmResult, scalar_median, thresholded_gm, weiszfeld_gm
from .linalg import orthonormalize, power_method_topr, qr_basis, sd_2, sd_F

__version__ = "0.1.0"
