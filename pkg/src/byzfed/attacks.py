"""Byzantine payload generators and adversary callbacks built from them."""

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyInput, RankDeficient
from .fed import AdversaryView
from .linalg import orthonormalize, qr_basis


class AttackKind(str, enum.Enum):
    NONE = "none"
    ORTHOGONAL = "orthogonal"
    ONES = "ones"
    ALTERNATING = "alternating"
    REVERSE_GRADIENT = "reverse_gradient"

    @classmethod
    def parse(cls, value) -> "AttackKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"rev": "reverse_gradient", "orth": "orthogonal", "alt": "alternating", "": "none"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class AttackParams:
    c_attack: float
    omega: float
    rev_multiplier: float = 10.0

    def __post_init__(self):
        if not (self.c_attack > 0 and self.omega > 0):
            raise ValueError("c_attack and omega must be positive")

    @classmethod
    def for_budget(cls, omega: float, n: int, r: int, rev_multiplier: float = 10.0) -> "AttackParams":
        """Scale constant attacks to Frobenius norm ``0.9 * omega``."""
        return cls(0.9 * omega / np.sqrt(n * r), omega, rev_multiplier)


def orthogonal_attack(honest_aggregate: np.ndarray, omega: float) -> np.ndarray:
    """An n x r matrix of Frobenius norm ``omega`` orthogonal to the aggregate's span.

    Uses the first r columns of the QR factor of ``I - U U^T`` (U the
    aggregate's orthonormal basis). Householder QR is column-sequential, so
    those columns equal the QR factor of the first r columns alone.
    """
    n, r = honest_aggregate.shape
    if 2 * r > n:
        raise ValueError(f"need r <= n - r, got n={n}, r={r}")
    Ut = orthonormalize(honest_aggregate)
    M = -Ut @ Ut[:r, :].T
    M[np.arange(r), np.arange(r)] += 1.0
    try:
        U_perp = orthonormalize(M)
    except RankDeficient:
        # the first r coordinate axes lie (almost) inside span(Ut)
        full = np.linalg.svd(Ut, full_matrices=True)[0]
        U_perp = qr_basis(full[:, r : 2 * r])
    return (omega / np.sqrt(r)) * U_perp


def ones_attack(n: int, r: int, c_attack: float) -> np.ndarray:
    return np.full((n, r), -float(c_attack))


def alternating_attack(n: int, r: int, c_attack: float) -> np.ndarray:
    i = np.arange(n)[:, None]
    j = np.arange(r)[None, :]
    return float(c_attack) * np.where((i + j) % 2 == 0, 1.0, -1.0)


def reverse_gradient_attack(honest_gradients: Sequence[np.ndarray], C: float = 10.0) -> np.ndarray:
    grads = list(honest_gradients)
    if not grads:
        raise EmptyInput("no gradients to reverse")
    return -float(C) * np.mean(np.stack(grads), axis=0)


class PayloadAttack:
    """Adversary callback producing one of the matrix attacks each round.

    All Byzantine nodes send the same payload (they collude). ORTHOGONAL
    is recomputed from the round's honest payloads every time it is
    called; callers that want it fixed for a run call it once.
    REVERSE_GRADIENT averages the true payloads of all nodes, Byzantine
    ones included, through the view's omniscient ``honest_compute``.
    """

    def __init__(self, kind, params: AttackParams, shape: Optional[tuple] = None):
        self.kind = AttackKind.parse(kind)
        self.params = params
        self.shape = shape

    def __call__(self, view: AdversaryView):
        k = self.kind
        honest = [np.asarray(p) for p in view.honest_payloads.values()]
        shape = self.shape or (honest[0].shape if honest else None)
        if k is AttackKind.NONE:
            return {i: view.honest_compute(i) for i in view.byzantine_ids}
        if k is AttackKind.ONES:
            return ones_attack(*shape, self.params.c_attack)
        if k is AttackKind.ALTERNATING:
            return alternating_attack(*shape, self.params.c_attack)
        if k is AttackKind.ORTHOGONAL:
            return orthogonal_attack(np.sum(honest, axis=0), self.params.omega)
        if k is AttackKind.REVERSE_GRADIENT:
            every = honest + [np.asarray(view.honest_compute(i)) for i in sorted(view.byzantine_ids)]
            return reverse_gradient_attack(every, self.params.rev_multiplier)
        raise ValueError(f"unsupported attack {k}")  # pragma: no cover
