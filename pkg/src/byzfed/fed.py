"""Synchronous federation simulator with an omniscient-adversary hook.

Node ids are 0-based everywhere except :func:`minibatch_index`, which
mirrors the 1-based ``(batch, within-batch)`` indexing formula.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Union

import numpy as np

from .errors import ConfigInvalid, NodeComputeError, OutOfRange

Payload = Union[np.ndarray, float]


def spread_byzantine_ids(num_nodes: int, num_byz: int) -> FrozenSet[int]:
    """Evenly spaced Byzantine ids, so consecutive minibatches are hit first."""
    if num_byz == 0:
        return frozenset()
    return frozenset(int(i * num_nodes // num_byz) for i in range(num_byz))


@dataclass(frozen=True)
class FederationConfig:
    num_nodes: int
    byzantine_ids: FrozenSet[int] = frozenset()
    minibatches: Optional[int] = None  # defaults to num_nodes (no batching)
    seed: int = 0

    def __post_init__(self):
        L = self.num_nodes
        if L < 1:
            raise ConfigInvalid("num_nodes must be >= 1")
        object.__setattr__(self, "byzantine_ids", frozenset(int(i) for i in self.byzantine_ids))
        if self.minibatches is None:
            object.__setattr__(self, "minibatches", L)
        if not all(0 <= i < L for i in self.byzantine_ids):
            raise ConfigInvalid(f"byzantine ids {sorted(self.byzantine_ids)} outside [0, {L})")
        if self.minibatches < 1 or L % self.minibatches:
            raise ConfigInvalid(f"minibatches={self.minibatches} must divide num_nodes={L}")
        if 2 * len(self.byzantine_ids) >= L:
            raise ConfigInvalid("Byzantine fraction must stay below 1/2")

    @property
    def num_byzantine(self) -> int:
        return len(self.byzantine_ids)

    @property
    def batch_size(self) -> int:
        return self.num_nodes // self.minibatches

    @property
    def good_ids(self) -> List[int]:
        return [i for i in range(self.num_nodes) if i not in self.byzantine_ids]

    def batch_of(self, node: int) -> int:
        return node // self.batch_size

    def batch_members(self, batch: int) -> List[int]:
        rho = self.batch_size
        return list(range(batch * rho, (batch + 1) * rho))

    def with_byzantine(self, ids) -> "FederationConfig":
        return FederationConfig(self.num_nodes, frozenset(ids), self.minibatches, self.seed)


def minibatch_index(batch: int, within: int, rho: int, num_batches: Optional[int] = None) -> int:
    """Global 1-based node index ``(batch - 1) * rho + within``."""
    if rho < 1 or within < 1 or within > rho or batch < 1:
        raise OutOfRange(f"(batch={batch}, within={within}) invalid for rho={rho}")
    if num_batches is not None and batch > num_batches:
        raise OutOfRange(f"batch {batch} exceeds {num_batches}")
    return (batch - 1) * rho + within


def node_rng(seed: int, node: int, round_index: int = 0) -> np.random.Generator:
    """Independent stream per (seed, node, round), order-independent."""
    return np.random.default_rng(np.random.SeedSequence([seed, node, round_index]))


@dataclass(frozen=True)
class RoundPayload:
    node_id: int
    content: Payload
    byzantine: bool = False


@dataclass
class AdversaryView:
    """Everything the adversary sees when it crafts this round's payloads."""

    honest_payloads: Dict[int, Payload]
    byzantine_ids: FrozenSet[int]
    round_index: int
    state: Mapping[str, Any] = field(default_factory=dict)
    # Omniscience: the adversary may evaluate any node's honest computation,
    # including the Byzantine nodes' own data.
    honest_compute: Optional[Callable[[int], Payload]] = None


Adversary = Callable[[AdversaryView], Union[Payload, Dict[int, Payload]]]


def byzantine_set_schedule(cfg: FederationConfig, mode: str, round_index: int) -> FrozenSet[int]:
    """Byzantine set for a round: fixed, or redrawn per round from the seed."""
    if mode == "fixed":
        return cfg.byzantine_ids
    if mode == "per-round":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED, round_index]))
        ids = rng.choice(cfg.num_nodes, size=cfg.num_byzantine, replace=False)
        return frozenset(int(i) for i in ids)
    raise ValueError(f"unknown schedule mode {mode!r}")


def run_round(
    cfg: FederationConfig,
    honest_compute: Callable[[int], Payload],
    adversary: Optional[Adversary] = None,
    *,
    round_index: int = 0,
    state: Optional[Mapping[str, Any]] = None,
    byzantine_ids: Optional[FrozenSet[int]] = None,
) -> List[RoundPayload]:
    """Execute one synchronous round and return the payloads in node order.

    Good nodes run ``honest_compute``; only after every good payload exists
    does the adversary produce the Byzantine payloads. It may return one
    payload for all Byzantine nodes or a ``{node_id: payload}`` dict.
    """
    byz = cfg.byzantine_ids if byzantine_ids is None else frozenset(byzantine_ids)
    honest: Dict[int, Payload] = {}
    for node in range(cfg.num_nodes):
        if node in byz:
            continue
        try:
            honest[node] = honest_compute(node)
        except Exception as exc:  # tag with the failing node
            raise NodeComputeError(node, exc) from exc

    corrupt: Dict[int, Payload] = {}
    if byz:
        if adversary is None:
            corrupt = {node: honest_compute(node) for node in byz}
        else:
            view = AdversaryView(dict(honest), byz, round_index, dict(state or {}), honest_compute)
            out = adversary(view)
            if isinstance(out, dict):
                missing = byz - set(out)
                if missing:
                    raise ValueError(f"adversary returned no payload for nodes {sorted(missing)}")
                corrupt = {node: out[node] for node in byz}
            else:
                corrupt = {node: out for node in byz}

    return [
        RoundPayload(node, corrupt[node], True) if node in byz else RoundPayload(node, honest[node], False)
        for node in range(cfg.num_nodes)
    ]
