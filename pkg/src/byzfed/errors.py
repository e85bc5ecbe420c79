"""Exception hierarchy shared by every module."""


class ByzFedError(Exception):
    """Base class for all library errors."""


class RankDeficient(ByzFedError, ValueError):
    pass


class DimensionMismatch(ByzFedError, ValueError):
    pass


class EmptyInput(ByzFedError, ValueError):
    pass


class AllFiltered(ByzFedError, RuntimeError):
    """Every candidate point was removed by the norm threshold."""


class OutOfRange(ByzFedError, IndexError):
    pass


class InvalidSpectrum(ByzFedError, ValueError):
    pass


class IndivisibleSplit(ByzFedError, ValueError):
    pass


class DegenerateGap(ByzFedError, ValueError):
    pass


class IllConditioned(ByzFedError, ValueError):
    pass


class ConfigInvalid(ByzFedError, ValueError):
    pass


class UnknownSuite(ConfigInvalid):
    pass


class NodeComputeError(ByzFedError, RuntimeError):
    """An honest node's computation failed; carries the node id."""

    def __init__(self, node_id, cause):
        super().__init__(f"node {node_id}: {cause!r}")
        self.node_id = node_id
        self.cause = cause
