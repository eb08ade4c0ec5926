class MetaCSError(Exception):
    """Base class for every error raised by the meta community search stack."""


class InputError(MetaCSError, ValueError):
    """Malformed input data: bad node ids, unparseable files, wrong shapes of raw data."""


class ConfigurationError(MetaCSError, ValueError):
    """A configuration that cannot be honoured (unknown keys, missing bundles, wrong feature mode)."""


class ShapeError(MetaCSError, ValueError):
    """Tensor or matrix widths that do not line up."""


class SamplingError(MetaCSError, RuntimeError):
    """Task sampling hit a subgraph without usable queries; retry with a new seed node."""


class NoCommunityError(MetaCSError, LookupError):
    """No k-truss (k >= 2) connects all query nodes."""


class UnsupportedQueryError(MetaCSError, ValueError):
    """A query that the chosen model cannot score (e.g. GPN without labels)."""
