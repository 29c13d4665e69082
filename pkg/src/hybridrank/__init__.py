"""hybridrank: category-level text-to-image retrieval fusing cross-modal and
intra-modal similarity via a learned attention aggregator and mixing weight."""

__version__ = "0.1.0"

from ._kernels import BACKEND  # noqa: F401
