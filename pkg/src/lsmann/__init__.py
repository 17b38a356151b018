"""Disk-based dynamic approximate nearest neighbor index.

A hierarchical proximity graph whose bottom layer lives in an LSM-tree
edge store, with sign-projection filtering to skip unpromising vector
fetches and traversal-driven reordering of on-disk placement.
"""

from .hnsw import HnswIndex, HnswParams, SearchResult, sample_level
from .metrics import CostModelParams, IoCounters
from .simhash import FilterParams

__all__ = [
    "HnswIndex",
    "HnswParams",
    "SearchResult",
    "sample_level",
    "CostModelParams",
    "IoCounters",
    "FilterParams",
]

__version__ = "0.1.0"
