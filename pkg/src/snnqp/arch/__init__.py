"""Eyeriss-like accelerator cost model and mapping search."""

from .spec import DIMS, ArchitectureSpec, Mapping, MemoryLevel, Workload
from .model import (Access, AccessCounts, EnergyReport, InvalidMappingError, access_counts, energy,
                    evaluate, latency, latency_from_counts, validate_mapping)
from .search import InfeasibleMappingError, SearchResult, search_mappings, space_size
