"""Context-dependent object ranking: FETA/FATE rankers, losses, benchmarks."""

__version__ = "0.1.0"
