"""Motion-appearance dual-memory network for video QA, with synthetic benchmarks."""

__version__ = "0.1.0"
