"""Order-aware message passing on combinatorial complexes, with a network delay model and simulator."""

__version__ = "0.1.0"
