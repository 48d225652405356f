"""Kinetically constrained models: classification, bootstrap certificates,
Harris dynamics, dual paths and the auxiliary oriented percolation."""

from .family import BUILTIN_FAMILIES, UpdateFamily, classify, load_family
from .harris import ClockLog, Geometry, evolve, evolve_coupled, sample_clock_log

__version__ = "0.1.0"
