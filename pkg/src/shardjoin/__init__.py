"""Barrier-free distributed hash join engine with a barrier baseline, simulator and harness."""

__version__ = "0.1.0"
