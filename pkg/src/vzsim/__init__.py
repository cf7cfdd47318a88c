"""Simulator and policy engine for memory management of containers on shared nodes."""

__version__ = "0.1.0"
