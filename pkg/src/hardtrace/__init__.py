"""Selective hardware-trace driven taint analysis for a small register machine."""

__version__ = "0.1.0"
