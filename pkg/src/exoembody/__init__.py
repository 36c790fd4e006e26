"""Desk-scale embodied-human simulation and exoskeleton co-design."""

__version__ = "0.1.0"
