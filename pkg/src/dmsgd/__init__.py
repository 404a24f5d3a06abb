"""Simulation and verification toolkit for distributed momentum SGD."""

__version__ = "0.1.0"
