"""Optimal control of excitation transfer along XX spin chains."""

__version__ = "0.1.0"
