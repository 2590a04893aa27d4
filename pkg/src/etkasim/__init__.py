"""Discrete-event simulator for the ETKAS and ESP kidney allocation programs."""

__version__ = "0.1.0"
