"""Measure willingness-to-pay leakage in agent-mediated shopping dialogues."""

__version__ = "0.1.0"
