"""Steering toy language-model agents in the iterated prisoner's dilemma with SAE features."""

__version__ = "0.1.0"
