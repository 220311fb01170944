"""Structured MLLM semantics as gated side inputs to a trajectory forecaster."""

__version__ = "0.1.0"
