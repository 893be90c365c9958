"""Distilling LLM re-ranking ability into small encoder and decoder rankers."""

__version__ = "0.1.0"
