"""Generative flow networks on enumerable DAGs, with exact dynamic-programming oracles."""

__version__ = "0.1.0"
