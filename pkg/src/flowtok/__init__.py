"""Discrete speech tokenizer with a text-conditioned flow-matching mel decoder,
binary spherical quantization, and downstream token language models."""

__version__ = "0.1.0"
