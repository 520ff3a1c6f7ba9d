"""Hybrid retrieval-generation dialogue pipeline.

One shared transformer encoder feeds two task adapters (similar-query
discovery and query-response matching), a decoder generates responses, and
the matching head doubles as an adversarial discriminator and re-ranker.
"""

__version__ = "0.1.0"
