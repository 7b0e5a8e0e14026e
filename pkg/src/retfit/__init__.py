"""Desk-scale dense-retriever specialization over precomputed embeddings."""

__version__ = "0.1.0"
