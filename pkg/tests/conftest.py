"""Shared fixtures for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from retfit.embeddings import EmbeddingStore


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)


def unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    rows = rng.normal(0, 1, (count, dim))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture
def small_store(rng):
    """12 random unit vectors with lexicographically awkward ids."""
    ids = [f"doc{i:02d}" for i in range(12)]
    return EmbeddingStore(ids, unit_rows(rng, 12, 8))
