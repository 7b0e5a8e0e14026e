"""Text-to-vector backends.

Model identifiers select the backend:

- ``hash:<dim>`` - deterministic feature-hashing encoder (word unigrams,
  word bigrams, char trigrams hashed with keyed blake2b into signed
  buckets, L2-normalized). No model weights, no network, byte-stable
  across platforms; the default for tests and offline runs.
- ``st:<model-name-or-path>`` - sentence-transformers encoder (optional
  dependency), run on the job's device.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from . import ModelError, UsageError

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_HASH_KEY = b"retfit-bridge-v1"


def _features(text: str) -> list[str]:
    tokens = _TOKEN_RE.findall(text.lower())
    feats = list(tokens)
    feats += [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]
    joined = " ".join(tokens)
    feats += [joined[i : i + 3] for i in range(len(joined) - 2)]
    return feats


class HashEncoder:
    """Feature hashing into a fixed-dimension signed vector."""

    def __init__(self, dim: int):
        if dim < 2:
            raise UsageError(f"hash encoder dimension must be >= 2, got {dim}")
        self.dim = dim

    def encode(self, texts: list[str], batch_size: int = 32) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            feats = _features(text) or [f"<empty:{row}>"]
            for feat in feats:
                digest = hashlib.blake2b(
                    feat.encode("utf-8"), digest_size=8, key=_HASH_KEY
                ).digest()
                value = int.from_bytes(digest, "little")
                bucket = value % self.dim
                sign = 1.0 if (value >> 63) & 1 else -1.0
                out[row, bucket] += sign
            norm = np.linalg.norm(out[row])
            if norm == 0.0:
                out[row, row % self.dim] = 1.0
                norm = 1.0
            out[row] /= norm
        return out.astype(np.float32)


class SentenceTransformerEncoder:
    def __init__(self, model_name: str, device: str = "cpu"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise ModelError(
                "sentence-transformers is not installed; use a hash:<dim> model "
                "or install the 'models' extra"
            ) from exc
        try:
            self.model = SentenceTransformer(model_name, device=device)
        except Exception as exc:
            raise ModelError(f"failed to load encoder {model_name!r}: {exc}") from exc
        self.dim = int(self.model.get_sentence_embedding_dimension())

    def encode(self, texts: list[str], batch_size: int = 32) -> np.ndarray:
        vectors = self.model.encode(
            texts,
            batch_size=batch_size,
            convert_to_numpy=True,
            normalize_embeddings=True,
            show_progress_bar=False,
        )
        return np.asarray(vectors, dtype=np.float32)


def make_encoder(model: str, device: str = "cpu"):
    if model.startswith("hash:"):
        try:
            return HashEncoder(int(model.split(":", 1)[1]))
        except ValueError:
            raise UsageError(f"bad hash encoder spec {model!r}; expected hash:<dim>") from None
    if model.startswith("st:"):
        return SentenceTransformerEncoder(model.split(":", 1)[1], device=device)
    raise UsageError(f"unknown encoder model {model!r}; expected hash:<dim> or st:<name>")
