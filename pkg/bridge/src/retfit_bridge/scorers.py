"""(query, passage) relevance scorers.

- ``overlap`` - deterministic lexical scorer: cosine of token multisets.
  A stand-in teacher for offline runs and tests.
- ``ce:<model-name-or-path>`` - sentence-transformers CrossEncoder
  (optional dependency).
"""

from __future__ import annotations

import math
import re
from collections import Counter

from . import ModelError, UsageError

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class OverlapScorer:
    def score_pairs(self, pairs: list[tuple[str, str]], batch_size: int = 32) -> list[float]:
        out = []
        for query, passage in pairs:
            q = Counter(_TOKEN_RE.findall(query.lower()))
            p = Counter(_TOKEN_RE.findall(passage.lower()))
            if not q or not p:
                out.append(0.0)
                continue
            dot = sum(q[t] * p[t] for t in q.keys() & p.keys())
            norm = math.sqrt(sum(v * v for v in q.values()) * sum(v * v for v in p.values()))
            out.append(dot / norm)
        return out


class CrossEncoderScorer:
    def __init__(self, model_name: str, device: str = "cpu"):
        try:
            from sentence_transformers import CrossEncoder
        except ImportError as exc:
            raise ModelError(
                "sentence-transformers is not installed; use the 'overlap' scorer "
                "or install the 'models' extra"
            ) from exc
        try:
            self.model = CrossEncoder(model_name, device=device)
        except Exception as exc:
            raise ModelError(f"failed to load cross-encoder {model_name!r}: {exc}") from exc

    def score_pairs(self, pairs: list[tuple[str, str]], batch_size: int = 32) -> list[float]:
        scores = self.model.predict(list(pairs), batch_size=batch_size, show_progress_bar=False)
        return [float(s) for s in scores]


def make_scorer(model: str, device: str = "cpu"):
    if model == "overlap":
        return OverlapScorer()
    if model.startswith("ce:"):
        return CrossEncoderScorer(model.split(":", 1)[1], device=device)
    raise UsageError(f"unknown scorer model {model!r}; expected 'overlap' or ce:<name>")
