"""Passage collections: loading, text normalization, and substring de-duplication.

A passage survives de-duplication iff it is the first occurrence of its
normalized text and that text is not a proper substring of any other
passage's normalized text. Containment is decided with a suffix array built
over all unique normalized texts joined by "\n" (a codepoint
``normalize_text`` can never emit, since whitespace runs collapse to a
single ASCII space), so the scan stays near-linear instead of the O(n^2 * L)
pairwise check.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)


class _ScrubTable(dict):
    """Lazy str.translate table deleting Unicode punctuation (P*) and symbols (S*)."""

    def __missing__(self, codepoint: int):
        keep = unicodedata.category(chr(codepoint))[0] not in "PS"
        result = codepoint if keep else None
        self[codepoint] = result
        return result


_SCRUB = _ScrubTable()


def normalize_text(raw: str) -> str:
    """Lowercase, strip punctuation/symbol codepoints, collapse whitespace.

    Punctuation is every codepoint in Unicode general categories P* and S*;
    whitespace runs become one ASCII space; the result is stripped. The
    function is total and idempotent.
    """
    return " ".join(raw.lower().translate(_SCRUB).split())


@dataclass(frozen=True)
class Passage:
    """One text unit; ``norm_text`` is always derived via :func:`normalize_text`."""

    id: str
    text: str
    norm_text: str

    @classmethod
    def make(cls, id: str, text: str) -> "Passage":
        return cls(id=id, text=text, norm_text=normalize_text(text))


@dataclass
class Corpus:
    """Ordered passage collection with an id index."""

    passages: list[Passage]
    id_index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        index: dict[str, int] = {}
        for pos, p in enumerate(self.passages):
            if not p.id:
                raise DataError(f"passage at position {pos} has an empty id")
            if p.id in index:
                raise DataError(f"duplicate passage id: {p.id!r}")
            index[p.id] = pos
        self.id_index = index

    def __len__(self) -> int:
        return len(self.passages)

    def __getitem__(self, pid: str) -> Passage:
        try:
            return self.passages[self.id_index[pid]]
        except KeyError:
            raise DataError(f"unknown passage id: {pid!r}") from None

    def ids(self) -> list[str]:
        return [p.id for p in self.passages]


def load_corpus(path: str | Path) -> Corpus:
    """Read JSON-Lines records {"id", "text"} and derive normalized texts."""
    passages = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec.get("id"), str) or not isinstance(rec.get("text"), str):
                raise DataError(f"{path}:{lineno}: expected string fields 'id' and 'text'")
            passages.append(Passage.make(rec["id"], rec["text"]))
    return Corpus(passages)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in corpus.passages:
            fh.write(json.dumps({"id": p.id, "text": p.text}, ensure_ascii=False) + "\n")


def write_removals(removals: Sequence[tuple[str, str]], path: str | Path) -> None:
    """Removal report: one {"removed", "kept_superstring"} object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for removed, kept in removals:
            fh.write(json.dumps({"removed": removed, "kept_superstring": kept}) + "\n")


def load_removals(path: str | Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["removed"], rec["kept_superstring"]))
    return out


# --- suffix array ---------------------------------------------------------


def _suffix_array(codes: np.ndarray) -> np.ndarray:
    """Suffix array of a codepoint sequence by prefix doubling.

    Ranks become distinct no later than the round where the compared prefix
    length reaches the sequence length (suffixes are pairwise distinct), so
    the loop always terminates; random text exits after a few rounds.
    """
    n = codes.size
    if n == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(codes, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    sorted_keys = codes[order]
    groups = np.empty(n, dtype=np.int64)
    groups[0] = 0
    np.cumsum(sorted_keys[1:] != sorted_keys[:-1], out=groups[1:])
    rank[order] = groups

    width = 1
    while rank[order[-1]] != n - 1:
        second = np.full(n, -1, dtype=np.int64)
        second[: n - width] = rank[width:]
        key = rank * (n + 1) + (second + 1)
        order = np.argsort(key, kind="stable")
        sorted_keys = key[order]
        groups[0] = 0
        np.cumsum(sorted_keys[1:] != sorted_keys[:-1], out=groups[1:])
        rank[order] = groups
        width *= 2
    return order


class _ContainmentIndex:
    """Substring queries over a set of unique texts via one shared suffix array."""

    def __init__(self, texts: Sequence[str]):
        self.texts = list(texts)
        self.blob = "\n".join(self.texts)
        starts = np.zeros(len(self.texts), dtype=np.int64)
        offset = 0
        for i, t in enumerate(self.texts):
            starts[i] = offset
            offset += len(t) + 1
        self.starts = starts
        codes = np.frombuffer(self.blob.encode("utf-32-le"), dtype=np.uint32)
        self.sa = _suffix_array(codes)

    def doc_at(self, position: int) -> int:
        return int(np.searchsorted(self.starts, position, side="right")) - 1

    def other_occurrence(self, doc: int) -> int | None:
        """Position of an occurrence of texts[doc] outside its own copy, or None.

        The text occurs at its own start and nowhere else within its own
        region (a shifted self-match would have to cross the "\n" separator),
        so any second suffix-array hit lies inside a different document.
        """
        text = self.texts[doc]
        own_start = int(self.starts[doc])
        blob, sa = self.blob, self.sa
        lo, hi = 0, sa.size
        while lo < hi:
            mid = (lo + hi) // 2
            pos = int(sa[mid])
            if blob[pos : pos + len(text)] < text:
                lo = mid + 1
            else:
                hi = mid
        first = int(sa[lo])
        if first != own_start:
            return first
        if lo + 1 < sa.size:
            pos = int(sa[lo + 1])
            if blob[pos : pos + len(text)] == text:
                return pos
        return None


def dedup_corpus(corpus: Corpus) -> tuple[Corpus, list[tuple[str, str]]]:
    """Remove passages whose normalized text is contained in another's.

    Exact duplicates keep the first occurrence in input order. Every removal
    is attributed to a passage that survives and whose normalized text
    contains the removed one. The removal list is ordered by the removed
    passage's input position.
    """
    passages = corpus.passages
    if len(passages) <= 1:
        return Corpus(list(passages)), []

    rep_by_text: dict[str, Passage] = {}
    dup_rep: dict[str, str] = {}
    uniques: list[Passage] = []
    for p in passages:
        rep = rep_by_text.get(p.norm_text)
        if rep is None:
            rep_by_text[p.norm_text] = p
            uniques.append(p)
        else:
            dup_rep[p.id] = rep.id

    nonempty = [p for p in uniques if p.norm_text]
    survivors = {p.id for p in uniques}
    target: dict[str, str] = {}

    if len(nonempty) >= 2:
        index = _ContainmentIndex([p.norm_text for p in nonempty])
        # Longest first: a container is strictly longer, hence already final.
        order = sorted(
            range(len(nonempty)),
            key=lambda i: (-len(nonempty[i].norm_text), corpus.id_index[nonempty[i].id]),
        )
        for i in order:
            pos = index.other_occurrence(i)
            if pos is None:
                continue
            container = nonempty[index.doc_at(pos)]
            kept = container.id if container.id in survivors else target[container.id]
            survivors.discard(nonempty[i].id)
            target[nonempty[i].id] = kept

    empty_rep = rep_by_text.get("")
    if empty_rep is not None and len(survivors) > 1:
        survivors.discard(empty_rep.id)
        first_survivor = next(p.id for p in passages if p.id in survivors)
        target[empty_rep.id] = first_survivor

    removals: list[tuple[str, str]] = []
    for p in passages:
        if p.id in survivors:
            continue
        kept = dup_rep.get(p.id, target.get(p.id))
        while kept not in survivors:
            kept = target.get(kept, dup_rep.get(kept))
        removals.append((p.id, kept))

    kept_passages = [p for p in passages if p.id in survivors]
    logger.info("dedup: kept %d of %d passages", len(kept_passages), len(passages))
    return Corpus(kept_passages), removals


def contains_any(index_texts: Iterable[str], probe: str) -> bool:
    """O(n*L) helper: is ``probe`` a substring of any of ``index_texts``?"""
    return any(probe in t for t in index_texts)
