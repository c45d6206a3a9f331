"""Retrieval results shared by both retrievers, and their on-disk table form."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RetrievalSet:
    """Up to K knowledge-base positions for one target, best first."""

    indices: tuple[int, ...]
    scores: tuple[float, ...]
    k: int
    retriever: str

    @property
    def short(self) -> bool:
        return len(self.indices) < self.k

    def __len__(self) -> int:
        return len(self.indices)


def rank(scores: np.ndarray, eligible: np.ndarray, k: int, descending: bool) -> list[int]:
    """Top-k eligible positions by score; equal scores go to the lower position."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    pos = np.flatnonzero(eligible)
    key = -scores[pos] if descending else scores[pos]
    order = np.lexsort((pos, key))
    return pos[order[:k]].tolist()


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@dataclass
class RetrievalTable:
    """Precomputed retrieval sets for a list of query recipes.

    Stored as an ``(n, K)`` int array padded with -1 plus a score array and a
    JSON sidecar carrying the query ids and provenance keys.
    """

    retriever: str
    k: int
    query_ids: list[str]
    indices: np.ndarray  # (n, k) int64, -1 padded
    scores: np.ndarray  # (n, k) float64, nan padded
    meta: dict
    _pos: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._pos = {q: i for i, q in enumerate(self.query_ids)}

    @classmethod
    def from_sets(cls, retriever: str, k: int, query_ids: Sequence[str], sets: Sequence[RetrievalSet], meta=None):
        n = len(sets)
        idx = np.full((n, k), -1, dtype=np.int64)
        sc = np.full((n, k), np.nan, dtype=np.float64)
        for r, s in enumerate(sets):
            idx[r, : len(s)] = s.indices
            sc[r, : len(s)] = s.scores
        return cls(retriever, k, list(query_ids), idx, sc, dict(meta or {}))

    def row(self, query_id: str) -> RetrievalSet:
        r = self._pos[query_id]
        keep = self.indices[r] >= 0
        return RetrievalSet(
            tuple(int(i) for i in self.indices[r][keep]),
            tuple(float(s) for s in self.scores[r][keep]),
            self.k,
            self.retriever,
        )

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._pos

    def missing(self, query_ids: Sequence[str]) -> list[str]:
        return [q for q in query_ids if q not in self._pos]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.indices)
        np.save(path.with_suffix(".scores.npy"), self.scores)
        sidecar = {
            "retriever": self.retriever,
            "k": self.k,
            "count": len(self.query_ids),
            "checksum": checksum(self.indices),
            "query_ids": self.query_ids,
            "meta": self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalTable":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        idx = np.load(path.with_suffix(".npy"))
        if checksum(idx) != side["checksum"]:
            raise ValueError(f"{path}: retrieval table checksum mismatch")
        sc = np.load(path.with_suffix(".scores.npy"))
        return cls(side["retriever"], side["k"], side["query_ids"], idx, sc, side.get("meta", {}))
