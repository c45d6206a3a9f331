"""Element feature tables and fully connected composition graphs."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elements import ATOMIC_NUMBER, SYMBOLS
from .formula import Composition

DEFAULT_FEATURE_DIM = 200


@dataclass(frozen=True)
class ElementFeatureTable:
    source: str  # "file" or "fallback"
    dim: int
    table: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, symbol: str) -> np.ndarray:
        return self.table[symbol]

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.table

    def missing(self, symbols) -> list[str]:
        return sorted(s for s in symbols if s not in self.table)

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.source}:{self.dim}".encode())
        for sym in sorted(self.table, key=ATOMIC_NUMBER.get):
            h.update(sym.encode())
            h.update(np.ascontiguousarray(self.table[sym], dtype=np.float64).tobytes())
        return h.hexdigest()


def fallback_element_features(dim: int = DEFAULT_FEATURE_DIM, seed: int = 0) -> ElementFeatureTable:
    """Seeded unit vectors, one per element; each depends only on (seed, Z)."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    table = {}
    for z, sym in enumerate(SYMBOLS, start=1):
        v = np.random.default_rng([seed, z]).standard_normal(dim)
        v /= np.linalg.norm(v)
        v.setflags(write=False)
        table[sym] = v
    return ElementFeatureTable(source="fallback", dim=dim, table=table)


def load_element_features(path: str | Path) -> ElementFeatureTable:
    """Read a JSON object ``{symbol: [float, ...]}``."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or not raw:
        raise ValueError(f"{path}: expected a non-empty JSON object of element vectors")
    table = {}
    dim = None
    for sym, vec in raw.items():
        if sym not in ATOMIC_NUMBER:
            raise ValueError(f"{path}: unknown element symbol {sym!r}")
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ValueError(f"{path}: vector for {sym} must be a finite 1-d list")
        if dim is None:
            dim = arr.shape[0]
        elif arr.shape[0] != dim:
            raise ValueError(f"{path}: {sym} has dim {arr.shape[0]}, expected {dim}")
        arr.setflags(write=False)
        table[sym] = arr
    return ElementFeatureTable(source="file", dim=dim, table=table)


class MissingElementFeature(KeyError):
    def __init__(self, elements: list[str]):
        super().__init__(f"no element features for: {', '.join(elements)}")
        self.elements = elements


@dataclass(frozen=True, eq=False)
class CompositionGraph:
    elements: list[str]
    features: np.ndarray  # (n, feature_dim)
    fractions: np.ndarray  # (n,)
    edge_index: np.ndarray  # (2, n*(n-1)) ordered (source, target) pairs, no self loops

    @property
    def n_nodes(self) -> int:
        return len(self.elements)

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[1]

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int8)
        a[self.edge_index[0], self.edge_index[1]] = 1
        return a

    def permuted(self, order) -> "CompositionGraph":
        """Same graph with nodes relabelled so that new node k is old node ``order[k]``."""
        order = np.asarray(order)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        return CompositionGraph(
            elements=[self.elements[i] for i in order],
            features=self.features[order],
            fractions=self.fractions[order],
            edge_index=inv[self.edge_index],
        )


def complete_edges(n: int) -> np.ndarray:
    src, dst = np.nonzero(~np.eye(n, dtype=bool))
    return np.stack([src, dst]).astype(np.int64)


def build_graph(comp: Composition, feats: ElementFeatureTable) -> CompositionGraph:
    elements = comp.elements
    missing = feats.missing(elements)
    if missing:
        raise MissingElementFeature(missing)
    features = np.stack([feats[s] for s in elements]).astype(np.float64)
    fractions = np.array([comp.fraction(s) for s in elements], dtype=np.float64)
    return CompositionGraph(
        elements=elements,
        features=features,
        fractions=fractions,
        edge_index=complete_edges(len(elements)),
    )
