"""Recipe ingestion, dataset splits, precursor vocabulary and knowledge base."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .formula import Composition, FormulaError, canonical_formula, parse_formula

REQUIRED_FIELDS = ("id", "target_formula", "precursor_formulas")
OPTIONAL_FIELDS = ("year",)

# year split boundaries (inclusive upper bounds)
TRAIN_LAST_YEAR = 2014
VALID_LAST_YEAR = 2016


@dataclass(frozen=True)
class RecipeRecord:
    """A parsed input line, before labels exist."""

    id: str
    target: Composition
    precursor_formulas: tuple[str, ...]
    year: int | None = None

    @property
    def canonical_precursors(self) -> tuple[str, ...]:
        return tuple(sorted({canonical_formula(f) for f in self.precursor_formulas}))

    def to_dict(self) -> dict:
        out = {"id": self.id, "target_formula": self.target.formula, "precursor_formulas": list(self.precursor_formulas)}
        if self.year is not None:
            out["year"] = self.year
        return out


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str

    def to_json(self) -> str:
        return json.dumps({"line": self.line, "reason": self.reason})


@dataclass
class IngestResult:
    records: list[RecipeRecord]
    rejects: list[Reject]

    @property
    def stats(self) -> dict:
        keys = Counter((r.target.key(), r.canonical_precursors) for r in self.records)
        return {
            "records": len(self.records),
            "rejects": len(self.rejects),
            "duplicate_recipes": sum(n - 1 for n in keys.values() if n > 1),
            "with_year": sum(r.year is not None for r in self.records),
        }


def _parse_line(obj) -> RecipeRecord:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [f for f in REQUIRED_FIELDS if f not in obj]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    extra = sorted(set(obj) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS))
    if extra:
        raise ValueError(f"unexpected field(s): {', '.join(extra)}")
    rid, target, precs = obj["id"], obj["target_formula"], obj["precursor_formulas"]
    if not isinstance(rid, str) or not rid:
        raise ValueError("id must be a non-empty string")
    if not isinstance(target, str):
        raise ValueError("target_formula must be a string")
    if not isinstance(precs, list) or not precs or not all(isinstance(p, str) for p in precs):
        raise ValueError("precursor_formulas must be a non-empty list of strings")
    year = obj.get("year")
    if year is not None and (isinstance(year, bool) or not isinstance(year, int)):
        raise ValueError("year must be an integer")
    comp = parse_formula(target)
    for p in precs:
        parse_formula(p)
    return RecipeRecord(id=rid, target=comp, precursor_formulas=tuple(precs), year=year)


def load_recipes(path: str | Path) -> IngestResult:
    """Read a JSON-lines recipe file. Bad lines go to ``rejects`` with 1-based line numbers."""
    records: list[RecipeRecord] = []
    rejects: list[Reject] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = _parse_line(json.loads(line))
            except json.JSONDecodeError as exc:
                rejects.append(Reject(lineno, f"invalid JSON: {exc.msg}"))
                continue
            except (ValueError, FormulaError) as exc:
                rejects.append(Reject(lineno, str(exc)))
                continue
            if rec.id in seen_ids:
                rejects.append(Reject(lineno, f"duplicate id {rec.id!r}"))
                continue
            seen_ids.add(rec.id)
            records.append(rec)
    return IngestResult(records, rejects)


def write_rejects(rejects: Iterable[Reject], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(r.to_json() + "\n")


def split_dataset(records: Sequence[RecipeRecord], mode: str = "random", seed: int = 0):
    """Partition into (train, valid, test).

    ``random``: seeded permutation sliced 80/10/10.
    ``year``: train up to 2014, valid 2015-2016, test 2017 onwards.
    """
    records = list(records)
    if mode == "year":
        for r in records:
            if r.year is None:
                raise ValueError(f"year split needs a year on every record; {r.id!r} has none")
        train = [r for r in records if r.year <= TRAIN_LAST_YEAR]
        valid = [r for r in records if TRAIN_LAST_YEAR < r.year <= VALID_LAST_YEAR]
        test = [r for r in records if r.year > VALID_LAST_YEAR]
        return train, valid, test
    if mode != "random":
        raise ValueError(f"unknown split mode {mode!r}")
    n = len(records)
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_valid = int(0.8 * n), int(0.1 * n)
    pick = lambda idx: [records[i] for i in idx]  # noqa: E731
    return (
        pick(perm[:n_train]),
        pick(perm[n_train : n_train + n_valid]),
        pick(perm[n_train + n_valid :]),
    )


@dataclass(frozen=True)
class PrecursorVocabulary:
    precursors: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False)

    @classmethod
    def from_formulas(cls, formulas: Iterable[str]) -> "PrecursorVocabulary":
        canon = sorted({canonical_formula(f) for f in formulas})
        return cls(tuple(canon), {f: i for i, f in enumerate(canon)})

    def __len__(self) -> int:
        return len(self.precursors)

    def lookup(self, formula: str) -> int | None:
        return self.index.get(canonical_formula(formula))

    def compositions(self) -> list[Composition]:
        return [parse_formula(f) for f in self.precursors]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.precursors).encode()).hexdigest()


@dataclass(frozen=True)
class Recipe:
    id: str
    target: Composition
    precursor_ids: frozenset[int]
    n_precursors: int  # vocabulary size l
    year: int | None = None
    oov_precursors: tuple[str, ...] = ()

    @property
    def label(self) -> np.ndarray:
        y = np.zeros(self.n_precursors, dtype=np.float64)
        y[sorted(self.precursor_ids)] = 1.0
        return y

    @property
    def gold_set(self) -> frozenset[int]:
        return self.precursor_ids

    @property
    def has_oov(self) -> bool:
        return bool(self.oov_precursors)


def labelize(records: Iterable[RecipeRecord], vocab: PrecursorVocabulary) -> list[Recipe]:
    out = []
    for r in records:
        ids, oov = set(), []
        for f in r.canonical_precursors:
            i = vocab.index.get(f)
            if i is None:
                oov.append(f)
            else:
                ids.add(i)
        out.append(Recipe(r.id, r.target, frozenset(ids), len(vocab), r.year, tuple(oov)))
    return out


@dataclass(frozen=True)
class KnowledgeBase:
    """Training recipes that references are retrieved from. Never holds valid/test recipes."""

    recipes: tuple[Recipe, ...]
    vocab: PrecursorVocabulary

    def __len__(self) -> int:
        return len(self.recipes)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.recipes]

    def precursor_set_registry(self) -> set[frozenset[str]]:
        return {frozenset(self.vocab.precursors[i] for i in r.precursor_ids) for r in self.recipes}


def build_vocab_and_kb(train: Sequence[RecipeRecord]) -> tuple[PrecursorVocabulary, KnowledgeBase]:
    if not train:
        raise ValueError("training set is empty")
    vocab = PrecursorVocabulary.from_formulas(f for r in train for f in r.precursor_formulas)
    return vocab, KnowledgeBase(tuple(labelize(train, vocab)), vocab)


def write_recipes(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in records:
            fh.write(json.dumps(obj, sort_keys=False) + "\n")
