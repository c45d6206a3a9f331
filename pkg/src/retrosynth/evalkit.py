"""Set decoding, Top-K exact match, recalls and subset/new case analysis."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .chemio import PrecursorVocabulary, Recipe

TOP_KS = (1, 3, 5, 10)


@dataclass(frozen=True)
class SetPrediction:
    """Candidate precursor sets (sorted vocabulary indices) with scores, best first."""

    sets: tuple[tuple[int, ...], ...]
    scores: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.sets)


@lru_cache(maxsize=64)
def _subset_table(n: int, max_size: int) -> tuple[np.ndarray, np.ndarray, list[tuple[int, ...]]]:
    subsets = [c for size in range(1, min(max_size, n) + 1) for c in itertools.combinations(range(n), size)]
    subsets.sort()
    member = np.zeros((len(subsets), n), dtype=bool)
    for r, c in enumerate(subsets):
        member[r, list(c)] = True
    return member, np.arange(len(subsets)), subsets


def enumerate_sets(probs: np.ndarray, top_n: int = 10, max_size: int = 6, beam: int = 10) -> SetPrediction:
    """Best ``beam`` precursor sets drawn from the ``top_n`` most probable precursors.

    A set S scores prod(p_i, i in S) * prod(1 - p_j, j in top_n \\ S). Every
    subset of size 1..``max_size`` is scored, so decoding is exact within the
    ``top_n`` restriction. Equal scores are ordered by the sorted index tuple.
    """
    p = np.asarray(probs, dtype=np.float64)
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    n = min(top_n, p.shape[0])
    if n == 0:
        return SetPrediction((), ())
    cand = np.sort(np.argsort(-p, kind="stable")[:n])
    member, lexrank, subsets = _subset_table(n, max_size)
    pc = p[cand]
    score = np.ones(len(subsets))
    for c in range(n):  # column by column so the product order is fixed
        score *= np.where(member[:, c], pc[c], 1.0 - pc[c])
    order = np.lexsort((lexrank, -score))[:beam]
    return SetPrediction(
        tuple(tuple(int(cand[i]) for i in subsets[r]) for r in order),
        tuple(float(score[r]) for r in order),
    )


def exact_match_at_k(preds: SetPrediction, gold: Iterable[int], k: int, has_oov: bool = False) -> bool:
    if has_oov:
        return False
    gold = tuple(sorted(gold))
    return gold in preds.sets[:k]


def recalls(probs: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """(macro, micro) recall of ``probs >= threshold`` against binary ``y``.

    Macro averages per-class recall over classes with at least one positive.
    """
    pred = np.asarray(probs) >= threshold
    y = np.asarray(y) > 0.5
    tp = (pred & y).sum(axis=0)
    pos = y.sum(axis=0)
    if pos.sum() == 0:
        return math.nan, math.nan
    has = pos > 0
    macro = float(np.mean(tp[has] / pos[has]))
    micro = float(tp.sum() / pos.sum())
    return macro, micro


def recipe_precursor_names(recipe: Recipe, vocab: PrecursorVocabulary) -> frozenset[str]:
    return frozenset(vocab.precursors[i] for i in recipe.precursor_ids) | frozenset(recipe.oov_precursors)


def case_split(
    test: Sequence[Recipe],
    registry: set[frozenset[str]],
    vocab: PrecursorVocabulary,
    mode: str = "exact",
) -> dict[str, list[Recipe]]:
    """Split test recipes into ``subset`` (precursor set seen in training) and ``new``.

    ``mode="subset-relation"`` counts a recipe as ``subset`` when its
    precursor set is contained in some training precursor set.
    """
    if mode not in ("exact", "subset-relation"):
        raise ValueError(f"unknown case mode {mode!r}")
    out: dict[str, list[Recipe]] = {"subset": [], "new": []}
    for r in test:
        names = recipe_precursor_names(r, vocab)
        if mode == "exact":
            seen = names in registry
        else:
            seen = any(names <= s for s in registry)
        out["subset" if seen else "new"].append(r)
    return out


@dataclass
class EvalReport:
    n: int
    top_k_acc: dict[int, float]
    macro_recall: float
    micro_recall: float
    oov_miss_count: int
    case_breakdown: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_k_acc"] = {str(k): v for k, v in self.top_k_acc.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        ks = sorted(self.top_k_acc)
        head = ["split", "n"] + [f"top{k}" for k in ks] + ["macroR", "microR"]
        rows = [["all", str(self.n)] + [f"{self.top_k_acc[k]:.4f}" for k in ks]
                + [f"{self.macro_recall:.4f}", f"{self.micro_recall:.4f}"]]
        for name, sub in sorted(self.case_breakdown.items()):
            rows.append([name, str(sub["n"])] + [f"{sub['top_k_acc'][str(k)]:.4f}" for k in ks]
                        + [f"{sub['macro_recall']:.4f}", f"{sub['micro_recall']:.4f}"])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
        lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
        lines.append(f"OOV gold sets counted as misses: {self.oov_miss_count}")
        return "\n".join(lines)


def _metrics(probs: np.ndarray, recipes: Sequence[Recipe], ks, decode) -> tuple[dict[int, float], float, float, int]:
    hits = {k: 0 for k in ks}
    oov = 0
    for p, r in zip(probs, recipes):
        preds = enumerate_sets(p, **decode)
        if r.has_oov:
            oov += 1
        for k in ks:
            hits[k] += exact_match_at_k(preds, r.precursor_ids, k, r.has_oov)
    n = len(recipes)
    acc = {k: (hits[k] / n if n else math.nan) for k in ks}
    if n:
        macro, micro = recalls(probs, np.stack([r.label for r in recipes]))
    else:
        macro = micro = math.nan
    return acc, macro, micro, oov


def evaluate(
    probs: np.ndarray,
    recipes: Sequence[Recipe],
    vocab: PrecursorVocabulary,
    registry: set[frozenset[str]] | None = None,
    ks: Sequence[int] = TOP_KS,
    case_mode: str = "exact",
    top_n: int = 10,
    max_size: int = 6,
    beam: int = 10,
) -> EvalReport:
    decode = {"top_n": top_n, "max_size": max_size, "beam": max(beam, max(ks))}
    probs = np.asarray(probs)
    acc, macro, micro, oov = _metrics(probs, recipes, ks, decode)
    report = EvalReport(len(recipes), acc, macro, micro, oov)
    if registry is not None:
        pos = {r.id: i for i, r in enumerate(recipes)}
        for name, group in case_split(recipes, registry, vocab, case_mode).items():
            rows = [pos[r.id] for r in group]
            g_acc, g_macro, g_micro, g_oov = _metrics(probs[rows] if rows else probs[:0], group, ks, decode)
            report.case_breakdown[name] = {
                "n": len(group),
                "top_k_acc": {str(k): v for k, v in g_acc.items()},
                "macro_recall": g_macro,
                "micro_recall": g_micro,
                "oov_miss_count": g_oov,
            }
    return report


def top_k_exact(probs: np.ndarray, recipes: Sequence[Recipe], k: int, **decode) -> float:
    """Fraction of recipes whose gold set is among the first ``k`` decoded sets."""
    if not recipes:
        return math.nan
    decode.setdefault("beam", max(k, 10))
    hits = sum(
        exact_match_at_k(enumerate_sets(p, **decode), r.precursor_ids, k, r.has_oov)
        for p, r in zip(probs, recipes)
    )
    return hits / len(recipes)
