"""Chemical formula parsing and composition vectors.

Grammar accepted by :func:`parse_formula`::

    formula := group+
    group   := ELEMENT count? | ('(' | '[') formula (')' | ']') count?
    count   := DIGITS ('.' DIGITS)? | '.' DIGITS

Counts are kept as exact rationals (denominator capped at 10**6).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .elements import ATOMIC_NUMBER, N_ELEMENTS

MAX_DENOMINATOR = 10**6

_TOKEN = re.compile(r"([A-Z][a-z]*)|(\d+(?:\.\d*)?|\.\d+)|([(\[])|([)\]])|(\S)")
_CLOSER = {"(": ")", "[": "]"}


class FormulaError(ValueError):
    """Raised for a formula that cannot be parsed; ``token`` names the culprit."""

    def __init__(self, message: str, token: str, formula: str):
        super().__init__(f"{message}: {token!r} in {formula!r}")
        self.token = token
        self.formula = formula


@dataclass(frozen=True, eq=False)
class Composition:
    formula: str
    amounts: Mapping[str, Fraction]
    vector: np.ndarray = field(repr=False)

    @property
    def elements(self) -> list[str]:
        """Element symbols in ascending atomic number."""
        return sorted(self.amounts, key=ATOMIC_NUMBER.__getitem__)

    @property
    def element_set(self) -> frozenset[str]:
        return frozenset(self.amounts)

    def fraction(self, symbol: str) -> float:
        return float(self.vector[ATOMIC_NUMBER[symbol] - 1])

    def key(self) -> tuple[tuple[str, Fraction], ...]:
        return tuple(sorted(self.amounts.items()))

    def reduced_key(self) -> tuple[tuple[str, Fraction], ...]:
        return tuple(sorted(_reduce(self.amounts).items()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Composition):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


def _tokenize(formula: str):
    for m in _TOKEN.finditer(formula):
        elem, num, opener, closer, junk = m.groups()
        if junk is not None:
            raise FormulaError("unexpected character", junk, formula)
        if elem is not None:
            yield "elem", elem
        elif num is not None:
            yield "num", num
        elif opener is not None:
            yield "open", opener
        else:
            yield "close", closer


def _read_count(tokens: list, pos: int) -> tuple[Fraction, int]:
    if pos < len(tokens) and tokens[pos][0] == "num":
        return Fraction(tokens[pos][1]), pos + 1
    return Fraction(1), pos


def parse_formula(formula: str) -> Composition:
    """Parse ``formula`` into a :class:`Composition`.

    Results are memoised; the returned object is read-only.

    >>> parse_formula("Ca(OH)2").amounts == {"Ca": 1, "O": 2, "H": 2}
    True
    """
    if not isinstance(formula, str):
        raise FormulaError("empty formula", str(formula), str(formula))
    return _parse_cached(formula)


@lru_cache(maxsize=1 << 16)
def _parse_cached(formula: str) -> Composition:
    if not isinstance(formula, str) or not formula.strip():
        raise FormulaError("empty formula", str(formula), str(formula))
    text = formula.strip()
    tokens = list(_tokenize(text))

    # stack of (opening bracket, accumulated counts)
    stack: list[tuple[str, dict[str, Fraction]]] = [("", {})]
    pos = 0
    while pos < len(tokens):
        kind, value = tokens[pos]
        if kind == "elem":
            if value not in ATOMIC_NUMBER:
                raise FormulaError("unknown element symbol", value, text)
            count, pos = _read_count(tokens, pos + 1)
            counts = stack[-1][1]
            counts[value] = counts.get(value, Fraction(0)) + count
        elif kind == "open":
            stack.append((value, {}))
            pos += 1
        elif kind == "close":
            opener, inner = stack.pop() if len(stack) > 1 else (None, None)
            if opener is None or _CLOSER[opener] != value:
                raise FormulaError("unbalanced parentheses", value, text)
            if not inner:
                raise FormulaError("empty group", opener + value, text)
            mult, pos = _read_count(tokens, pos + 1)
            counts = stack[-1][1]
            for sym, n in inner.items():
                counts[sym] = counts.get(sym, Fraction(0)) + n * mult
        else:
            raise FormulaError("count without element", value, text)
    if len(stack) > 1:
        raise FormulaError("unbalanced parentheses", stack[-1][0], text)

    amounts = {
        sym: n.limit_denominator(MAX_DENOMINATOR)
        for sym, n in stack[0][1].items()
        if n != 0
    }
    amounts = {sym: n for sym, n in amounts.items() if n > 0}
    total = sum(amounts.values(), Fraction(0))
    if total == 0:
        raise FormulaError("zero total atom count", text, text)
    return composition_from_amounts(amounts, formula=text)


def composition_from_amounts(amounts: Mapping[str, Fraction], formula: str | None = None) -> Composition:
    amounts = {sym: Fraction(n) for sym, n in amounts.items()}
    total = sum(amounts.values(), Fraction(0))
    vector = np.zeros(N_ELEMENTS, dtype=np.float64)
    for sym, n in amounts.items():
        vector[ATOMIC_NUMBER[sym] - 1] = float(n / total)
    vector.setflags(write=False)
    if formula is None:
        formula = format_formula(amounts)
    return Composition(formula=formula, amounts=MappingProxyType(amounts), vector=vector)


def _reduce(amounts: Mapping[str, Fraction]) -> dict[str, Fraction]:
    denom = math.lcm(*(n.denominator for n in amounts.values()))
    ints = [int(n * denom) for n in amounts.values()]
    g = math.gcd(*ints)
    return {sym: Fraction(i // g) for sym, i in zip(amounts, ints)}


def _format_count(n: Fraction) -> str:
    if n == 1:
        return ""
    if n.denominator == 1:
        return str(n.numerator)
    # finite decimal expansion iff denominator has only factors 2 and 5
    d = n.denominator
    k = 0
    while d % 2 == 0 or d % 5 == 0:
        d //= 2 if d % 2 == 0 else 5
        k += 1
    if d == 1:
        whole, frac = divmod(int(n * 10**k), 10**k)
        return f"{whole}.{frac:0{k}d}".rstrip("0")
    # 15 places is well below the 1/(10**6)**2 spacing of capped rationals
    return f"{float(n):.15f}".rstrip("0")


def format_formula(amounts: Mapping[str, Fraction], reduce: bool = False) -> str:
    """Render ``amounts`` with elements sorted by symbol.

    With ``reduce=True`` counts are scaled to the smallest integer ratio.
    Without it the exact counts survive a round trip through :func:`parse_formula`.
    """
    if reduce:
        amounts = _reduce(amounts)
    return "".join(sym + _format_count(Fraction(amounts[sym])) for sym in sorted(amounts))


def canonical_formula(comp: Composition | str, reduce: bool = True) -> str:
    if isinstance(comp, str):
        comp = parse_formula(comp)
    return format_formula(comp.amounts, reduce=reduce)
