import numpy as np
import pytest

from retrosynth.chemio import build_vocab_and_kb, fallback_element_features, parse_formula
from retrosynth.chemio.recipes import RecipeRecord

METALS = ["Li", "Na", "Mg", "Ca", "Ti", "Fe", "Co", "Ni", "Cu", "Zn"]
SOURCES = {m: [f"{m}2O3", f"{m}CO3"] for m in METALS}


def random_kb(n: int, seed: int):
    """Knowledge base of ``n`` random ternary oxides with random element-wise sources."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        k = int(rng.integers(1, 4))
        metals = sorted(rng.choice(METALS, size=k, replace=False).tolist())
        target = "".join(f"{m}{int(rng.integers(1, 4))}" for m in metals) + f"O{int(rng.integers(1, 6))}"
        precs = tuple(SOURCES[m][int(rng.integers(2))] for m in metals)
        if rng.random() < 0.3:
            precs += ("NH4NO3",)
        recs.append(RecipeRecord(f"r{i:03d}", parse_formula(target), precs, 2010))
    return build_vocab_and_kb(recs)


@pytest.fixture(scope="session")
def feats8():
    return fallback_element_features(dim=8, seed=0)


@pytest.fixture(scope="session")
def small_kb():
    return random_kb(30, seed=1)


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, name: str, ok: bool, detail: str) -> None:
    _ACCEPTANCE[n] = f"ACCEPTANCE {n} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
