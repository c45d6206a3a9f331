"""Deterministic synthetic recipe corpora and formation-energy tables.

Each metal has one or two fixed source compounds. Which source a recipe uses
depends on the other metals in its target: a metal switches to its second
source when any co-occurring metal carries the rule's "affinity" flag. The
gold precursor set is therefore a function of the target's element set, and
targets that share elements tend to share precursors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .chemio import canonical_formula, parse_formula
from .nre import write_energy_csv

METAL_POOL = (
    "Li", "Na", "K", "Mg", "Ca", "Sr", "Ba", "Ti", "V", "Cr", "Mn", "Fe",
    "Co", "Ni", "Cu", "Zn", "Y", "Zr", "Nb", "Mo", "La", "Ce", "Bi", "Pb",
)
SOURCE_TEMPLATES = ("{e}O", "{e}CO3", "{e}(NO3)2", "{e}2O3", "{e}(OH)2", "{e}C2O4")
ENERGY_EXTRA = ("C", "H", "O", "N")


@dataclass
class SynthConfig:
    n_recipes: int = 500
    n_elements: int = 12
    vocab_size: int = 24
    rule_seed: int = 7
    noise_rate: float = 0.0
    year_range: tuple[int, int] = (2005, 2020)
    n_dft: int = 2000
    n_exp: int = 100
    exp_bias: float = 0.15
    exp_noise: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.n_recipes < 10:
            raise ValueError("n_recipes must be >= 10")
        if not 2 <= self.n_elements <= len(METAL_POOL):
            raise ValueError(f"n_elements must be in [2, {len(METAL_POOL)}]")
        if not self.n_elements <= self.vocab_size <= 2 * self.n_elements:
            raise ValueError("vocab_size must lie between n_elements and 2 * n_elements")
        self.year_range = tuple(self.year_range)


@dataclass
class TemplateRule:
    sources: dict[str, list[str]]  # metal -> 1 or 2 source formulas
    affinity: dict[str, bool]

    def precursors_for(self, metals) -> list[str]:
        metals = sorted(metals)
        out = []
        for e in metals:
            choice = 0
            if len(self.sources[e]) == 2 and any(self.affinity[f] for f in metals if f != e):
                choice = 1
            out.append(self.sources[e][choice])
        return out

    def alternative(self, metal: str, used: str) -> str | None:
        alts = [s for s in self.sources[metal] if s != used]
        return alts[0] if alts else None


@dataclass
class SynthCorpus:
    records: list[dict]
    dft: list[tuple[str, float]]
    exp: list[tuple[str, float]]
    rule: TemplateRule
    noisy_ids: list[str] = field(default_factory=list)


def make_rule(cfg: SynthConfig) -> TemplateRule:
    rng = np.random.default_rng([cfg.rule_seed, 0])
    metals = sorted(rng.choice(METAL_POOL, size=cfg.n_elements, replace=False).tolist())
    n_dual = cfg.vocab_size - cfg.n_elements
    dual = set(rng.choice(metals, size=n_dual, replace=False).tolist()) if n_dual else set()
    sources = {}
    for e in metals:
        picks = rng.choice(len(SOURCE_TEMPLATES), size=2, replace=False)
        forms = [SOURCE_TEMPLATES[i].format(e=e) for i in picks]
        sources[e] = forms if e in dual else forms[:1]
    affinity = {e: bool(rng.random() < 0.5) for e in metals}
    return TemplateRule(sources, affinity)


def _energy_model(elements, seed: int):
    rng = np.random.default_rng([seed, 1])
    elements = sorted(elements)
    a = {e: float(v) for e, v in zip(elements, rng.normal(-1.0, 0.7, len(elements)))}
    b = {}
    for i, e in enumerate(elements):
        for f in elements[i + 1 :]:
            b[(e, f)] = float(rng.normal(0.0, 0.5))

    def energy(formula: str) -> float:
        comp = parse_formula(formula)
        x = {e: comp.fraction(e) for e in comp.amounts}
        es = sorted(x)
        val = sum(x[e] * a[e] for e in es)
        for i, e in enumerate(es):
            for f in es[i + 1 :]:
                val += 2.0 * x[e] * x[f] * b[(e, f)]
        return val

    return energy


def _random_target(rng, metals) -> str:
    k = int(rng.integers(2, min(4, len(metals)) + 1))
    chosen = sorted(rng.choice(metals, size=k, replace=False).tolist())
    parts = []
    for e in chosen:
        if rng.random() < 0.1:
            n = f"{int(rng.integers(1, 8)) / 2:g}"
        else:
            n = str(int(rng.integers(1, 5)))
        parts.append(e + ("" if n == "1" else n))
    if rng.random() < 0.8:
        parts.append("O" + str(int(rng.integers(1, 8))))
    return "".join(parts)


def _random_energy_formula(rng, elements) -> str:
    k = int(rng.integers(1, 4))
    chosen = sorted(rng.choice(elements, size=k, replace=False).tolist())
    return "".join(e + str(int(rng.integers(1, 6))) for e in chosen)


def generate_corpus(cfg: SynthConfig) -> SynthCorpus:
    rule = make_rule(cfg)
    metals = sorted(rule.sources)
    rng = np.random.default_rng([cfg.rule_seed, 2])
    records, noisy = [], []
    lo, hi = cfg.year_range
    for i in range(cfg.n_recipes):
        target = _random_target(rng, metals)
        comp = parse_formula(target)
        present = [e for e in metals if e in comp.amounts]
        precs = rule.precursors_for(present)
        if cfg.noise_rate > 0 and rng.random() < cfg.noise_rate:
            j = int(rng.integers(len(present)))
            alt = rule.alternative(sorted(present)[j], precs[j])
            if alt is not None:
                precs[j] = alt
                noisy.append(f"syn{i:05d}")
        records.append({
            "id": f"syn{i:05d}",
            "target_formula": target,
            "precursor_formulas": precs,
            "year": int(rng.integers(lo, hi + 1)),
        })

    pool = sorted(set(metals) | set(ENERGY_EXTRA))
    energy = _energy_model(pool, cfg.rule_seed)
    erng = np.random.default_rng([cfg.rule_seed, 3])
    dft_formulas: dict[str, None] = {}
    for srcs in rule.sources.values():
        for s in srcs:
            dft_formulas.setdefault(canonical_formula(s))
    while len(dft_formulas) < cfg.n_dft:
        dft_formulas.setdefault(canonical_formula(_random_energy_formula(erng, pool)))
    dft = [(f, energy(f)) for f in list(dft_formulas)[: cfg.n_dft]]
    exp_formulas: dict[str, None] = {}
    while len(exp_formulas) < cfg.n_exp:
        exp_formulas.setdefault(canonical_formula(_random_energy_formula(erng, pool)))
    noise = erng.normal(0.0, cfg.exp_noise, cfg.n_exp)
    exp = [(f, energy(f) + cfg.exp_bias + float(z)) for f, z in zip(exp_formulas, noise)]
    return SynthCorpus(records, dft, exp, rule, noisy)


def write_corpus(corpus: SynthCorpus, out_dir: str | Path, cfg: SynthConfig | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "recipes": out / "recipes.jsonl",
        "dft": out / "dft.csv",
        "exp": out / "exp.csv",
        "meta": out / "meta.json",
    }
    with open(paths["recipes"], "w", encoding="utf-8") as fh:
        for rec in corpus.records:
            fh.write(json.dumps(rec) + "\n")
    write_energy_csv(corpus.dft, paths["dft"])
    write_energy_csv(corpus.exp, paths["exp"])
    meta = {
        "config": asdict(cfg) if cfg else None,
        "sources": corpus.rule.sources,
        "affinity": corpus.rule.affinity,
        "noisy_ids": corpus.noisy_ids,
    }
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True))
    return paths
