import json

import pytest

from retrosynth.chemio import canonical_formula, load_recipes, parse_formula
from retrosynth.nre import load_energy_csv
from retrosynth.synthgen import ENERGY_EXTRA, METAL_POOL, _energy_model, SynthConfig, generate_corpus, make_rule, write_corpus

SMALL = dict(n_recipes=60, n_dft=50, n_exp=10)


def test_byte_identical(tmp_path):
    cfg = SynthConfig(**SMALL)
    a = write_corpus(generate_corpus(cfg), tmp_path / "a", cfg)
    b = write_corpus(generate_corpus(cfg), tmp_path / "b", cfg)
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_rule_is_obeyed(tmp_path):
    cfg = SynthConfig(**SMALL)
    corpus = generate_corpus(cfg)
    for rec in corpus.records:
        metals = [e for e in parse_formula(rec["target_formula"]).amounts if e in METAL_POOL]
        assert rec["precursor_formulas"] == corpus.rule.precursors_for(metals)


def test_ingests_cleanly(tmp_path):
    cfg = SynthConfig(**SMALL)
    paths = write_corpus(generate_corpus(cfg), tmp_path, cfg)
    res = load_recipes(paths["recipes"])
    assert res.rejects == [] and len(res.records) == 60
    lo, hi = cfg.year_range
    assert all(lo <= r.year <= hi for r in res.records)
    assert len(load_energy_csv(paths["dft"], "dft")) == 50
    assert len(load_energy_csv(paths["exp"], "experimental")) == 10


def test_vocab_size_and_seed():
    cfg = SynthConfig()
    rule = make_rule(cfg)
    assert sum(len(v) for v in rule.sources.values()) == cfg.vocab_size
    assert len(rule.sources) == cfg.n_elements
    assert make_rule(SynthConfig(rule_seed=8)).sources != rule.sources


def test_exp_energy_is_biased_dft_function():
    cfg = SynthConfig(n_recipes=10, n_dft=100, n_exp=20, exp_noise=0.0)
    corpus = generate_corpus(cfg)
    pool = sorted(set(corpus.rule.sources) | set(ENERGY_EXTRA))
    energy = _energy_model(pool, cfg.rule_seed)
    for f, e in corpus.dft:
        assert e == energy(f)
    for f, e in corpus.exp:
        assert e - energy(f) == pytest.approx(cfg.exp_bias, abs=1e-12)


def test_noise_flips_recorded(tmp_path):
    cfg = SynthConfig(n_recipes=200, noise_rate=0.3, n_dft=50, n_exp=10)
    corpus = generate_corpus(cfg)
    assert corpus.noisy_ids
    paths = write_corpus(corpus, tmp_path, cfg)
    assert json.loads(paths["meta"].read_text())["noisy_ids"] == corpus.noisy_ids


@pytest.mark.parametrize("bad", [dict(vocab_size=3), dict(n_recipes=5), dict(n_elements=30)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_canonical_sources_unique():
    rule = make_rule(SynthConfig())
    forms = [canonical_formula(s) for v in rule.sources.values() for s in v]
    assert len(forms) == len(set(forms))
