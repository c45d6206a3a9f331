import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrosynth.chemio import (
    SYMBOLS,
    FormulaError,
    KnowledgeBase,
    MissingElementFeature,
    build_graph,
    build_vocab_and_kb,
    canonical_formula,
    fallback_element_features,
    format_formula,
    labelize,
    load_element_features,
    load_recipes,
    parse_formula,
    split_dataset,
)
from retrosynth.chemio.recipes import RecipeRecord


def test_sio2_vector():
    c = parse_formula("SiO2")
    expected = np.zeros(118)
    expected[13] = 1 / 3
    expected[7] = 2 / 3
    np.testing.assert_allclose(c.vector, expected, rtol=0, atol=1e-15)


def test_single_element():
    c = parse_formula("O")
    assert c.vector[7] == 1.0
    assert np.count_nonzero(c.vector) == 1


def test_parentheses_expand():
    c = parse_formula("Ca(OH)2")
    assert c.amounts == {"Ca": 1, "O": 2, "H": 2}
    assert c.fraction("Ca") == pytest.approx(0.2)
    assert c.fraction("O") == pytest.approx(0.4)
    assert c.fraction("H") == pytest.approx(0.4)


def test_nested_brackets():
    c = parse_formula("Pb9[Li2(P2O7)2(P4O13)2]")
    assert c.amounts == {"Pb": 9, "Li": 2, "P": 12, "O": 40}


def test_decimal_counts_are_rational():
    c = parse_formula("La0.7Sr0.3MnO3")
    assert c.amounts["La"] == Fraction(7, 10)
    assert c.amounts["Sr"] == Fraction(3, 10)
    assert c.vector.sum() == pytest.approx(1.0, abs=1e-9)


def test_token_order_does_not_matter():
    np.testing.assert_array_equal(parse_formula("O2Si").vector, parse_formula("SiO2").vector)


@pytest.mark.parametrize(
    "bad, token",
    [("Xy2", "Xy"), ("Si(O2", "("), ("SiO2)", ")"), ("O0", "O0"), ("(SiO2]", "]")],
)
def test_parse_errors_name_token(bad, token):
    with pytest.raises(FormulaError) as err:
        parse_formula(bad)
    assert err.value.token == token


def test_canonical_reduces_and_sorts():
    assert canonical_formula("Si2O4") == "O2Si"
    assert canonical_formula("CO3Li2") == canonical_formula("Li2CO3")


element_st = st.sampled_from(SYMBOLS)
count_st = st.one_of(
    st.integers(1, 50).map(Fraction),
    st.integers(1, 999).map(lambda n: Fraction(n, 100)),
)


@given(st.dictionaries(element_st, count_st, min_size=1, max_size=6))
@settings(max_examples=200, deadline=None)
def test_round_trip_preserves_amounts(amounts):
    text = format_formula(amounts)
    c = parse_formula(text)
    assert dict(c.amounts) == amounts
    assert parse_formula(format_formula(c.amounts)).amounts == c.amounts
    assert abs(c.vector.sum() - 1) < 1e-9
    assert np.all((c.vector >= 0) & (c.vector <= 1))
    nz = {SYMBOLS[i] for i in np.flatnonzero(c.vector)}
    assert nz == set(amounts)


@pytest.mark.parametrize("formula, n, e", [("SiO2", 2, 2), ("O", 1, 0), ("LiFePO4", 4, 12)])
def test_graph_sizes(formula, n, e):
    g = build_graph(parse_formula(formula), fallback_element_features(dim=8))
    assert g.n_nodes == n
    assert g.n_edges == e
    adj = g.adjacency
    assert np.all(adj + np.eye(n, dtype=np.int8) == 1)


def test_graph_node_order_is_atomic_number():
    g = build_graph(parse_formula("PO4FeLi"), fallback_element_features(dim=8))
    assert g.elements == ["Li", "O", "P", "Fe"]
    assert g.fractions.sum() == pytest.approx(1.0)


def test_missing_feature_lists_element(tmp_path):
    p = tmp_path / "feats.json"
    p.write_text(json.dumps({"Si": [1.0, 0.0], "Na": [0.0, 1.0]}))
    feats = load_element_features(p)
    assert feats.source == "file" and feats.dim == 2
    with pytest.raises(MissingElementFeature) as err:
        build_graph(parse_formula("SiO2"), feats)
    assert err.value.elements == ["O"]


def test_feature_file_rejects_ragged(tmp_path):
    p = tmp_path / "feats.json"
    p.write_text(json.dumps({"Si": [1.0, 0.0], "O": [1.0]}))
    with pytest.raises(ValueError):
        load_element_features(p)


def test_fallback_features():
    a = fallback_element_features(16, seed=3)
    b = fallback_element_features(16, seed=3)
    assert a.source == "fallback"
    for sym in SYMBOLS:
        np.testing.assert_array_equal(a[sym], b[sym])
        assert np.linalg.norm(a[sym]) == pytest.approx(1.0, abs=1e-6)
    mat = np.stack([a[s] for s in SYMBOLS])
    assert len({row.tobytes() for row in mat}) == len(SYMBOLS)
    assert fallback_element_features(16, seed=4)["Fe"].tolist() != a["Fe"].tolist()


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


def test_load_recipes_collects_rejects(tmp_path):
    p = tmp_path / "r.jsonl"
    _write_lines(p, [
        json.dumps({"id": "r1", "target_formula": "SiO2", "precursor_formulas": ["SiO2"], "year": 2010}),
        json.dumps({"id": "r2", "target_formula": "LiFePO4", "precursor_formulas": ["Li2CO3", "FePO4"]}),
        json.dumps({"id": "r3", "target_formula": "PbO", "precursor_formulas": ["PbO"], "year": 2019}),
        json.dumps({"id": "r4", "target_formula": "BaTiO3"}),
    ])
    res = load_recipes(p)
    assert [r.id for r in res.records] == ["r1", "r2", "r3"]
    assert len(res.rejects) == 1
    assert res.rejects[0].line == 4
    assert "precursor_formulas" in res.rejects[0].reason
    assert res.records[0].year == 2010 and res.records[1].year is None


def test_load_recipes_rejects_bad_formula_and_json(tmp_path):
    p = tmp_path / "r.jsonl"
    _write_lines(p, [
        json.dumps({"id": "a", "target_formula": "Qq2", "precursor_formulas": ["SiO2"]}),
        "{not json",
        json.dumps({"id": "b", "target_formula": "SiO2", "precursor_formulas": []}),
    ])
    res = load_recipes(p)
    assert res.records == []
    assert [r.line for r in res.rejects] == [1, 2, 3]
    assert "Qq" in res.rejects[0].reason


def test_load_recipes_unreadable(tmp_path):
    with pytest.raises(OSError):
        load_recipes(tmp_path / "nope.jsonl")


def _rec(rid, target="SiO2", precs=("SiO2",), year=None):
    return RecipeRecord(rid, parse_formula(target), tuple(precs), year)


def test_year_split():
    recs = [_rec("a", year=2010), _rec("b", year=2015), _rec("c", year=2019)]
    tr, va, te = split_dataset(recs, "year")
    assert [r.id for r in tr] == ["a"]
    assert [r.id for r in va] == ["b"]
    assert [r.id for r in te] == ["c"]


def test_year_split_needs_years():
    with pytest.raises(ValueError, match="'b'"):
        split_dataset([_rec("a", year=2010), _rec("b")], "year")


def test_random_split_sizes_and_determinism():
    recs = [_rec(f"r{i}") for i in range(10)]
    tr, va, te = split_dataset(recs, "random", seed=5)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    again = split_dataset(recs, "random", seed=5)
    assert [[r.id for r in part] for part in again] == [[r.id for r in part] for part in (tr, va, te)]
    ids = [r.id for part in (tr, va, te) for r in part]
    assert sorted(ids) == sorted(r.id for r in recs)


@given(st.integers(1, 200), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_random_split_partitions(n, seed):
    recs = [_rec(f"r{i}") for i in range(n)]
    parts = split_dataset(recs, "random", seed=seed)
    ids = [r.id for part in parts for r in part]
    assert len(ids) == len(set(ids)) == n


def test_vocab_and_labels():
    train = [_rec("a", "Li2PbO2", ("Li2CO3", "PbO")), _rec("b", "PbO", ("PbO",))]
    vocab, kb = build_vocab_and_kb(train)
    assert vocab.precursors == tuple(sorted([canonical_formula("Li2CO3"), "OPb"]))
    assert len(vocab) == 2
    assert isinstance(kb, KnowledgeBase)
    for r in kb.recipes:
        assert int(r.label.sum()) == len(r.precursor_ids) > 0
        assert all(r.label[i] == 1 for i in r.precursor_ids)


def test_vocab_merges_reordered_formulas():
    vocab, _ = build_vocab_and_kb([_rec("a", "Li2O", ("Li2CO3",)), _rec("b", "Li2O", ("CO3Li2",))])
    assert len(vocab) == 1


def test_test_recipe_with_oov_is_kept():
    vocab, kb = build_vocab_and_kb([_rec("a", "PbO", ("PbO",))])
    [t] = labelize([_rec("t", "Li2PbO2", ("PbO", "Li2CO3"))], vocab)
    assert t.oov_precursors == (canonical_formula("Li2CO3"),)
    assert t.precursor_ids == {0}
    assert "t" not in kb.ids
