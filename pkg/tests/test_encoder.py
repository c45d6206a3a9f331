import numpy as np
import pytest
import torch

from retrosynth.chemio import build_graph, fallback_element_features, parse_formula
from retrosynth.encoder import GraphEncoder, encode, encode_batch, load_encoder, pack_graphs, save_encoder
from retrosynth.nn import DTYPE


def _graph(formula, feats):
    return build_graph(parse_formula(formula), feats)


def test_single_node_graph_has_no_edge_messages(feats8):
    enc = GraphEncoder(8, hidden_dim=6, n_layers=2, seed=0)
    g = _graph("O", feats8)
    x = torch.from_numpy(np.concatenate([g.features, g.fractions[:, None]], 1)).to(DTYPE)
    with torch.no_grad():
        e = enc.node_encoder(x)
        for node_mlp in enc.node_updaters:
            e = node_mlp(torch.cat([e, torch.zeros_like(e)], 1))
    np.testing.assert_allclose(encode(g, enc), e[0].numpy(), rtol=0, atol=1e-12)


def test_permuting_nodes_keeps_g(feats8):
    enc = GraphEncoder(8, hidden_dim=16, n_layers=3, seed=1)
    for formula in ["SiO2", "LiFePO4", "Ba2Ca(OH)2"]:
        g = _graph(formula, feats8)
        order = np.arange(g.n_nodes)[::-1]
        np.testing.assert_allclose(encode(g, enc), encode(g.permuted(order), enc), rtol=0, atol=1e-6)


def _set_linear(lin, w, b):
    with torch.no_grad():
        lin.weight.copy_(torch.tensor(w, dtype=DTYPE))
        lin.bias.copy_(torch.tensor(b, dtype=DTYPE))


def test_two_node_hand_trace():
    feats = fallback_element_features(dim=1)
    for s in ("Si", "O"):
        feats.table[s] = np.array([1.0 if s == "Si" else 2.0])
    enc = GraphEncoder(1, hidden_dim=2, n_layers=1, seed=0)
    eye = np.eye(2)
    # node encoder: [f, x] -> ReLU(I) -> I
    _set_linear(enc.node_encoder[0], eye, [0, 0])
    _set_linear(enc.node_encoder[2], eye, [0, 0])
    # edge encoder: [f_i, x_i, f_j, x_j] -> (f_i + f_j, x_i + x_j)
    _set_linear(enc.edge_encoder[0], [[1, 0, 1, 0], [0, 1, 0, 1]], [0, 0])
    _set_linear(enc.edge_encoder[2], eye, [0, 0])
    # edge update: [e_i, e_j, a] -> e_i + a
    _set_linear(enc.edge_updaters[0][0], [[1, 0, 0, 0, 1, 0], [0, 1, 0, 0, 0, 1]], [0, 0])
    _set_linear(enc.edge_updaters[0][2], eye, [0, 0])
    # node update: [e, agg] -> e + agg
    _set_linear(enc.node_updaters[0][0], [[1, 0, 1, 0], [0, 1, 0, 1]], [0, 0])
    _set_linear(enc.node_updaters[0][2], eye, [0, 0])
    g = build_graph(parse_formula("SiO2"), feats)
    # nodes: O (f=2, x=2/3), Si (f=1, x=1/3)
    e_o, e_si = np.array([2, 2 / 3]), np.array([1, 1 / 3])
    a = e_o + e_si  # both directions share the same encoded edge
    new_o = e_o + (e_o + a)
    new_si = e_si + (e_si + a)
    np.testing.assert_allclose(encode(g, enc), new_o + new_si, rtol=0, atol=1e-12)


def test_batch_matches_loop(feats8):
    enc = GraphEncoder(8, hidden_dim=12, n_layers=2, seed=3)
    graphs = [_graph(f, feats8) for f in ["SiO2", "O", "LiFePO4", "Ca(OH)2", "La0.7Sr0.3MnO3"]]
    batch = encode_batch(graphs, enc)
    assert len(batch) == len(graphs)
    for g, b in zip(graphs, batch):
        assert np.max(np.abs(encode(g, enc) - b)) <= 1e-6
    np.testing.assert_array_equal(encode_batch(graphs[:1], enc)[0], encode(graphs[0], enc))
    assert encode_batch([], enc) == []


def test_width_mismatch_names_tensor(feats8):
    enc = GraphEncoder(4, hidden_dim=4, n_layers=1)
    with pytest.raises(ValueError, match="node features"):
        enc(pack_graphs([_graph("SiO2", feats8)]))


def test_save_load_roundtrip(tmp_path, feats8):
    enc = GraphEncoder(8, hidden_dim=8, n_layers=2, seed=5)
    save_encoder(enc, tmp_path / "enc.pt")
    back = load_encoder(tmp_path / "enc.pt", feats8)
    g = _graph("LiFePO4", feats8)
    np.testing.assert_array_equal(encode(g, enc), encode(g, back))
    with pytest.raises(ValueError):
        load_encoder(tmp_path / "enc.pt", fallback_element_features(dim=3))


def test_seed_determines_parameters():
    a = GraphEncoder(8, 8, 2, seed=0)
    b = GraphEncoder(8, 8, 2, seed=0)
    c = GraphEncoder(8, 8, 2, seed=1)
    for (_, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q)
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))
