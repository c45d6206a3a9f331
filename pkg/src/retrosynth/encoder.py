"""Composition graph encoder: encoder/processor message passing with sum pooling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .chemio import Composition, CompositionGraph, ElementFeatureTable, build_graph
from .nn import DTYPE, mlp, seeded


@dataclass
class GraphBatch:
    """Several graphs packed into one disjoint graph."""

    x: torch.Tensor  # (N, feature_dim + 1): element feature with the fraction appended
    src: torch.Tensor  # (E,)
    dst: torch.Tensor  # (E,)
    node_graph: torch.Tensor  # (N,) owning graph of each node
    n_graphs: int


def _node_inputs(graph: CompositionGraph) -> np.ndarray:
    return np.concatenate([graph.features, graph.fractions[:, None]], axis=1)


def pack_graphs(graphs: Sequence[CompositionGraph]) -> GraphBatch:
    xs, srcs, dsts, owners = [], [], [], []
    offset = 0
    for k, g in enumerate(graphs):
        xs.append(_node_inputs(g))
        srcs.append(g.edge_index[0] + offset)
        dsts.append(g.edge_index[1] + offset)
        owners.append(np.full(g.n_nodes, k, dtype=np.int64))
        offset += g.n_nodes
    return _to_batch(xs, srcs, dsts, owners, len(graphs))


def _to_batch(xs, srcs, dsts, owners, n) -> GraphBatch:
    if n == 0:
        empty = torch.zeros(0, dtype=torch.long)
        return GraphBatch(torch.zeros(0, 0, dtype=DTYPE), empty, empty, empty, 0)
    return GraphBatch(
        x=torch.from_numpy(np.concatenate(xs)).to(DTYPE),
        src=torch.from_numpy(np.concatenate(srcs)),
        dst=torch.from_numpy(np.concatenate(dsts)),
        node_graph=torch.from_numpy(np.concatenate(owners)),
        n_graphs=n,
    )


class GraphBank:
    """Graphs for a fixed list of compositions, packable by index."""

    def __init__(self, compositions: Sequence[Composition], feats: ElementFeatureTable):
        graphs = [build_graph(c, feats) for c in compositions]
        self._x = [_node_inputs(g) for g in graphs]
        self._edges = [g.edge_index for g in graphs]
        self._sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self._x)

    def pack(self, indices: Sequence[int]) -> GraphBatch:
        xs, srcs, dsts, owners = [], [], [], []
        offset = 0
        for k, i in enumerate(indices):
            xs.append(self._x[i])
            srcs.append(self._edges[i][0] + offset)
            dsts.append(self._edges[i][1] + offset)
            owners.append(np.full(self._sizes[i], k, dtype=np.int64))
            offset += self._sizes[i]
        return _to_batch(xs, srcs, dsts, owners, len(indices))


class GraphEncoder(nn.Module):
    """Maps a composition graph to a single vector ``g`` of size ``hidden_dim``.

    Node encoder and edge encoder produce the initial states; each processor
    layer updates every directed edge from its two endpoints, then every node
    from its own state and the sum of its outgoing edge states. The graph
    vector is the sum of final node states.
    """

    def __init__(self, feature_dim: int, hidden_dim: int = 256, n_layers: int = 3, seed: int = 0):
        super().__init__()
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.seed = seed
        node_in = feature_dim + 1
        D = hidden_dim
        with seeded(seed):
            self.node_encoder = mlp(node_in, D, D)
            self.edge_encoder = mlp(2 * node_in, D, D)
            self.edge_updaters = nn.ModuleList(mlp(3 * D, D, D) for _ in range(n_layers))
            self.node_updaters = nn.ModuleList(mlp(2 * D, D, D) for _ in range(n_layers))
        self.to(DTYPE)

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        D = self.hidden_dim
        if batch.n_graphs == 0:
            return torch.zeros(0, D, dtype=DTYPE)
        x = batch.x
        if x.shape[1] != self.feature_dim + 1:
            raise ValueError(
                f"node features: expected width {self.feature_dim + 1} "
                f"(feature_dim {self.feature_dim} + fraction), got {x.shape[1]}"
            )
        src, dst = batch.src, batch.dst
        e = self.node_encoder(x)
        a = self.edge_encoder(torch.cat([x[src], x[dst]], dim=1))
        for edge_mlp, node_mlp in zip(self.edge_updaters, self.node_updaters):
            a = edge_mlp(torch.cat([e[src], e[dst], a], dim=1))
            agg = torch.zeros(e.shape[0], D, dtype=e.dtype).index_add(0, src, a)
            e = node_mlp(torch.cat([e, agg], dim=1))
        return torch.zeros(batch.n_graphs, D, dtype=e.dtype).index_add(0, batch.node_graph, e)

    def config(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "D": self.hidden_dim,
            "L'": self.n_layers,
            "seed": self.seed,
        }


def encode(graph: CompositionGraph, encoder: GraphEncoder) -> np.ndarray:
    with torch.no_grad():
        return encoder(pack_graphs([graph]))[0].numpy()


def encode_batch(graphs: Sequence[CompositionGraph], encoder: GraphEncoder) -> list[np.ndarray]:
    if not graphs:
        return []
    with torch.no_grad():
        out = encoder(pack_graphs(graphs)).numpy()
    return list(out)


def save_encoder(encoder: GraphEncoder, path: str | Path) -> None:
    path = Path(path)
    torch.save(encoder.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(encoder.config(), indent=2))


def load_encoder(path: str | Path, feats: ElementFeatureTable | None = None) -> GraphEncoder:
    path = Path(path)
    cfg = json.loads(path.with_suffix(".json").read_text())
    if feats is not None and feats.dim != cfg["feature_dim"]:
        raise ValueError(
            f"{path}: checkpoint expects feature_dim {cfg['feature_dim']}, "
            f"feature table has {feats.dim}"
        )
    enc = GraphEncoder(cfg["feature_dim"], cfg["D"], cfg["L'"], cfg["seed"])
    enc.load_state_dict(torch.load(path, weights_only=True))
    return enc
