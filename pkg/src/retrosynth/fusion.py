"""Implicit precursor extraction from retrieved references, and the final classifier.

References from each retriever are conditioned on the target, refined by
parameter-free self-attention among themselves, then read by the target
through parameter-free cross-attention. The two pooled vectors and the
target vector feed a multi-label classifier over the precursor vocabulary.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .chemio import Composition, ElementFeatureTable, KnowledgeBase, Recipe
from .encoder import GraphBank, GraphEncoder
from .evalkit import top_k_exact
from .nn import DTYPE, NonFiniteLoss, clone_state, mlp, seeded
from .retrieval import RetrievalTable

log = logging.getLogger(__name__)


def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(D)) over keys; masked keys get weight 0.

    Rows with no visible key get all-zero weights.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is None:
        return torch.softmax(scores, dim=-1)
    mask = mask.unsqueeze(-2)  # broadcast over query rows
    scores = scores.masked_fill(~mask, float("-inf"))
    any_key = mask.any(dim=-1, keepdim=True)
    scores = torch.where(any_key, scores, torch.zeros_like(scores))
    return torch.softmax(scores, dim=-1) * any_key


def condition_refs(G_r: torch.Tensor, g_t: torch.Tensor, phi1: nn.Module) -> torch.Tensor:
    """Row k becomes ``phi1(g_r^k || g_t)``. Shapes (..., K, D) and (..., D)."""
    if G_r.shape[-1] != g_t.shape[-1]:
        raise ValueError(f"reference width {G_r.shape[-1]} != target width {g_t.shape[-1]}")
    g = g_t.unsqueeze(-2).expand(*G_r.shape[:-1], g_t.shape[-1])
    return phi1(torch.cat([G_r, g], dim=-1))


def self_attend(G: torch.Tensor, n_layers: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """``n_layers`` rounds of G <- softmax(G G^T / sqrt(D)) G with no projections."""
    for _ in range(n_layers):
        G = attention_weights(G, G, mask) @ G
    return G


def cross_attend(g_t: torch.Tensor, G: torch.Tensor, n_layers: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """``n_layers`` rounds of g <- softmax(g G^T / sqrt(D)) G, keys and values fixed at ``G``.

    With no visible reference the result is the zero vector.
    """
    g = g_t.unsqueeze(-2)
    for _ in range(n_layers):
        g = attention_weights(g, G, mask) @ G
    return g.squeeze(-2)


def classify(g_t, g_mpc, g_nre, classifier: nn.Module) -> torch.Tensor:
    """Per-precursor probabilities from the concatenated vectors."""
    if not (g_t.shape[-1] == g_mpc.shape[-1] == g_nre.shape[-1]):
        raise ValueError(
            f"classifier inputs differ in width: {g_t.shape[-1]}, {g_mpc.shape[-1]}, {g_nre.shape[-1]}"
        )
    return torch.sigmoid(classifier(torch.cat([g_t, g_mpc, g_nre], dim=-1)))


@dataclass
class FusionConfig:
    hidden_dim: int = 256
    n_layers: int = 3
    self_layers: int = 1
    cross_layers: int = 2
    k: int = 3
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 500
    batch_size: int = 128
    patience: int | None = 30
    seed: int = 0
    use_retrieval: bool = True
    # decoding used for the validation Top-5 monitor
    top_n: int = 10
    max_size: int = 6


class RetroModel(nn.Module):
    def __init__(self, feature_dim: int, n_precursors: int, cfg: FusionConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.cfg = cfg
        self.n_precursors = n_precursors
        self.encoder = GraphEncoder(feature_dim, D, cfg.n_layers, seed=cfg.seed)
        with seeded(cfg.seed + 1):
            self.phi1_mpc = mlp(2 * D, D, D)
            self.phi1_nre = mlp(2 * D, D, D)
            self.classifier = mlp(3 * D, 2 * n_precursors, n_precursors)
        for m in (self.phi1_mpc, self.phi1_nre, self.classifier):
            m.to(DTYPE)

    def branch(self, g_t, G_r, mask, phi1) -> torch.Tensor:
        G = condition_refs(G_r, g_t, phi1)
        G = self_attend(G, self.cfg.self_layers, mask)
        return cross_attend(g_t, G, self.cfg.cross_layers, mask)

    def logits_from_reps(self, g_t, G_mpc, m_mpc, G_nre, m_nre) -> torch.Tensor:
        if self.cfg.use_retrieval:
            g_m = self.branch(g_t, G_mpc, m_mpc, self.phi1_mpc)
            g_n = self.branch(g_t, G_nre, m_nre, self.phi1_nre)
        else:
            g_m = g_n = torch.zeros_like(g_t)
        return self.classifier(torch.cat([g_t, g_m, g_n], dim=-1))

    def forward_indices(self, bank: GraphBank, target_idx, mpc_idx, nre_idx) -> torch.Tensor:
        """Logits for a batch given bank positions; ``*_idx`` are (B, K) arrays padded with -1."""
        mpc_idx = np.asarray(mpc_idx, dtype=np.int64).reshape(len(target_idx), -1)
        nre_idx = np.asarray(nre_idx, dtype=np.int64).reshape(len(target_idx), -1)
        needed = np.asarray(target_idx, dtype=np.int64)
        if self.cfg.use_retrieval:
            needed = np.concatenate([needed, mpc_idx[mpc_idx >= 0], nre_idx[nre_idx >= 0]])
        uniq, inverse = np.unique(needed, return_inverse=True)
        reps = self.encoder(bank.pack(uniq))
        lookup = dict(zip(uniq.tolist(), range(len(uniq))))
        g_t = reps[torch.from_numpy(inverse[: len(target_idx)])]

        def gather(idx):
            m = torch.from_numpy(idx >= 0)
            pos = torch.tensor([[lookup.get(int(i), 0) for i in row] for row in idx], dtype=torch.long)
            if pos.numel() == 0:
                pos = pos.reshape(len(idx), 0)
            return reps[pos], m

        G_m, m_m = gather(mpc_idx)
        G_n, m_n = gather(nre_idx)
        return self.logits_from_reps(g_t, G_m, m_m, G_n, m_n)


@dataclass
class PreparedSplit:
    """Bank positions of each recipe's target and of its references."""

    recipes: list[Recipe]
    target_idx: np.ndarray  # (n,)
    mpc_idx: np.ndarray  # (n, K) -1 padded
    nre_idx: np.ndarray  # (n, K)
    labels: torch.Tensor  # (n, l)


def _ref_rows(table: RetrievalTable, recipes: Sequence[Recipe], k: int) -> np.ndarray:
    missing = table.missing([r.id for r in recipes])
    if missing:
        head = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise KeyError(f"{table.retriever} retrieval table has no rows for {len(missing)} recipe(s): {head}")
    out = np.full((len(recipes), k), -1, dtype=np.int64)
    for r, rec in enumerate(recipes):
        row = table.row(rec.id).indices[:k]
        out[r, : len(row)] = row
    return out


class Workspace:
    """Graph bank over knowledge-base targets followed by any extra query targets."""

    def __init__(self, kb: KnowledgeBase, feats: ElementFeatureTable, extra: Sequence[Recipe] = ()):
        self.kb = kb
        kb_pos = {r.id: i for i, r in enumerate(kb.recipes)}
        comps = [r.target for r in kb.recipes]
        self.position: dict[str, int] = dict(kb_pos)
        for r in extra:
            if r.id not in self.position:
                self.position[r.id] = len(comps)
                comps.append(r.target)
        self.bank = GraphBank(comps, feats)

    def prepare(self, recipes: Sequence[Recipe], mpc: RetrievalTable, nre: RetrievalTable, k: int) -> PreparedSplit:
        recipes = list(recipes)
        return PreparedSplit(
            recipes,
            np.array([self.position[r.id] for r in recipes], dtype=np.int64),
            _ref_rows(mpc, recipes, k),
            _ref_rows(nre, recipes, k),
            torch.from_numpy(np.stack([r.label for r in recipes])) if recipes else torch.zeros(0, len(self.kb.vocab)),
        )


def predict_split(model: RetroModel, ws: Workspace, split: PreparedSplit, batch_size: int = 256) -> np.ndarray:
    model.eval()
    outs = []
    with torch.no_grad():
        for s in range(0, len(split.recipes), batch_size):
            sl = slice(s, s + batch_size)
            logits = model.forward_indices(ws.bank, split.target_idx[sl], split.mpc_idx[sl], split.nre_idx[sl])
            outs.append(torch.sigmoid(logits).numpy())
    return np.concatenate(outs) if outs else np.zeros((0, model.n_precursors))


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    valid_top5: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    updates: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _bce_mean(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # mean over precursors then over the batch
    return F.binary_cross_entropy_with_logits(logits, y)


def train_full(
    train: Sequence[Recipe],
    valid: Sequence[Recipe],
    kb: KnowledgeBase,
    mpc_table: RetrievalTable,
    nre_table: RetrievalTable,
    feats: ElementFeatureTable,
    config: FusionConfig | None = None,
) -> tuple[RetroModel, TrainReport, Workspace]:
    """AdamW on mean BCE, early-stopped on validation Top-5 exact match.

    An epoch counts as an improvement when validation Top-5 rises, or stays
    equal while validation BCE falls. Training stops once ``patience``
    epochs pass without improvement; the best epoch's parameters are
    returned.
    """
    cfg = config or FusionConfig()
    if not train:
        raise ValueError("training set is empty")
    ws = Workspace(kb, feats, extra=list(train) + list(valid))
    tr = ws.prepare(train, mpc_table, nre_table, cfg.k)
    va = ws.prepare(valid, mpc_table, nre_table, cfg.k) if valid else None
    model = RetroModel(feats.dim, len(kb.vocab), cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    best_key, best_state, since = (-math.inf, -math.inf), clone_state(model), 0
    n = len(tr.recipes)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            logits = model.forward_indices(ws.bank, tr.target_idx[idx], tr.mpc_idx[idx], tr.nre_idx[idx])
            loss = _bce_mean(logits, tr.labels[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"classifier loss became {float(loss)} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            report.updates += 1
            total += loss.item() * len(idx)
        report.train_loss.append(total / n)
        report.stopped_epoch = epoch

        monitor = va if va is not None else tr
        probs = predict_split(model, ws, monitor)
        top5 = top_k_exact(probs, monitor.recipes, 5, top_n=cfg.top_n, max_size=cfg.max_size)
        vloss = float(F.binary_cross_entropy(torch.from_numpy(probs).clamp(1e-12, 1 - 1e-12), monitor.labels))
        report.valid_top5.append(top5)
        report.valid_loss.append(vloss)
        key = (top5, -vloss)
        if key > best_key:
            best_key, best_state, since, report.best_epoch = key, clone_state(model), 0, epoch
        else:
            since += 1
            if cfg.patience is not None and since >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, report, ws


def save_model(model: RetroModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    torch.save(model.state_dict(), path)
    meta = {
        "config": asdict(model.cfg),
        "feature_dim": model.encoder.feature_dim,
        "l": model.n_precursors,
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_model(path: str | Path) -> tuple[RetroModel, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    model = RetroModel(meta["feature_dim"], meta["l"], FusionConfig(**meta["config"]))
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, meta


def predict_targets(
    model: RetroModel,
    targets: Sequence[Composition],
    mpc_refs: Sequence[Sequence[int]],
    nre_refs: Sequence[Sequence[int]],
    kb: KnowledgeBase,
    feats: ElementFeatureTable,
) -> np.ndarray:
    """Probabilities for arbitrary targets given their reference positions in ``kb``."""
    k = model.cfg.k
    comps = [r.target for r in kb.recipes] + list(targets)
    bank = GraphBank(comps, feats)
    t_idx = np.arange(len(kb), len(kb) + len(targets))

    def pad(rows):
        out = np.full((len(rows), k), -1, dtype=np.int64)
        for i, row in enumerate(rows):
            row = list(row)[:k]
            out[i, : len(row)] = row
        return out

    with torch.no_grad():
        logits = model.forward_indices(bank, t_idx, pad(mpc_refs), pad(nre_refs))
    return torch.sigmoid(logits).numpy()
