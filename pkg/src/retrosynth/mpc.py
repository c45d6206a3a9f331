"""Masked precursor completion retriever.

A composition MLP ``M`` and a learnable precursor embedding matrix ``P`` are
trained to reconstruct a recipe's full precursor vector after some of its
positives have been hidden. Retrieval then ranks knowledge-base materials by
cosine similarity of ``M(x)``.
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .chemio import N_ELEMENTS, Composition, Recipe, canonical_formula
from .nn import DTYPE, NonFiniteLoss, clone_state, mlp, seeded
from .retrieval import RetrievalSet, checksum, rank

log = logging.getLogger(__name__)


def perturb_labels(y: np.ndarray, p_mask: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each positive entry of ``y`` independently with probability ``p_mask``."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask must be in [0, 1], got {p_mask}")
    keep = rng.random(np.shape(y)) >= p_mask
    return np.where(keep, y, 0.0)


class MpcModel(nn.Module):
    def __init__(self, n_precursors: int, hidden_dim: int = 256, n_elements: int = N_ELEMENTS, seed: int = 0):
        super().__init__()
        self.n_precursors = n_precursors
        self.hidden_dim = hidden_dim
        self.n_elements = n_elements
        self.seed = seed
        with seeded(seed):
            self.M = mlp(n_elements, hidden_dim, hidden_dim)
            self.P = nn.Parameter(torch.randn(n_precursors, hidden_dim) / math.sqrt(hidden_dim))
            self.query = nn.Linear(hidden_dim, hidden_dim)
            self.key = nn.Linear(hidden_dim, hidden_dim)
            self.value = nn.Linear(hidden_dim, hidden_dim)
        self.to(DTYPE)

    def represent(self, x: torch.Tensor) -> torch.Tensor:
        return self.M(x)

    def attend(self, m: torch.Tensor, y_tilde: torch.Tensor) -> torch.Tensor:
        """Cross-attention of ``m`` over the unmasked rows of ``P``.

        Masked rows are dropped from the softmax. A row with nothing unmasked
        gets a zero attention output.
        """
        q = self.query(m)
        k = self.key(self.P)
        v = self.value(self.P)
        scores = q @ k.T / math.sqrt(self.hidden_dim)
        visible = y_tilde > 0
        scores = scores.masked_fill(~visible, float("-inf"))
        any_visible = visible.any(dim=1, keepdim=True)
        scores = torch.where(any_visible, scores, torch.zeros_like(scores))
        weights = torch.softmax(scores, dim=1) * any_visible
        return weights @ v

    def forward(self, x: torch.Tensor, y_tilde: torch.Tensor) -> torch.Tensor:
        """Per-precursor logits."""
        m = self.represent(x)
        s = m + self.attend(m, y_tilde)
        return s @ self.P.T

    def config(self) -> dict:
        return {
            "n_precursors": self.n_precursors,
            "hidden_dim": self.hidden_dim,
            "n_elements": self.n_elements,
            "seed": self.seed,
        }


def mpc_forward(x: np.ndarray, y_tilde: np.ndarray, model: MpcModel) -> np.ndarray:
    """Probabilities ``sigmoid(s . p_i)`` for one composition vector or a batch."""
    x = np.atleast_2d(x)
    y_tilde = np.atleast_2d(y_tilde)
    with torch.no_grad():
        logits = model(torch.tensor(x, dtype=DTYPE), torch.tensor(y_tilde, dtype=DTYPE))
    out = torch.sigmoid(logits).numpy()
    return out[0] if out.shape[0] == 1 else out


@dataclass
class MpcConfig:
    hidden_dim: int = 256
    p_mask: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 200
    batch_size: int = 128
    patience: int | None = 30
    seed: int = 0


@dataclass
class MpcHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def _stack(recipes: Sequence[Recipe]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([r.target.vector for r in recipes])
    y = np.stack([r.label for r in recipes])
    return x, y


def _bce(model, x, y, y_tilde) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(model(x, y_tilde), y)


def train_mpc(
    train: Sequence[Recipe],
    config: MpcConfig | None = None,
    valid: Sequence[Recipe] = (),
) -> tuple[MpcModel, MpcHistory]:
    """Fit ``M`` and ``P`` by masked reconstruction with BCE.

    ``history.train_loss[0]`` is the full-data loss before any update. Early
    stopping watches the validation loss (training loss when ``valid`` is
    empty) under a fixed validation mask; the best-scoring parameters are
    restored before returning.
    """
    cfg = config or MpcConfig()
    if not train:
        raise ValueError("training set is empty")
    l = train[0].n_precursors
    model = MpcModel(l, cfg.hidden_dim, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    x_np, y_np = _stack(train)
    x, y = torch.from_numpy(x_np), torch.from_numpy(y_np)
    monitor = _stack(valid) if valid else (x_np, y_np)
    mon_x, mon_y = torch.from_numpy(monitor[0]), torch.from_numpy(monitor[1])
    mon_tilde = torch.from_numpy(perturb_labels(monitor[1], cfg.p_mask, np.random.default_rng([cfg.seed, 1])))

    def full_train_loss():
        yt = torch.from_numpy(perturb_labels(y_np, cfg.p_mask, np.random.default_rng([cfg.seed, 2])))
        with torch.no_grad():
            return float(_bce(model, x, y, yt))

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = MpcHistory()
    hist.train_loss.append(full_train_loss())
    best, best_state, since_best = math.inf, clone_state(model), 0
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = rng.permutation(n)
        y_tilde_all = perturb_labels(y_np, cfg.p_mask, rng)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(perm[start : start + cfg.batch_size])
            loss = _bce(model, x[idx], y[idx], torch.from_numpy(y_tilde_all)[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"MPC loss became {float(loss)} at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        hist.train_loss.append(total / n)
        with torch.no_grad():
            score = float(_bce(model, mon_x, mon_y, mon_tilde))
        hist.valid_loss.append(score)
        hist.stopped_epoch = epoch
        if score < best:
            best, best_state, since_best, hist.best_epoch = score, clone_state(model), 0, epoch
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                log.info("mpc early stop at epoch %d (best %d)", epoch, hist.best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, hist


@dataclass
class MpcIndex:
    """Unit-normalised ``M(x)`` for every knowledge-base recipe."""

    reps: np.ndarray  # (n, d')
    ids: list[str]
    formula_keys: list[str]  # reduced canonical formula; equal keys <=> equal composition vectors

    def __post_init__(self):
        if len(self.ids) != len(self.reps) or len(self.formula_keys) != len(self.reps):
            raise ValueError("MpcIndex arrays are not aligned")
        self._by_id = {rid: i for i, rid in enumerate(self.ids)}
        self._by_key = defaultdict(list)
        for i, key in enumerate(self.formula_keys):
            self._by_key[key].append(i)

    def __len__(self) -> int:
        return len(self.ids)

    def query(
        self,
        rep: np.ndarray,
        k: int,
        exclude: str | None = None,
        target_key: str | None = None,
    ) -> RetrievalSet:
        q = _unit(np.asarray(rep, dtype=np.float64)[None, :])[0]
        sims = self.reps @ q
        eligible = np.ones(len(self), dtype=bool)
        if exclude in self._by_id:
            eligible[self._by_id[exclude]] = False
        if target_key is not None:
            eligible[self._by_key.get(target_key, [])] = False
        top = rank(sims, eligible, k, descending=True)
        return RetrievalSet(tuple(top), tuple(float(sims[i]) for i in top), k, "mpc")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.reps)
        sidecar = {
            "d'": int(self.reps.shape[1]),
            "count": len(self),
            "checksum": checksum(self.reps),
            "ids": self.ids,
            "formula_keys": self.formula_keys,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "MpcIndex":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        reps = np.load(path.with_suffix(".npy"))
        if checksum(reps) != side["checksum"] or reps.shape != (side["count"], side["d'"]):
            raise ValueError(f"{path}: MPC index does not match its sidecar")
        return cls(reps, side["ids"], side["formula_keys"])


def _unit(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms == 0, 1.0, norms)


def represent(model: MpcModel, compositions: Sequence[Composition]) -> np.ndarray:
    x = np.stack([c.vector for c in compositions])
    with torch.no_grad():
        return model.represent(torch.from_numpy(x)).numpy()


def build_mpc_index(model: MpcModel, kb_recipes: Sequence[Recipe]) -> MpcIndex:
    reps = represent(model, [r.target for r in kb_recipes]) if kb_recipes else np.zeros((0, model.hidden_dim))
    return MpcIndex(
        _unit(reps),
        [r.id for r in kb_recipes],
        [canonical_formula(r.target) for r in kb_recipes],
    )


def retrieve_mpc(
    target: Composition,
    index: MpcIndex,
    model: MpcModel,
    k: int = 3,
    exclude: str | None = None,
    skip_identical: bool = False,
) -> RetrievalSet:
    """Top-``k`` knowledge-base positions by cosine similarity of ``M(x)``.

    ``exclude`` drops the recipe with that id (a training target's own
    recipe). With ``skip_identical`` any recipe whose composition equals the
    target's is dropped too.
    """
    if len(index) == 0:
        raise ValueError("MPC index is empty")
    rep = represent(model, [target])[0]
    key = canonical_formula(target) if skip_identical else None
    return index.query(rep, k, exclude=exclude, target_key=key)


def retrieve_mpc_many(
    targets: Sequence[Composition],
    query_ids: Sequence[str | None],
    index: MpcIndex,
    model: MpcModel,
    k: int = 3,
    skip_identical: bool = False,
) -> list[RetrievalSet]:
    if not targets:
        return []
    reps = represent(model, targets)
    return [
        index.query(rep, k, exclude=qid, target_key=canonical_formula(t) if skip_identical else None)
        for rep, t, qid in zip(reps, targets, query_ids)
    ]


def save_mpc(model: MpcModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps({**model.config(), **(extra or {})}, indent=2))


def load_mpc(path: str | Path) -> MpcModel:
    path = Path(path)
    cfg = json.loads(path.with_suffix(".json").read_text())
    model = MpcModel(cfg["n_precursors"], cfg["hidden_dim"], cfg["n_elements"], cfg["seed"])
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model

