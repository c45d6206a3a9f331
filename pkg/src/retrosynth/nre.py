"""Neural reaction energy retriever.

A graph-encoder regressor predicts formation energy (eV/atom). It is
pretrained on a large DFT table and fine-tuned on a small experimental one.
Knowledge-base recipes are then ranked for a target by the reaction enthalpy

    dH = H(target) - mean(H(p) for p in recipe precursors)

most negative first, among recipes whose precursor elements are all drawn
from the target's elements plus C, H, O and N.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .chemio import (
    ATOMIC_NUMBER,
    COMMON_ELEMENTS,
    N_ELEMENTS,
    Composition,
    ElementFeatureTable,
    KnowledgeBase,
    PrecursorVocabulary,
    Recipe,
    parse_formula,
)
from .encoder import GraphBank, GraphEncoder
from .nn import DTYPE, NonFiniteLoss, clone_state, seeded
from .retrieval import RetrievalSet, checksum, rank

log = logging.getLogger(__name__)

FILTER_MODES = ("subset", "coverage")


@dataclass
class EnergyTable:
    entries: list[tuple[Composition, float]]
    kind: str  # "dft" or "experimental"
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def compositions(self) -> list[Composition]:
        return [c for c, _ in self.entries]

    @property
    def energies(self) -> np.ndarray:
        return np.array([e for _, e in self.entries], dtype=np.float64)

    @classmethod
    def from_pairs(cls, pairs, kind: str) -> "EnergyTable":
        """Build from (composition or formula, energy); a repeated composition keeps its last value."""
        merged: dict[Composition, float] = {}
        dups = 0
        for comp, energy in pairs:
            if isinstance(comp, str):
                comp = parse_formula(comp)
            energy = float(energy)
            if not math.isfinite(energy):
                raise ValueError(f"non-finite energy for {comp.formula}")
            if comp in merged:
                dups += 1
                del merged[comp]
            merged[comp] = energy
        return cls(list(merged.items()), kind, dups)


def load_energy_csv(path: str | Path, kind: str) -> EnergyTable:
    """Read ``formula,energy_per_atom`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"formula", "energy_per_atom"}:
            raise ValueError(f"{path}: header must be 'formula,energy_per_atom', got {reader.fieldnames}")
        rows = [(row["formula"], row["energy_per_atom"]) for row in reader]
    table = EnergyTable.from_pairs(rows, kind)
    if table.duplicates:
        log.info("%s: %d duplicate compositions, last value kept", path, table.duplicates)
    return table


def write_energy_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["formula", "energy_per_atom"])
        for formula, energy in rows:
            w.writerow([formula, repr(float(energy))])


class NreModel(nn.Module):
    def __init__(self, feature_dim: int, hidden_dim: int = 256, n_layers: int = 3, seed: int = 0):
        super().__init__()
        self.encoder = GraphEncoder(feature_dim, hidden_dim, n_layers, seed=seed)
        with seeded(seed + 1):
            self.head = nn.Linear(hidden_dim, 1)
        self.head.to(DTYPE)

    def forward(self, batch) -> torch.Tensor:
        return self.head(self.encoder(batch)).squeeze(-1)

    def config(self) -> dict:
        return self.encoder.config()


def predict_energies(compositions: Sequence[Composition], model: NreModel, feats: ElementFeatureTable) -> np.ndarray:
    if not compositions:
        return np.zeros(0)
    bank = GraphBank(compositions, feats)
    with torch.no_grad():
        return model(bank.pack(range(len(bank)))).numpy().astype(np.float64)


def predict_energy(comp: Composition, model: NreModel, feats: ElementFeatureTable) -> float:
    return float(predict_energies([comp], model, feats)[0])


@dataclass
class NreConfig:
    hidden_dim: int = 256
    n_layers: int = 3
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 1000
    batch_size: int = 128
    patience: int | None = 50
    seed: int = 0


@dataclass
class FitResult:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    test_mae: float = math.nan


def split_811(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    a, b = int(0.8 * n), int(0.9 * n)
    return perm[:a], perm[a:b], perm[b:]


def fit_energy(
    model: NreModel,
    table: EnergyTable,
    feats: ElementFeatureTable,
    cfg: NreConfig,
    split_seed: int,
) -> FitResult:
    """Mean-squared-error regression with early stopping on the validation split.

    The best-validation parameters are loaded back into ``model`` before the
    held-out MAE is measured.
    """
    bank = GraphBank(table.compositions, feats)
    target = torch.from_numpy(table.energies)
    tr, va, te = split_811(len(table), split_seed)
    if len(va) == 0:
        va = tr
    rng = np.random.default_rng([cfg.seed, split_seed])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    va_batch = bank.pack(va)
    res = FitResult()
    best, best_state, since = math.inf, clone_state(model), 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = tr[rng.permutation(len(tr))]
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = torch.mean((model(bank.pack(idx)) - target[idx]) ** 2)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"energy loss became {float(loss)} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        res.train_loss.append(total / max(len(tr), 1))
        with torch.no_grad():
            vloss = float(torch.mean((model(va_batch) - target[va]) ** 2))
        res.valid_loss.append(vloss)
        if vloss < best:
            best, best_state, since, res.best_epoch = vloss, clone_state(model), 0, epoch
        else:
            since += 1
            if cfg.patience is not None and since >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    if len(te):
        with torch.no_grad():
            res.test_mae = float(torch.mean(torch.abs(model(bank.pack(te)) - target[te])))
    return res


@dataclass
class NreTraining:
    model: NreModel
    pretrained_state: dict | None
    pretrain: FitResult | None
    finetune: FitResult
    exp_only: FitResult | None

    @property
    def report(self) -> dict:
        out = {"finetuned_mae" if self.pretrain else "exp_only_mae": self.finetune.test_mae}
        if self.pretrain is not None:
            out["dft_test_mae"] = self.pretrain.test_mae
        if self.exp_only is not None:
            out["exp_only_mae"] = self.exp_only.test_mae
        return out


def pretrain_then_finetune(
    dft: EnergyTable | None,
    exp: EnergyTable,
    feats: ElementFeatureTable,
    config: NreConfig | None = None,
    pretrain: bool = True,
    compare: bool = True,
) -> NreTraining:
    """Pretrain on ``dft``, continue on ``exp`` from the best pretraining state.

    With ``compare`` an identically initialised model is also trained on
    ``exp`` alone, on the same split, so the two held-out MAEs can be
    compared. ``pretrain=False`` skips the DFT stage entirely.
    """
    cfg = config or NreConfig()
    if not exp:
        raise ValueError("experimental energy table is empty")
    if pretrain and not dft:
        raise ValueError("DFT energy table is empty")

    def fresh():
        return NreModel(feats.dim, cfg.hidden_dim, cfg.n_layers, seed=cfg.seed)

    model = fresh()
    pre, pre_state = None, None
    if pretrain:
        pre = fit_energy(model, dft, feats, cfg, split_seed=cfg.seed)
        pre_state = clone_state(model)
        log.info("nre pretrain: best epoch %d, held-out MAE %.4f", pre.best_epoch, pre.test_mae)
    fine = fit_energy(model, exp, feats, cfg, split_seed=cfg.seed + 1)
    exp_only = None
    if pretrain and compare:
        exp_only = fit_energy(fresh(), exp, feats, cfg, split_seed=cfg.seed + 1)
    return NreTraining(model, pre_state, pre, fine, exp_only)


def delta_h_from_energies(h_target: float, precursor_energies: Sequence[float]) -> float:
    """Target energy minus the plain mean of the precursor energies."""
    if len(precursor_energies) == 0:
        raise ValueError("precursor set is empty")
    return h_target - math.fsum(precursor_energies) / len(precursor_energies)


def delta_h(
    target: Composition,
    precursors: Sequence[Composition],
    model: NreModel,
    feats: ElementFeatureTable,
) -> float:
    if not precursors:
        raise ValueError("precursor set is empty")
    energies = predict_energies([target, *precursors], model, feats)
    return delta_h_from_energies(float(energies[0]), [float(e) for e in energies[1:]])


def _precursor_elements(recipe: Recipe, vocab: PrecursorVocabulary) -> set[str]:
    return {el for i in recipe.precursor_ids for el in parse_formula(vocab.precursors[i]).amounts}


def element_filter(target: Composition, kb_recipe: Recipe, vocab: PrecursorVocabulary, mode: str = "subset") -> bool:
    """Whether ``kb_recipe``'s precursors only use the target's elements plus C, H, O, N.

    ``mode="coverage"`` further requires the precursors to supply every
    non-CHON element of the target.
    """
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    prec = _precursor_elements(kb_recipe, vocab)
    allowed = set(target.amounts) | COMMON_ELEMENTS
    if not prec <= allowed:
        return False
    if mode == "coverage":
        return set(target.amounts) - COMMON_ELEMENTS <= prec
    return True


def _element_mask(symbols) -> np.ndarray:
    m = np.zeros(N_ELEMENTS, dtype=bool)
    m[[ATOMIC_NUMBER[s] - 1 for s in symbols]] = True
    return m


def eligibility_matrix(targets: Sequence[Composition], kb: KnowledgeBase, mode: str = "subset") -> np.ndarray:
    """Vectorised :func:`element_filter` over all (target, recipe) pairs."""
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    common = _element_mask(COMMON_ELEMENTS)
    t = np.stack([_element_mask(c.amounts) for c in targets]) if targets else np.zeros((0, N_ELEMENTS), bool)
    u = (
        np.stack([_element_mask(_precursor_elements(r, kb.vocab)) for r in kb.recipes])
        if len(kb)
        else np.zeros((0, N_ELEMENTS), bool)
    )
    forbidden = ~(t | common)  # (n_t, 118)
    ok = (u.astype(np.int64) @ forbidden.T.astype(np.int64)).T == 0
    if mode == "coverage":
        needed = t & ~common
        ok &= (needed.astype(np.int64) @ (~u).T.astype(np.int64)) == 0
    return ok


def precursor_set_energies(kb: KnowledgeBase, model: NreModel, feats: ElementFeatureTable) -> np.ndarray:
    """Mean predicted energy of each knowledge-base recipe's precursor set."""
    h_vocab = predict_energies(kb.vocab.compositions(), model, feats)
    return np.array(
        [math.fsum(float(h_vocab[i]) for i in r.precursor_ids) / len(r.precursor_ids) for r in kb.recipes],
        dtype=np.float64,
    )


@dataclass
class DeltaHTable:
    """Precomputed dH for every (target, knowledge-base recipe) pair."""

    target_ids: list[str | None]
    kb_ids: list[str]
    delta: np.ndarray  # (n_targets, n_kb)
    eligible: np.ndarray  # (n_targets, n_kb) bool

    def retrieve(self, row: int, k: int, exclude: str | None = None) -> RetrievalSet:
        ok = self.eligible[row].copy()
        if exclude is not None:
            ok &= np.array([kid != exclude for kid in self.kb_ids], dtype=bool)
        top = rank(self.delta[row], ok, k, descending=False)
        return RetrievalSet(tuple(top), tuple(float(self.delta[row, i]) for i in top), k, "nre")

    def retrieve_all(self, k: int, self_exclude: bool = True) -> list[RetrievalSet]:
        pos = {kid: i for i, kid in enumerate(self.kb_ids)}
        out = []
        for r, tid in enumerate(self.target_ids):
            ok = self.eligible[r].copy()
            if self_exclude and tid in pos:
                ok[pos[tid]] = False
            top = rank(self.delta[r], ok, k, descending=False)
            out.append(RetrievalSet(tuple(top), tuple(float(self.delta[r, i]) for i in top), k, "nre"))
        return out

    def save(self, path: str | Path) -> None:
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.delta)
        np.save(path.with_suffix(".eligible.npy"), self.eligible)
        side = {
            "n_targets": len(self.target_ids),
            "n_kb": len(self.kb_ids),
            "checksum": checksum(self.delta),
            "target_ids": self.target_ids,
            "kb_ids": self.kb_ids,
        }
        path.with_suffix(".json").write_text(json.dumps(side, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DeltaHTable":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        delta = np.load(path.with_suffix(".npy"))
        if checksum(delta) != side["checksum"] or delta.shape != (side["n_targets"], side["n_kb"]):
            raise ValueError(f"{path}: dH table does not match its sidecar")
        return cls(side["target_ids"], side["kb_ids"], delta, np.load(path.with_suffix(".eligible.npy")))


def precompute_delta_h(
    targets: Sequence[Composition],
    target_ids: Sequence[str | None],
    kb: KnowledgeBase,
    model: NreModel,
    feats: ElementFeatureTable,
    mode: str = "subset",
) -> DeltaHTable:
    h_t = predict_energies(list(targets), model, feats)
    h_sets = precursor_set_energies(kb, model, feats)
    delta = h_t[:, None] - h_sets[None, :]
    return DeltaHTable(list(target_ids), kb.ids, delta, eligibility_matrix(targets, kb, mode))


def retrieve_nre(
    target: Composition,
    kb: KnowledgeBase,
    model: NreModel,
    feats: ElementFeatureTable,
    k: int = 3,
    exclude: str | None = None,
    mode: str = "subset",
) -> RetrievalSet:
    """The ``k`` eligible recipes whose precursor sets give the most negative dH against ``target``."""
    table = precompute_delta_h([target], [exclude], kb, model, feats, mode)
    return table.retrieve(0, k, exclude=exclude)


def save_nre(model: NreModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps({**model.config(), **(extra or {})}, indent=2))


def load_nre(path: str | Path, feats: ElementFeatureTable | None = None) -> NreModel:
    path = Path(path)
    cfg = json.loads(path.with_suffix(".json").read_text())
    if feats is not None and feats.dim != cfg["feature_dim"]:
        raise ValueError(f"{path}: checkpoint expects feature_dim {cfg['feature_dim']}, got {feats.dim}")
    model = NreModel(cfg["feature_dim"], cfg["D"], cfg["L'"], cfg["seed"])
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model
