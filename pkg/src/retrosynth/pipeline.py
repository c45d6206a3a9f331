"""End-to-end pipeline stages shared by the command line and programmatic runs."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .chemio import (
    ElementFeatureTable,
    KnowledgeBase,
    PrecursorVocabulary,
    Recipe,
    RecipeRecord,
    build_vocab_and_kb,
    labelize,
    split_dataset,
)
from .evalkit import EvalReport, evaluate, top_k_exact
from .fusion import FusionConfig, RetroModel, TrainReport, Workspace, predict_split, train_full
from .mpc import MpcConfig, MpcModel, build_mpc_index, retrieve_mpc_many, train_mpc
from .nre import EnergyTable, NreConfig, NreModel, NreTraining, precompute_delta_h, pretrain_then_finetune
from .retrieval import RetrievalTable

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every setting a run depends on; stored next to each artifact."""

    split: str = "year"
    split_seed: int = 0
    k: int = 3
    filter_mode: str = "subset"
    mpc: MpcConfig = field(default_factory=MpcConfig)
    nre: NreConfig = field(default_factory=NreConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pretrain_nre: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        nested = {"mpc": MpcConfig, "nre": NreConfig, "fusion": FusionConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            kwargs[f.name] = nested[f.name](**d[f.name]) if f.name in nested else d[f.name]
        return cls(**kwargs)


@dataclass
class DataSplit:
    train: list[Recipe]
    valid: list[Recipe]
    test: list[Recipe]
    vocab: PrecursorVocabulary
    kb: KnowledgeBase

    @property
    def all(self) -> list[Recipe]:
        return self.train + self.valid + self.test


def prepare_data(records: Sequence[RecipeRecord], split: str, split_seed: int = 0) -> DataSplit:
    """Split records, build the vocabulary and knowledge base from the training part, label everything."""
    tr, va, te = split_dataset(records, split, split_seed)
    if not tr:
        raise ValueError(f"{split} split leaves the training set empty")
    vocab, kb = build_vocab_and_kb(tr)
    return DataSplit(list(kb.recipes), labelize(va, vocab), labelize(te, vocab), vocab, kb)


def mpc_table(model: MpcModel, kb: KnowledgeBase, queries: Sequence[Recipe], k: int, meta=None) -> RetrievalTable:
    index = build_mpc_index(model, list(kb.recipes))
    ids = [r.id for r in queries]
    sets = retrieve_mpc_many([r.target for r in queries], ids, index, model, k)
    return RetrievalTable.from_sets("mpc", k, ids, sets, meta)


def nre_table(
    model: NreModel,
    kb: KnowledgeBase,
    queries: Sequence[Recipe],
    feats: ElementFeatureTable,
    k: int,
    mode: str = "subset",
    meta=None,
) -> RetrievalTable:
    ids = [r.id for r in queries]
    table = precompute_delta_h([r.target for r in queries], ids, kb, model, feats, mode)
    return RetrievalTable.from_sets("nre", k, ids, table.retrieve_all(k), meta)


@dataclass
class PipelineResult:
    data: DataSplit
    mpc_model: MpcModel
    nre: NreTraining
    mpc_table: RetrievalTable
    nre_table: RetrievalTable
    model: RetroModel
    train_report: TrainReport
    workspace: Workspace
    test_report: EvalReport
    train_top1: float

    def metrics(self) -> dict:
        return {
            "train_top1": self.train_top1,
            "test": self.test_report.to_dict(),
            "nre": self.nre.report,
            "best_epoch": self.train_report.best_epoch,
            "stopped_epoch": self.train_report.stopped_epoch,
        }


def run_pipeline(
    records: Sequence[RecipeRecord],
    dft: EnergyTable,
    exp: EnergyTable,
    feats: ElementFeatureTable,
    cfg: PipelineConfig,
    monitor_valid: bool = True,
) -> PipelineResult:
    """Train both retrievers, precompute references, train and evaluate the classifier.

    With ``monitor_valid=False`` early stopping and checkpoint selection
    watch the training set instead of the validation set.
    """
    data = prepare_data(records, cfg.split, cfg.split_seed)
    mpc_model, _ = train_mpc(data.train, cfg.mpc, data.valid)
    nre = pretrain_then_finetune(dft, exp, feats, cfg.nre, pretrain=cfg.pretrain_nre, compare=False)
    queries = data.all
    mt = mpc_table(mpc_model, data.kb, queries, cfg.k)
    nt = nre_table(nre.model, data.kb, queries, feats, cfg.k, cfg.filter_mode)
    fusion_cfg = FusionConfig(**{**asdict(cfg.fusion), "k": cfg.k})
    valid = data.valid if monitor_valid else []
    model, report, ws = train_full(data.train, valid, data.kb, mt, nt, feats, fusion_cfg)
    test_report, train_top1 = score(model, data, mt, nt, feats, fusion_cfg)
    return PipelineResult(data, mpc_model, nre, mt, nt, model, report, ws, test_report, train_top1)


def score(
    model: RetroModel,
    data: DataSplit,
    mt: RetrievalTable,
    nt: RetrievalTable,
    feats: ElementFeatureTable,
    cfg: FusionConfig,
) -> tuple[EvalReport, float]:
    """Test-split report and training-set Top-1 exact match."""
    ws = Workspace(data.kb, feats, extra=data.test)
    tr = ws.prepare(data.train, mt, nt, cfg.k)
    train_top1 = top_k_exact(predict_split(model, ws, tr), data.train, 1, top_n=cfg.top_n, max_size=cfg.max_size)
    te = ws.prepare(data.test, mt, nt, cfg.k)
    probs = predict_split(model, ws, te) if data.test else np.zeros((0, len(data.vocab)))
    report = evaluate(
        probs, data.test, data.vocab, data.kb.precursor_set_registry(), top_n=cfg.top_n, max_size=cfg.max_size
    )
    return report, train_top1
