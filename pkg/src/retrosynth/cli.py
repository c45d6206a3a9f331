"""Command line entry point: ``retro <command>``.

Artifacts live under a workspace directory (``--workspace`` or
``RETRO_WORKSPACE``). Every stage writes a ``manifest.json`` holding its
config, input checksums and output checksums; a rerun whose manifest would be
identical is skipped unless ``--force`` is given.
"""
from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
from filelock import FileLock, Timeout

from . import __version__
from .chemio import (
    ElementFeatureTable,
    FormulaError,
    canonical_formula,
    fallback_element_features,
    load_element_features,
    load_recipes,
    parse_formula,
    write_recipes,
    write_rejects,
)
from .evalkit import enumerate_sets, evaluate
from .fusion import FusionConfig, Workspace, load_model, predict_split, predict_targets, save_model, train_full
from .mpc import MpcConfig, build_mpc_index, load_mpc, retrieve_mpc, save_mpc, train_mpc
from .nre import NreConfig, load_energy_csv, load_nre, pretrain_then_finetune, retrieve_nre, save_nre
from .pipeline import DataSplit, mpc_table, nre_table, prepare_data
from .retrieval import RetrievalTable
from .synthgen import SynthConfig, generate_corpus, write_corpus

log = logging.getLogger("retrosynth")

SPLITS = ("year", "random")


class StageError(click.ClickException):
    """User-facing failure; printed without a traceback."""


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "time": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def _setup_logging(ws: Path | None, verbose: bool) -> None:
    root = logging.getLogger("retrosynth")
    for h in list(root.handlers):
        h.close()
        root.removeHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(JsonLineFormatter())
    root.addHandler(err)
    if ws is not None:
        ws.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(ws / "log.jsonl", encoding="utf-8")
        fh.setFormatter(JsonLineFormatter())
        root.addHandler(fh)


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def file_checksum(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """One artifact directory with its manifest."""

    def __init__(self, directory: Path, command: str, config: dict, inputs: dict[str, str]):
        self.dir = directory
        self.command = command
        self.config = config
        self.inputs = inputs

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def up_to_date(self) -> bool:
        if not self.manifest_path.exists():
            return False
        old = json.loads(self.manifest_path.read_text())
        if old.get("config") != self.config or old.get("inputs") != self.inputs:
            return False
        for name, digest in old.get("outputs", {}).items():
            p = self.dir / name
            if not p.exists() or file_checksum(p) != digest:
                return False
        return True

    def commit(self, extra: dict | None = None) -> dict:
        outputs = {
            p.name: file_checksum(p)
            for p in sorted(self.dir.iterdir())
            if p.is_file() and p.name != "manifest.json"
        }
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            **(extra or {}),
        }
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest


def _read_manifest(directory: Path, producer: str) -> dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise StageError(f"missing {directory}; run `retro {producer}` first")
    return json.loads(path.read_text())


class Context:
    def __init__(self, workspace: Path, features: str | None, force: bool):
        self.ws = workspace
        self.features_path = features
        self.force = force
        self._feats: ElementFeatureTable | None = None

    @property
    def feats(self) -> ElementFeatureTable:
        if self._feats is None:
            self._feats = load_element_features(self.features_path) if self.features_path else fallback_element_features()
        return self._feats

    def split_dir(self, split: str, split_seed: int) -> Path:
        return self.ws / (split if split == "year" else f"random-{split_seed}")

    def skip(self, stage: Stage) -> bool:
        if not self.force and stage.up_to_date():
            _event("up to date, skipping", command=stage.command, dir=str(stage.dir))
            click.echo(f"{stage.command}: up to date ({stage.dir})")
            return True
        stage.dir.mkdir(parents=True, exist_ok=True)
        return False

    def data(self, split: str, split_seed: int) -> tuple[DataSplit, str]:
        manifest = _read_manifest(self.ws / "ingest", "ingest --recipes FILE")
        records_path = self.ws / "ingest" / "records.jsonl"
        digest = manifest["outputs"]["records.jsonl"]
        if file_checksum(records_path) != digest:
            raise StageError(f"{records_path} changed since ingest; run `retro ingest --force`")
        try:
            data = prepare_data(load_recipes(records_path).records, split, split_seed)
        except ValueError as exc:
            raise StageError(str(exc)) from exc
        return data, digest


def _common_split_options(f):
    f = click.option("--split", type=click.Choice(SPLITS), default="year", show_default=True)(f)
    f = click.option("--split-seed", type=int, default=0, show_default=True, help="Seed of the random split.")(f)
    return f


@click.group()
@click.version_option(__version__, prog_name="retro")
@click.option("--workspace", type=click.Path(file_okay=False, path_type=Path), envvar="RETRO_WORKSPACE",
              default="retro-workspace", show_default=True, help="Artifact root (env RETRO_WORKSPACE).")
@click.option("--features", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Element feature JSON; a seeded fallback table is used when absent.")
@click.option("--force", is_flag=True, help="Recompute even when artifacts are up to date.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, workspace: Path, features, force, verbose):
    """Retrieval-augmented inorganic precursor prediction."""
    if ctx.invoked_subcommand == "synth":
        _setup_logging(None, verbose)
        ctx.obj = Context(workspace, features, force)
        return
    _setup_logging(workspace, verbose)
    lock = FileLock(str(workspace / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise StageError(f"workspace {workspace} is in use by another retro command") from None
    ctx.call_on_close(lock.release)
    ctx.obj = Context(workspace, features, force)


@main.command()
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--recipes", "n_recipes", type=int, default=500, show_default=True)
@click.option("--elements", "n_elements", type=int, default=12, show_default=True)
@click.option("--vocab", "vocab_size", type=int, default=24, show_default=True)
@click.option("--seed", "rule_seed", type=int, default=7, show_default=True)
@click.option("--noise", "noise_rate", type=float, default=0.0, show_default=True)
@click.option("--dft", "n_dft", type=int, default=2000, show_default=True)
@click.option("--exp", "n_exp", type=int, default=100, show_default=True)
def synth(out, **kw):
    """Write a synthetic corpus: recipes.jsonl, dft.csv, exp.csv."""
    try:
        cfg = SynthConfig(**kw)
    except ValueError as exc:
        raise StageError(str(exc)) from exc
    paths = write_corpus(generate_corpus(cfg), out, cfg)
    _event("synthetic corpus written", out=str(out), recipes=cfg.n_recipes)
    for p in paths.values():
        click.echo(str(p))


@main.command()
@click.option("--recipes", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.pass_obj
def ingest(obj: Context, recipes: Path):
    """Validate a recipe file; rejected lines go to rejects.jsonl."""
    _ingest(obj, recipes)


def _ingest(obj: Context, recipes: Path) -> None:
    stage = Stage(obj.ws / "ingest", "ingest", {}, {"recipes": file_checksum(recipes)})
    if obj.skip(stage):
        return
    try:
        result = load_recipes(recipes)
    except OSError as exc:
        raise StageError(f"cannot read {recipes}: {exc}") from exc
    write_recipes((r.to_dict() for r in result.records), stage.dir / "records.jsonl")
    write_rejects(result.rejects, stage.dir / "rejects.jsonl")
    stage.commit({"stats": result.stats, "source": str(recipes)})
    _event("ingested", **result.stats)
    click.echo(json.dumps(result.stats))


@main.command("train-mpc")
@click.option("--recipes", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Ingest this file first.")
@_common_split_options
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--p-mask", type=float, default=0.5, show_default=True)
@click.option("--hidden-dim", type=int, default=256, show_default=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.pass_obj
def train_mpc_cmd(obj: Context, recipes, split, split_seed, seed, p_mask, hidden_dim, epochs, lr):
    """Train the masked precursor completion retriever."""
    if recipes is not None:
        _ingest(obj, recipes)
    data, records_digest = obj.data(split, split_seed)
    cfg = MpcConfig(hidden_dim=hidden_dim, p_mask=p_mask, lr=lr, epochs=epochs, seed=seed)
    stage = Stage(obj.split_dir(split, split_seed) / "mpc", "train-mpc",
                  {"mpc": asdict(cfg), "split": split, "split_seed": split_seed}, {"records": records_digest})
    if obj.skip(stage):
        return
    model, hist = train_mpc(data.train, cfg, data.valid)
    save_mpc(model, stage.dir / "model.pt", {"vocab_digest": data.vocab.digest()})
    build_mpc_index(model, data.train).save(stage.dir / "index")
    stage.commit({"best_epoch": hist.best_epoch, "stopped_epoch": hist.stopped_epoch})
    _event("mpc trained", best_epoch=hist.best_epoch, stopped_epoch=hist.stopped_epoch)


@main.command("train-nre")
@click.option("--dft", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--exp", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--no-pretrain", is_flag=True, help="Train on experimental data only.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--hidden-dim", type=int, default=256, show_default=True)
@click.option("--layers", type=int, default=3, show_default=True)
@click.option("--epochs", type=int, default=1000, show_default=True)
@click.option("--patience", type=int, default=50, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.pass_obj
def train_nre_cmd(obj: Context, dft, exp, no_pretrain, seed, hidden_dim, layers, epochs, patience, lr):
    """Pretrain the energy model on DFT data, then fine-tune on experimental data."""
    if dft is None and not no_pretrain:
        raise StageError("--dft is required unless --no-pretrain is given")
    cfg = NreConfig(hidden_dim=hidden_dim, n_layers=layers, lr=lr, epochs=epochs, patience=patience, seed=seed)
    inputs = {"exp": file_checksum(exp), "features": obj.feats.fingerprint()}
    if not no_pretrain:
        inputs["dft"] = file_checksum(dft)
    stage = Stage(obj.ws / "nre", "train-nre", {"nre": asdict(cfg), "pretrain": not no_pretrain}, inputs)
    if obj.skip(stage):
        return
    try:
        dft_table = None if no_pretrain else load_energy_csv(dft, "dft")
        exp_table = load_energy_csv(exp, "experimental")
        training = pretrain_then_finetune(dft_table, exp_table, obj.feats, cfg, pretrain=not no_pretrain)
    except (ValueError, FormulaError) as exc:
        raise StageError(str(exc)) from exc
    save_nre(training.model, stage.dir / "model.pt", {"features": obj.feats.fingerprint()})
    stage.commit({"report": training.report})
    _event("nre trained", **training.report)
    click.echo(json.dumps(training.report))


def _checkpoint_digest(directory: Path, producer: str) -> str:
    manifest = _read_manifest(directory, producer)
    return manifest["outputs"]["model.pt"]


@main.command("precompute-refs")
@_common_split_options
@click.option("--retriever", type=click.Choice(["mpc", "nre", "both"]), default="both", show_default=True)
@click.option("--k", type=int, default=3, show_default=True)
@click.option("--filter", "filter_mode", type=click.Choice(["subset", "coverage"]), default="subset", show_default=True)
@click.pass_obj
def precompute_refs(obj: Context, split, split_seed, retriever, k, filter_mode):
    """Materialise the reference tables for every recipe before training."""
    if k < 1:
        raise StageError("--k must be >= 1")
    data, records_digest = obj.data(split, split_seed)
    base = obj.split_dir(split, split_seed)
    kinds = ["mpc", "nre"] if retriever == "both" else [retriever]
    for kind in kinds:
        if kind == "mpc":
            ckpt = _checkpoint_digest(base / "mpc", f"train-mpc --split {split}")
            config = {"k": k}
        else:
            ckpt = _checkpoint_digest(obj.ws / "nre", "train-nre")
            config = {"k": k, "filter": filter_mode}
        key = {"records": records_digest, "checkpoint": ckpt}
        stage = Stage(base / f"refs-{kind}", "precompute-refs", config, key)
        if obj.skip(stage):
            continue
        if kind == "mpc":
            model = load_mpc(base / "mpc" / "model.pt")
            table = mpc_table(model, data.kb, data.all, k, meta=key)
        else:
            model = load_nre(obj.ws / "nre" / "model.pt", obj.feats)
            table = nre_table(model, data.kb, data.all, obj.feats, k, filter_mode, meta=key)
        table.save(stage.dir / "table")
        n_short = int(sum(len(table.row(q)) < k for q in table.query_ids))
        stage.commit({"short_rows": n_short})
        _event("references computed", retriever=kind, rows=len(table.query_ids), short=n_short)


def _load_tables(obj: Context, base: Path, records_digest: str, k: int) -> tuple[RetrievalTable, RetrievalTable]:
    tables = []
    for kind, producer in (("mpc", "train-mpc"), ("nre", "train-nre")):
        ref_dir = base / f"refs-{kind}"
        manifest = _read_manifest(ref_dir, f"precompute-refs --retriever {kind}")
        ckpt_dir = base / "mpc" if kind == "mpc" else obj.ws / "nre"
        current = {"records": records_digest, "checkpoint": _checkpoint_digest(ckpt_dir, producer)}
        if manifest["inputs"] != current:
            raise StageError(f"{kind} references are stale; run `retro precompute-refs --retriever {kind}`")
        if manifest["config"]["k"] < k:
            raise StageError(f"{kind} references hold K={manifest['config']['k']} < {k}; "
                             f"run `retro precompute-refs --k {k}`")
        tables.append(RetrievalTable.load(ref_dir / "table"))
    return tables[0], tables[1]


@main.command()
@_common_split_options
@click.option("--k", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--hidden-dim", type=int, default=256, show_default=True)
@click.option("--epochs", type=int, default=500, show_default=True)
@click.option("--patience", type=int, default=30, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--batch-size", type=int, default=None, help="Defaults to 128 for year, 32 for random.")
@click.option("--no-retrieval", is_flag=True, help="Zero both reference vectors (ablation).")
@click.pass_obj
def train(obj: Context, split, split_seed, k, seed, hidden_dim, epochs, patience, lr, batch_size, no_retrieval):
    """Train the classifier on precomputed references."""
    data, records_digest = obj.data(split, split_seed)
    base = obj.split_dir(split, split_seed)
    mt, nt = _load_tables(obj, base, records_digest, k)
    cfg = FusionConfig(
        hidden_dim=hidden_dim, k=k, lr=lr, epochs=epochs, patience=patience, seed=seed,
        batch_size=batch_size or (128 if split == "year" else 32), use_retrieval=not no_retrieval,
    )
    inputs = {
        "records": records_digest,
        "refs_mpc": _read_manifest(base / "refs-mpc", "precompute-refs")["outputs"]["table.npy"],
        "refs_nre": _read_manifest(base / "refs-nre", "precompute-refs")["outputs"]["table.npy"],
        "features": obj.feats.fingerprint(),
    }
    stage = Stage(_model_dir(base, seed, no_retrieval), "train", {"fusion": asdict(cfg)}, inputs)
    if obj.skip(stage):
        return
    model, report, _ = train_full(data.train, data.valid, data.kb, mt, nt, obj.feats, cfg)
    save_model(model, stage.dir / "model.pt", {"vocab": list(data.vocab.precursors), "split": split,
                                                "split_seed": split_seed})
    (stage.dir / "train_report.json").write_text(json.dumps(report.to_dict(), indent=1))
    stage.commit({"best_epoch": report.best_epoch, "stopped_epoch": report.stopped_epoch})
    _event("classifier trained", best_epoch=report.best_epoch, stopped_epoch=report.stopped_epoch)


def _model_dir(base: Path, seed: int, no_retrieval: bool = False) -> Path:
    return base / ("model-noretr" if no_retrieval else "model") / f"seed{seed}"


@main.command(name="evaluate")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Defaults to the seed-0 model of the split.")
@_common_split_options
@click.option("--report", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--case-mode", type=click.Choice(["exact", "subset-relation"]), default="exact", show_default=True)
@click.pass_obj
def evaluate_cmd(obj: Context, checkpoint, split, split_seed, report, case_mode):
    """Top-K exact match, recalls and the subset/new breakdown on the test split."""
    data, records_digest = obj.data(split, split_seed)
    base = obj.split_dir(split, split_seed)
    ckpt = checkpoint or _model_dir(base, 0) / "model.pt"
    if not ckpt.exists():
        raise StageError(f"no checkpoint at {ckpt}; run `retro train --split {split}`")
    model, meta = load_model(ckpt)
    if meta.get("vocab") != list(data.vocab.precursors):
        raise StageError(f"{ckpt} was trained on a different precursor vocabulary")
    mt, nt = _load_tables(obj, base, records_digest, model.cfg.k)
    ws = Workspace(data.kb, obj.feats, extra=data.test)
    probs = predict_split(model, ws, ws.prepare(data.test, mt, nt, model.cfg.k))
    result = evaluate(probs, data.test, data.vocab, data.kb.precursor_set_registry(), case_mode=case_mode,
                      top_n=model.cfg.top_n, max_size=model.cfg.max_size)
    out = report or ckpt.parent / "eval_report.json"
    out.write_text(result.to_json())
    click.echo(result.to_table())
    _event("evaluated", report=str(out), **{f"top{k}": v for k, v in result.top_k_acc.items()})


@main.command()
@click.option("--target", required=True, help="Target formula, e.g. BaTiO3.")
@click.option("--topk", type=int, default=10, show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@_common_split_options
@click.option("--filter", "filter_mode", type=click.Choice(["subset", "coverage"]), default="subset", show_default=True)
@click.pass_obj
def predict(obj: Context, target, topk, checkpoint, split, split_seed, filter_mode):
    """Rank candidate precursor sets for a new target."""
    try:
        comp = parse_formula(target)
    except FormulaError as exc:
        raise StageError(str(exc)) from exc
    data, _ = obj.data(split, split_seed)
    base = obj.split_dir(split, split_seed)
    ckpt = checkpoint or _model_dir(base, 0) / "model.pt"
    if not ckpt.exists():
        raise StageError(f"no checkpoint at {ckpt}; run `retro train --split {split}`")
    model, meta = load_model(ckpt)
    if not (base / "mpc" / "model.pt").exists():
        raise StageError(f"no MPC retriever; run `retro train-mpc --split {split}`")
    if not (obj.ws / "nre" / "model.pt").exists():
        raise StageError("no NRE retriever; run `retro train-nre`")
    mpc = load_mpc(base / "mpc" / "model.pt")
    nre = load_nre(obj.ws / "nre" / "model.pt", obj.feats)
    k = model.cfg.k
    m_refs = retrieve_mpc(comp, build_mpc_index(mpc, data.train), mpc, k)
    n_refs = retrieve_nre(comp, data.kb, nre, obj.feats, k, mode=filter_mode)
    probs = predict_targets(model, [comp], [m_refs.indices], [n_refs.indices], data.kb, obj.feats)[0]
    sets = enumerate_sets(probs, top_n=model.cfg.top_n, max_size=model.cfg.max_size, beam=topk)
    vocab = data.vocab.precursors
    rows = [
        {"rank": i + 1, "precursors": [vocab[j] for j in s], "score": sc}
        for i, (s, sc) in enumerate(zip(sets.sets, sets.scores))
    ]
    click.echo(json.dumps({
        "target": canonical_formula(comp, reduce=False),
        "references": {
            "mpc": [data.kb.recipes[i].id for i in m_refs.indices],
            "nre": [data.kb.recipes[i].id for i in n_refs.indices],
        },
        "predictions": rows,
    }, indent=2))


if __name__ == "__main__":  # pragma: no cover
    main()
