"""Command-line entry point: ``swarmrank {synth,train,rank,bench,check}``."""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalbench
from .baselines import PopularityRanker, RandomRanker, TfidfRanker, WeightedFeatureRanker
from .config import ConfigError, RunConfig, load_config
from .exceptions import ArtifactMismatchError, DataError, NumericalError
from .featurize import NodeFeaturizer
from .gnn import (
    CheckDims, NeighborTable, embed_rows, gradient_check, init_model, load_checkpoint, quantize,
    read_checkpoint_header, save_checkpoint,
)
from .ingest import Corpus, JoinReport, Manifest, load_corpus, load_manifest, split_by_time
from .kgraph import export_edges, parse_edge_types
from .rank import EngineerIndex, GnnRanker, Query, combine_with_swarm, rank_engineers
from .synthgen import OracleRanker, PlantedTruth, generate, write_corpus

logger = logging.getLogger("swarmrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


class ArtifactStore:
    """Output directory layout; every artifact is stamped with the hash that produced it."""

    CHECKPOINT = "model.ckpt"
    INDEX = "engineer_index.npz"
    VOCABULARY = "vocabulary.txt"
    EDGES = "graph_edges.tsv"
    HISTORY = "train_history.csv"
    CONFIG = "run_config.txt"
    STAMPS = "stamps.txt"

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def stamps(self) -> dict[str, str]:
        p = self.path(self.STAMPS)
        if not p.exists():
            return {}
        return dict(line.split(" = ", 1) for line in p.read_text(encoding="utf-8").splitlines() if " = " in line)

    def _write_stamps(self, stamps: dict[str, str]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path(self.STAMPS).write_text("".join(f"{k} = {v}\n" for k, v in sorted(stamps.items())), encoding="utf-8")

    def mark_stale(self, names: Sequence[str]) -> None:
        stamps = self.stamps()
        stamps.update({n: "stale" for n in names})
        self._write_stamps(stamps)

    def stamp(self, names: Sequence[str], value: str) -> None:
        stamps = self.stamps()
        stamps.update({n: value for n in names})
        self._write_stamps(stamps)

    def verify(self, name: str, expected: str) -> None:
        got = self.stamps().get(name)
        if got != expected:
            raise ArtifactMismatchError(
                f"{self.path(name)} is stamped {got!r} but the current config and corpus hash to {expected!r}; "
                "retrain or point to the matching output directory")


# --------------------------------------------------------------------------
# pipeline pieces shared by commands


def _load_splits(manifest_path: Path, cfg: RunConfig) -> tuple[RunConfig, Manifest, Corpus, Corpus, Corpus]:
    """Load and split the corpus; the returned config carries the manifest's top_m and cutoffs."""
    if not manifest_path.exists():
        raise DataError(f"manifest {manifest_path} does not exist; run 'swarmrank synth' or set data.manifest")
    manifest = load_manifest(manifest_path)
    effective = dataclasses.replace(
        cfg.data,
        top_m=manifest.top_m,
        train_cutoff=manifest.train_cutoff or cfg.data.train_cutoff,
        val_cutoff=manifest.val_cutoff or cfg.data.val_cutoff,
    )
    for name in ("top_m", "train_cutoff", "val_cutoff"):
        if getattr(effective, name) != getattr(cfg.data, name):
            logger.warning("manifest sets %s = %s; config value %s is ignored", name, getattr(effective, name),
                           getattr(cfg.data, name))
    cfg = dataclasses.replace(cfg, data=effective)
    report = JoinReport()
    corpus = load_corpus(manifest, report)
    for reason, n in sorted((r, n) for r, n in report.dropped.items() if n):
        logger.info("dropped %d records: %s", n, reason)
    train, val, test = split_by_time(corpus, effective.train_cutoff, effective.val_cutoff)
    logger.info("split: %d train, %d val, %d test incidents", len(train.incidents), len(val.incidents), len(test.incidents))
    return cfg, manifest, train, val, test


def _featurizer(cfg: RunConfig) -> NodeFeaturizer:
    f = cfg.featurize
    return NodeFeaturizer(text_dim=f.text_dim, min_df=f.min_df, max_df_ratio=f.max_df_ratio, seed=cfg.run.seed,
                          pretrained_path=f.pretrained_path or None)


def _gnn_params(cfg: RunConfig) -> dict:
    m = cfg.model
    f = cfg.featurize
    return dict(train_config=cfg.train_config, walk_config=cfg.walk, text_dim=f.text_dim, min_df=f.min_df,
                max_df_ratio=f.max_df_ratio, pretrained_path=f.pretrained_path or None,
                n_layers=m.n_layers, msg_dim=m.msg_dim, hidden_dim=m.hidden_dim, embed_dim=m.embed_dim,
                lam=cfg.rank.lam, seed=cfg.run.seed, edge_types=parse_edge_types(cfg.graph.edge_types))


def _checkpoint_header(cfg: RunConfig, manifest_path: Path, corpus_hash: str, vocab_hash: str) -> dict:
    w = cfg.walk
    return {
        "margin": cfg.train.margin,
        "seed": cfg.run.seed,
        "config_hash": cfg.training_hash(corpus_hash),
        "corpus_hash": corpus_hash,
        "vocab_hash": vocab_hash,
        "manifest": manifest_path.resolve(),
        "text_dim": cfg.featurize.text_dim,
        "min_df": cfg.featurize.min_df,
        "max_df_ratio": cfg.featurize.max_df_ratio,
        "pretrained_path": cfg.featurize.pretrained_path,
        "walk_count": w.walk_count,
        "walk_length": w.walk_length,
        "restart_prob": w.restart_prob,
        "neighborhood_size": w.neighborhood_size,
        "edge_types": cfg.graph.edge_types,
        "train_cutoff": cfg.data.train_cutoff,
        "val_cutoff": cfg.data.val_cutoff,
        "top_m": cfg.data.top_m,
    }


def _config_from_header(header: dict[str, str]) -> RunConfig:
    keys = {
        "featurize.text_dim": "text_dim", "featurize.min_df": "min_df", "featurize.max_df_ratio": "max_df_ratio",
        "featurize.pretrained_path": "pretrained_path", "walk.walk_count": "walk_count",
        "walk.walk_length": "walk_length", "walk.restart_prob": "restart_prob",
        "walk.neighborhood_size": "neighborhood_size", "run.seed": "seed", "data.manifest": "manifest",
        "data.train_cutoff": "train_cutoff", "data.val_cutoff": "val_cutoff", "data.top_m": "top_m",
        "graph.edge_types": "edge_types",
    }
    return load_config(overrides={k: header[v] for k, v in keys.items()}, environ={})


def _load_trained(cfg: RunConfig, ckpt_path: Path, train: Corpus, expect_hash: str | None) -> GnnRanker:
    """Rebuild the featurizer on the training split and wrap the stored model; all hashes are checked."""
    corpus_hash = train.content_hash()
    header = read_checkpoint_header(ckpt_path)
    if header.get("corpus_hash") != corpus_hash:
        raise ArtifactMismatchError(
            f"{ckpt_path} was trained on corpus {header.get('corpus_hash')!r} but the training split now hashes to "
            f"{corpus_hash!r}; the corpus changed since training")
    expect = {"corpus_hash": corpus_hash}
    if expect_hash is not None:
        expect["config_hash"] = expect_hash
    model, header = load_checkpoint(ckpt_path, expect)
    featurizer = _featurizer(cfg).fit(train)
    if featurizer.vocabulary_.content_hash() != header["vocab_hash"]:
        raise ArtifactMismatchError(f"{ckpt_path}: vocabulary rebuilt from the corpus does not match the checkpoint")
    return GnnRanker.from_parts(model, featurizer, train, **_gnn_params(cfg))


@contextlib.contextmanager
def _threads(cfg: RunConfig, threads: int | None, deterministic: bool):
    limit = 1 if deterministic else (threads or cfg.run.threads or None)
    if limit:
        with threadpool_limits(limits=limit):
            yield
    else:
        yield


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: str | None = None) -> Path:
    outdir = Path(out) if out else cfg.manifest_path.parent
    corpus, planted = generate(cfg.synth)
    path = write_corpus(corpus, planted, outdir, cfg.data.top_m, cfg.data.train_cutoff, cfg.data.val_cutoff)
    logger.info("wrote %d incidents, %d engineers to %s", len(corpus.incidents), len(corpus.engineers), outdir)
    return path


def cmd_train(cfg: RunConfig, force: bool = False) -> Path:
    store = ArtifactStore(cfg.outdir)
    manifest_path = cfg.manifest_path
    cfg, _, train, val, _ = _load_splits(manifest_path, cfg)
    if not train.incidents:
        raise DataError("training split is empty")
    corpus_hash = train.content_hash()
    config_hash = cfg.training_hash(corpus_hash)
    ckpt = store.path(store.CHECKPOINT)
    if ckpt.exists() and not force:
        old = read_checkpoint_header(ckpt).get("config_hash")
        if old != config_hash:
            raise ArtifactMismatchError(
                f"{ckpt} was produced by config {old!r}, not {config_hash!r}; pass --force to overwrite")
    produced = [store.CHECKPOINT, store.INDEX, store.VOCABULARY, store.EDGES, store.HISTORY, store.CONFIG]
    store.mark_stale(produced)

    fitted = GnnRanker(**_gnn_params(cfg)).fit(train, val)
    history = fitted.history_
    if cfg.run.deterministic:
        for rec in history.records:
            rec.seconds = 0.0
    # the index must come from the float32 weights the checkpoint stores
    model = quantize(fitted.model_)
    ranker = GnnRanker.from_parts(model, fitted.featurizer_, train, **_gnn_params(cfg))

    vocab = ranker.featurizer_.vocabulary_
    save_checkpoint(model, ckpt, _checkpoint_header(cfg, manifest_path, corpus_hash, vocab.content_hash()))
    ranker.index_.save(store.path(store.INDEX))
    store.path(store.VOCABULARY).write_text("\n".join(vocab.to_lines()) + "\n", encoding="utf-8")
    export_edges(ranker.graph_, store.path(store.EDGES))
    store.path(store.HISTORY).write_text(history.to_csv(), encoding="utf-8")
    store.path(store.CONFIG).write_text(cfg.to_text(), encoding="utf-8")
    store.stamp(produced, config_hash)
    return ckpt


def cmd_rank(checkpoint: Path, query_path: Path, swarm: Sequence[str] = (), k: int | None = None,
             lam: float | None = None, index_path: Path | None = None) -> str:
    header = read_checkpoint_header(checkpoint)
    cfg = _config_from_header(header)
    cfg, _, train, _, _ = _load_splits(Path(header["manifest"]), cfg)
    ranker = _load_trained(cfg, checkpoint, train, header["config_hash"])
    index = EngineerIndex.load(index_path or checkpoint.with_name(ArtifactStore.INDEX))
    if index.model_hash != ranker.model_.content_hash():
        raise ArtifactMismatchError(f"engineer index was built from model {index.model_hash!r}, "
                                    f"checkpoint holds {ranker.model_.content_hash()!r}")
    query = Query.read(query_path)
    members = tuple(dict.fromkeys(list(query.current_swarm) + list(swarm)))
    emb = ranker.embed_queries([query])[0]
    swarm_vecs = [index[e] for e in members if e in index.position]
    unknown = [e for e in members if e not in index.position]
    if unknown:
        logger.warning("swarm members not in the index: %s", ", ".join(unknown))
    fused = combine_with_swarm(emb, swarm_vecs, cfg.rank.lam if lam is None else lam)
    ranked = rank_engineers(fused, index, members)
    if logger.isEnabledFor(logging.DEBUG):
        for kid, score in ranker.kba_scores(query, top=10):
            logger.debug("similar KBA %s: %.4f", kid, score)
    return ranked.to_csv(k or None)


def cmd_bench(cfg: RunConfig) -> evalbench.ComparisonTable:
    store = ArtifactStore(cfg.outdir)
    cfg, manifest, train, val, test = _load_splits(cfg.manifest_path, cfg)
    if not test.incidents:
        raise DataError("test split is empty; nothing to benchmark")
    config_hash = cfg.training_hash(train.content_hash())
    store.verify(store.CHECKPOINT, config_hash)
    gnn = _load_trained(cfg, store.path(store.CHECKPOINT), train, config_hash)
    cases = evalbench.make_eval_cases(test, train.engineer_ids)
    if not cases:
        raise DataError("no test incident has a known resolver among the training engineers")
    f = cfg.featurize
    rankers = [gnn, TfidfRanker(f.min_df, f.max_df_ratio).fit(train),
               WeightedFeatureRanker(min_df=f.min_df, max_df_ratio=f.max_df_ratio).fit(train),
               PopularityRanker().fit(train), RandomRanker(cfg.run.seed).fit(train)]
    if manifest.truth is not None and manifest.truth.exists():
        rankers.append(OracleRanker(PlantedTruth.read(manifest.truth)).fit(train))
    sample = cfg.bench.sample_size or None
    reports = []
    for r in rankers:
        rep = evalbench.evaluate(r, cases, cfg.bench.ks, sample, cfg.run.seed)
        if cfg.run.deterministic:
            rep.seconds = 0.0
        logger.info("%s: %s", rep.ranker, {k: round(v, 4) for k, v in rep.ratios.items()})
        reports.append(rep)
    table = evalbench.compare(reports, evalbench.REFERENCE_ROWS if cfg.bench.references else None)
    store.root.mkdir(parents=True, exist_ok=True)
    table.write(store.root)
    store.stamp(["bench.csv", "bench.txt"], cfg.full_hash(train.content_hash()))
    return table


def cmd_check(seeds: int = 5, tolerance: float = 1e-4) -> list[float]:
    errors = [gradient_check(CheckDims(), seed=s) for s in range(seeds)]
    for s, e in enumerate(errors):
        print(f"gradient check seed {s}: max relative error {e:.3e} {'ok' if e < tolerance else 'FAIL'}")
    model = init_model(6, 2, 5, 4, 3, seed=0)
    x = np.random.default_rng(0).normal(size=(4, 6))
    norms = np.linalg.norm(embed_rows(model, x, NeighborTable.empty(4), np.arange(4)), axis=1)
    print(f"embedding norms: max deviation {np.max(np.abs(norms - 1)):.2e}")
    if max(errors) >= tolerance:
        raise NumericalError("gradient check failed")
    return errors


# --------------------------------------------------------------------------
# argument parsing


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config file (section.key = value lines)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. train.epochs=5 (repeatable)")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--deterministic", action="store_true", help="single-threaded math and no timing in reports")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="swarmrank", description="Rank support engineers for incidents with a knowledge-graph GNN.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted experts")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (default: directory of the configured manifest)")

    p = sub.add_parser("train", help="featurize, build the graph, train and index engineers")
    _add_config_args(p)
    _add_run_args(p)
    p.add_argument("--force", action="store_true", help="overwrite artifacts produced by a different config")

    p = sub.add_parser("rank", help="rank engineers for one incident")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("query", type=Path, help="JSON file with one incident record")
    p.add_argument("--swarm", default="", help="comma-separated engineers already on the incident")
    p.add_argument("--k", type=int, default=None, help="only output the top k rows")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="weight of the incident vector vs the swarm")
    p.add_argument("--index", type=Path, default=None, help="engineer index file (default: next to the checkpoint)")
    p.add_argument("--output", type=Path, default=None, help="write CSV here instead of standard output")

    p = sub.add_parser("bench", help="evaluate the trained ranker and baselines on the test split")
    _add_config_args(p)
    _add_run_args(p)

    p = sub.add_parser("check", help="run the gradient check and embedding-norm checks")
    p.add_argument("--seeds", type=int, default=5)
    return parser


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "deterministic", False):
        overrides["run.deterministic"] = "true"
    if args.config is not None and not args.config.exists():
        raise UsageError(f"config file {args.config} does not exist")
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            cmd_check(args.seeds)
            return EXIT_OK
        if args.command == "rank":
            if args.k is not None and args.k < 1:
                raise UsageError("--k must be >= 1")
            swarm = [s for s in args.swarm.split(",") if s]
            text = cmd_rank(args.checkpoint, args.query, swarm, args.k, args.lam, args.index)
            if args.output:
                args.output.write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = _config(args)
        if args.command == "synth":
            print(cmd_synth(cfg, args.out))
            return EXIT_OK
        with _threads(cfg, args.threads, cfg.run.deterministic):
            if args.command == "train":
                print(cmd_train(cfg, args.force))
            else:
                sys.stdout.write(cmd_bench(cfg).to_text())
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"swarmrank: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArtifactMismatchError, FileNotFoundError, KeyError) as exc:
        print(f"swarmrank: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"swarmrank: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
