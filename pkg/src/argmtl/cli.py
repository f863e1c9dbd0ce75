"""Command-line front end: prepare | train | search | report | gen-synth.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import data as D
from .model import ModelConfig
from .optim import SearchSpace
from .report import append_results, read_results, record_row, write_report
from .synth import generate
from .trainer import ConfigurationError, RunRecord, Split, TrainPlan, load_records, \
    run_search, save_records, train

log = logging.getLogger("argmtl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


class DataError(Exception):
    pass


@dataclass
class ExperimentConfig:
    datasets: dict[str, Path]
    output_dir: Path
    embeddings: dict[str, Path] = field(default_factory=dict)
    embedding_dim: int = 32
    scenario_seed: int = 1
    search: SearchSpace = field(default_factory=SearchSpace)
    train: dict = field(default_factory=dict)
    aux: dict[str, list[str]] = field(default_factory=dict)
    scenario_sizes: dict[str, int] = field(default_factory=lambda: dict(D.SCENARIO_SIZES))
    dev_tokens: int = D.DEV_TOKENS
    test_tokens: int = D.TEST_TOKENS

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        base = path.parent

        def resolve(p):
            return Path(os.path.normpath(base / p))

        datasets = {}
        for entry in raw.get("datasets", []):
            ds_id, ds_path = entry["id"], resolve(entry["path"])
            if ds_id in datasets:
                raise ConfigurationError(f"duplicate dataset id {ds_id!r}")
            if not ds_path.exists():
                raise ConfigurationError(f"dataset {ds_id!r}: {ds_path} does not exist")
            datasets[ds_id] = ds_path
        if not datasets:
            raise ConfigurationError("config lists no datasets")
        embeddings = {k: resolve(v) for k, v in raw.get("embeddings", {}).items()}
        for k, v in embeddings.items():
            if not v.exists():
                raise ConfigurationError(f"embedding {k!r}: {v} does not exist")
        search = dict(raw.get("search", {}))
        search.setdefault("embedding_ids", list(embeddings) or ["random"])
        try:
            space = SearchSpace.from_dict(search)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad search space: {exc}") from None
        known = set(embeddings) or {"random"}
        if set(space.embedding_ids) - known:
            raise ConfigurationError(f"search uses unknown embeddings {space.embedding_ids}")
        return cls(
            datasets=datasets,
            output_dir=resolve(raw.get("output_dir", "runs")),
            embeddings=embeddings,
            embedding_dim=int(raw.get("embedding_dim", 32)),
            scenario_seed=int(raw.get("scenario_seed", 1)),
            search=space,
            train=dict(raw.get("train", {})),
            aux={k: list(v) for k, v in raw.get("aux", {}).items()},
            scenario_sizes=dict(raw.get("scenario_sizes", D.SCENARIO_SIZES)),
            dev_tokens=int(raw.get("dev_tokens", D.DEV_TOKENS)),
            test_tokens=int(raw.get("test_tokens", D.TEST_TOKENS)),
        )

    def aux_for(self, main: str) -> list[str]:
        aux = self.aux.get(main, [d for d in self.datasets if d != main])
        unknown = set(aux) - set(self.datasets)
        if unknown:
            raise ConfigurationError(f"unknown auxiliary datasets {sorted(unknown)}")
        return aux


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_dataset(cfg: ExperimentConfig, ds_id: str) -> D.Dataset:
    if ds_id not in cfg.datasets:
        raise ConfigurationError(f"unknown dataset {ds_id!r}")
    try:
        return D.load_corpus(cfg.datasets[ds_id], ds_id)
    except D.CorpusFormatError as exc:
        raise DataError(f"{ds_id}: {exc}") from None


def _scenario_path(cfg: ExperimentConfig, ds_id: str, k: str) -> Path:
    return cfg.output_dir / "scenarios" / ds_id / f"{k}.json"


def _embedding_tables(cfg: ExperimentConfig, datasets: list[D.Dataset]) -> dict:
    vocab = set().union(*(d.vocabulary() for d in datasets))
    if not cfg.embeddings:
        return {"random": D.random_embeddings(vocab, cfg.embedding_dim, seed=0)}
    tables = {}
    for emb_id, path in cfg.embeddings.items():
        try:
            with path.open(encoding="utf-8") as fh:
                tables[emb_id] = D.load_embeddings(fh, vocab)
        except (D.EmbeddingFormatError, D.InsufficientDataError) as exc:
            raise DataError(f"embedding {emb_id!r}: {exc}") from None
    return tables


# subcommands ----------------------------------------------------------------


def cmd_prepare(cfg: ExperimentConfig, seed: int | None = None) -> list[Path]:
    seed = cfg.scenario_seed if seed is None else seed
    written = []
    for ds_id, path in cfg.datasets.items():
        dataset = _load_dataset(cfg, ds_id)
        try:
            scenarios = D.build_scenarios(dataset, seed, cfg.scenario_sizes,
                                          cfg.dev_tokens, cfg.test_tokens)
        except D.InsufficientDataError as exc:
            raise DataError(f"insufficient data: {exc}") from None
        corpus_hash = _sha256(path)
        for k, sc in scenarios.items():
            out = _scenario_path(cfg, ds_id, k)
            out.parent.mkdir(parents=True, exist_ok=True)
            manifest = sc.to_dict()
            manifest["corpus_sha256"] = corpus_hash
            manifest["repairs"] = dataset.repairs
            out.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
            written.append(out)
        log.info("%s: %d scenarios (%d tokens, %d BIO repairs)", ds_id, len(scenarios),
                 dataset.n_tokens, dataset.repairs)
    return written


def _load_split(cfg: ExperimentConfig, main: str, k: str) -> tuple[D.Dataset, Split, str]:
    path = _scenario_path(cfg, main, k)
    if not path.exists():
        raise ConfigurationError(f"missing scenario manifest {path}; run 'prepare' first")
    manifest_hash = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    dataset = _load_dataset(cfg, main)
    scenario = D.read_scenario(path)
    try:
        split = Split.from_scenario(dataset, scenario)
    except KeyError as exc:
        raise DataError(f"scenario {path} names unknown document {exc}") from None
    return dataset, split, manifest_hash


def _plan(cfg: ExperimentConfig, mode: str, main: str, seed: int) -> tuple[TrainPlan, list]:
    aux_ids = cfg.aux_for(main) if mode in ("mtl", "union") else []
    if mode == "mtl" and not aux_ids:
        raise ConfigurationError("mode 'mtl' needs at least one auxiliary dataset")
    opts = {k: cfg.train[k] for k in ("batch_size", "max_epochs", "patience", "clip_norm", "lr")
            if k in cfg.train}
    plan = TrainPlan(mode, main, tuple(aux_ids), seed=seed, **opts)
    return plan, [_load_dataset(cfg, a) for a in aux_ids]


def _write_run_manifest(cfg: ExperimentConfig, record: RunRecord, scenario_hash: str) -> None:
    out = cfg.output_dir / "runs"
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "run": record.to_dict(),
        "scenario_manifest_sha256": scenario_hash,
        "corpora_sha256": {d: _sha256(p)[:16] for d, p in cfg.datasets.items()},
        "written": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    name = f"{record.dataset}-{record.k}-{record.plan.mode}-s{record.search_seed}-run{record.run_id}.json"
    (out / name).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def _collector(cfg: ExperimentConfig, scenario_hash: str):
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    def collect(record: RunRecord) -> None:
        save_records([record], cfg.output_dir / "runs.jsonl")
        append_results(cfg.output_dir / "results.csv", [record_row(record)])
        _write_run_manifest(cfg, record, scenario_hash)
        log.info("run %d %s: dev %s test %s", record.run_id, record.status,
                 record.dev_score, record.test_score)

    return collect


def _completed_runs(cfg: ExperimentConfig, main: str, k: str, mode: str, seed: int) -> set[int]:
    path = cfg.output_dir / "runs.jsonl"
    if not path.exists():
        return set()
    return {r.run_id for r in load_records(path)
            if r.dataset == main and r.k == k and r.plan.mode == mode and r.search_seed == seed}


def cmd_search(cfg: ExperimentConfig, mode: str, main: str, k: str, n_runs: int, seed: int,
               jobs: int = 1) -> list[RunRecord]:
    dataset, split, scenario_hash = _load_split(cfg, main, k)
    plan, aux = _plan(cfg, mode, main, seed)
    tables = _embedding_tables(cfg, [dataset] + aux)
    done = _completed_runs(cfg, main, k, mode, seed)
    if done:
        log.info("resuming: %d runs already recorded", len(done))
    return run_search(cfg.search, plan, n_runs, seed, split, aux, tables, skip=done, jobs=jobs,
                      checkpoint_dir=cfg.output_dir / "checkpoints",
                      on_record=_collector(cfg, scenario_hash))


def cmd_train(cfg: ExperimentConfig, mode: str, main: str, k: str, seed: int,
              model_config: ModelConfig | None = None) -> RunRecord:
    dataset, split, scenario_hash = _load_split(cfg, main, k)
    plan, aux = _plan(cfg, mode, main, seed)
    tables = _embedding_tables(cfg, [dataset] + aux)
    if model_config is None:
        model_config = ModelConfig(seed=seed, embedding_id=next(iter(tables)))
    if model_config.embedding_id not in tables:
        raise ConfigurationError(f"unknown embedding id {model_config.embedding_id!r}")
    path = cfg.output_dir / "runs.jsonl"
    run_id = len(load_records(path)) if path.exists() else 0
    record, _ = train(plan, model_config, split, aux, tables[model_config.embedding_id], run_id,
                      cfg.output_dir / "checkpoints")
    _collector(cfg, scenario_hash)(record)
    return record


def cmd_report(cfg: ExperimentConfig, out: Path | None = None, top_k: int = 10) -> dict:
    results = cfg.output_dir / "results.csv"
    if not results.exists():
        raise DataError(f"no results at {results}; run 'search' first")
    rows = read_results(results)
    try:
        return write_report(rows, out or cfg.output_dir, top_k)
    except ValueError as exc:
        raise DataError(f"empty results: {exc}") from None


def cmd_gen_synth(out: Path, tokens: int, types: list[str], seed: int, name: str,
                  structure_seed: int, embeddings: Path | None, dim: int) -> D.Dataset:
    dataset = generate(tokens, types, seed, name=name, structure_seed=structure_seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(D.format_corpus(dataset), encoding="utf-8")
    if embeddings is not None:
        table = D.random_embeddings(dataset.vocabulary(), dim, seed=structure_seed)
        with embeddings.open("w", encoding="utf-8") as fh:
            D.write_embeddings(table, fh)
    return dataset


# argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="argmtl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        return sp

    sp = with_config(sub.add_parser("prepare", help="build sparsity-scenario manifests"))
    sp.add_argument("--seed", type=int, help="override scenario_seed")

    for cmd in ("train", "search"):
        sp = with_config(sub.add_parser(cmd, help=f"{cmd} models for one main task"))
        sp.add_argument("--mode", required=True, choices=["stl", "mtl", "union"])
        sp.add_argument("--main", required=True, help="main dataset id")
        sp.add_argument("--k", required=True, help="sparsity scenario, e.g. 1K or 21K")
        sp.add_argument("--seed", type=int, default=0)
        if cmd == "search":
            sp.add_argument("--runs", type=int, default=8)
            sp.add_argument("--jobs", type=int, default=1)
        else:
            sp.add_argument("--layers", default="100", help="hidden sizes, e.g. 100 or 100,100")
            sp.add_argument("--dropout", type=float, nargs=2, default=(0.25, 0.25),
                            metavar=("INPUT", "RECURRENT"))
            sp.add_argument("--embedding", help="embedding id (default: first configured)")

    sp = with_config(sub.add_parser("report", help="write report.txt, curves.csv, curves.png"))
    sp.add_argument("--out", type=Path)
    sp.add_argument("--top", type=int, default=10, help="runs averaged per cell")

    sp = sub.add_parser("gen-synth", help="write a synthetic corpus")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--tokens", type=int, default=50_000)
    sp.add_argument("--types", default="claim,premise")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--name", default="synth")
    sp.add_argument("--structure-seed", type=int, default=0)
    sp.add_argument("--embeddings", type=Path, help="also write random embeddings here")
    sp.add_argument("--dim", type=int, default=32)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-synth":
            types = [t.strip() for t in args.types.split(",") if t.strip()]
            ds = cmd_gen_synth(args.out, args.tokens, types, args.seed, args.name,
                               args.structure_seed, args.embeddings, args.dim)
            print(f"wrote {ds.n_tokens} tokens in {len(ds.documents)} documents to {args.out}")
            return EXIT_OK
        cfg = ExperimentConfig.load(args.config)
        if args.command == "prepare":
            for path in cmd_prepare(cfg, args.seed):
                print(path)
        elif args.command == "train":
            layers = tuple(int(h) for h in args.layers.split(","))
            mc = ModelConfig(layers, args.dropout[0], args.dropout[1],
                             args.embedding or (next(iter(cfg.embeddings), "random")), args.seed)
            record = cmd_train(cfg, args.mode, args.main, args.k, args.seed, mc)
            print(json.dumps({"status": record.status, "dev": record.dev_score,
                              "test": record.test_score}))
            if record.status != "ok":
                return EXIT_TRAIN
        elif args.command == "search":
            records = cmd_search(cfg, args.mode, args.main, args.k, args.runs, args.seed,
                                 args.jobs)
            ok = sum(r.completed for r in records)
            print(f"{ok}/{len(records)} runs completed")
            if records and not ok:
                print("error: every run failed", file=sys.stderr)
                return EXIT_TRAIN
        elif args.command == "report":
            for kind, path in cmd_report(cfg, args.out, args.top).items():
                print(f"{kind}: {path}")
    except (ConfigurationError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, D.CorpusFormatError, D.InsufficientDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
