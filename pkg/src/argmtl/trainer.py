"""Single-task, multi-task and union-baseline training, plus random search."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import NonFiniteError, backward, forward
from .data import Dataset, Document, EmbeddingTable, SparsityScenario, TagSet, make_batches, \
    project_tags, union_datasets
from .evaluate import count_invalid_bio_corpus, macro_f1, per_label_scores
from .model import ModelConfig, TaskModel, embed, save_checkpoint
from .optim import NadamState, NonFiniteGradientError, SearchSpace, clip_global_norm, \
    nadam_step, sample_config

log = logging.getLogger(__name__)

MODES = ("stl", "mtl", "union")


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainPlan:
    mode: str
    main: str
    aux: tuple[str, ...] = ()
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    clip_norm: float = 5.0
    lr: float = 2e-3

    def __post_init__(self):
        self.mode = self.mode.lower()
        self.aux = tuple(self.aux)
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "mtl" and not self.aux:
            raise ConfigurationError("MTL needs at least one auxiliary task")
        if self.mode == "stl" and self.aux:
            raise ConfigurationError("STL takes no auxiliary tasks")
        if self.main in self.aux or len(set(self.aux)) != len(self.aux):
            raise ConfigurationError("task ids must be unique")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch size, max epochs and patience must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aux"] = list(self.aux)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(**d)


@dataclass
class RunRecord:
    run_id: int
    dataset: str
    k: str
    config: ModelConfig
    plan: TrainPlan
    status: str = "ok"
    dev_score: float | None = None
    test_score: float | None = None
    per_label_f1: dict[str, float] = field(default_factory=dict)
    invalid_bio: dict[str, int] = field(default_factory=dict)
    epochs_trained: int = 0
    best_epoch: int = 0
    checkpoint: str | None = None
    error: str | None = None
    wall_clock: float = 0.0
    dev_curve: list[float] = field(default_factory=list)
    search_seed: int | None = None

    @property
    def completed(self) -> bool:
        return self.status == "ok" and self.dev_score is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_dict()
        d["plan"] = self.plan.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["config"] = ModelConfig.from_dict(d["config"])
        d["plan"] = TrainPlan.from_dict(d["plan"])
        return cls(**d)


@dataclass
class Split:
    """Main-task data for one scenario."""

    name: str
    tagset: TagSet
    train: list[Document]
    dev: list[Document]
    test: list[Document]
    k: str = ""

    @classmethod
    def from_scenario(cls, dataset: Dataset, scenario: SparsityScenario) -> "Split":
        return cls(dataset.name, dataset.tagset, dataset.subset(scenario.train),
                   dataset.subset(scenario.dev), dataset.subset(scenario.test), scenario.k)


# schedule -------------------------------------------------------------------


def epoch_schedule(main_batches: int, aux_pools: Mapping[str, int], rng: np.random.Generator,
                   main: str = "main") -> list[tuple[str, int]]:
    """One epoch of (task, batch index) steps.

    The main task visits each of its ``main_batches`` batches once; every
    auxiliary task gets the same number of batches drawn with replacement
    from its pool. The combined list is shuffled.
    """
    if main_batches < 1:
        raise ValueError("main task needs at least one batch")
    steps = [(main, i) for i in range(main_batches)]
    for task, pool in aux_pools.items():
        if pool < 1:
            raise ValueError(f"auxiliary task {task!r} has no batches")
        steps += [(task, int(i)) for i in rng.integers(pool, size=main_batches)]
    if aux_pools:
        order = rng.permutation(len(steps))
        steps = [steps[i] for i in order]
    return steps


# training -------------------------------------------------------------------


Encoded = tuple[np.ndarray, list[int]]


def encode(sentences: Iterable, table: EmbeddingTable) -> list[Encoded]:
    return [(embed([t.surface for t in s], table), [t.tag for t in s]) for s in sentences]


def _sentences(docs: Iterable[Document]) -> list:
    return [s for d in docs for s in d.sentences]


def batch_gradients(model: TaskModel, task: str, batch: Sequence[Encoded], rng,
                    train: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Mean CRF negative log-likelihood over ``batch`` and its gradients.

    Each sentence gets fresh variational dropout masks.
    """
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for x, gold in batch:
        masks = model.make_masks(rng, train=train)
        g, nll, nodes = model.loss_graph(x, gold, task, masks)
        total += forward(g, nll)
        backward(g, nll)
        for name, node in nodes.items():
            if name in grads:
                grads[name] += node.grad
            else:
                grads[name] = node.grad.copy()
    n = len(batch)
    for v in grads.values():
        v /= n
    return total / n, grads


def predict_tags(model: TaskModel, task: str, data: Sequence[Encoded], tagset: TagSet,
                 main_tagset: TagSet | None = None) -> list[list[str]]:
    """Viterbi tags as names, projected onto ``main_tagset`` when given."""
    out = []
    for x, _ in data:
        tags = tagset.decode(model.predict(x, task))
        out.append(project_tags(tags, main_tagset) if main_tagset is not None else tags)
    return out


def score_split(model: TaskModel, task: str, data: Sequence[Encoded], tagset: TagSet,
                main_tagset: TagSet) -> tuple[float, list[list[str]], list[list[str]]]:
    """Macro-F1 over the main tag set; ``data`` holds gold indices into ``main_tagset``."""
    pred = predict_tags(model, task, data, tagset, main_tagset)
    gold = [main_tagset.decode(y) for _, y in data]
    return macro_f1(gold, pred, main_tagset.tags), gold, pred


def build_model(plan: TrainPlan, config: ModelConfig, split: Split, aux: Sequence[Dataset],
                embeddings: EmbeddingTable):
    """Resolve per-mode tasks: returns (model, tag sets by task, training pools by task)."""
    if plan.main != split.name:
        raise ConfigurationError(f"plan main task {plan.main!r} != split {split.name!r}")
    aux_by_name = {a.name: a for a in aux}
    if set(aux_by_name) != set(plan.aux):
        raise ConfigurationError(f"aux datasets {sorted(aux_by_name)} != plan {list(plan.aux)}")
    aux = [aux_by_name[a] for a in plan.aux]
    if plan.mode == "union":
        merged = union_datasets(Dataset(split.name, split.train, split.tagset), aux)
        tagsets = {split.name: merged.tagset}
        pools = {split.name: merged.documents}
    else:
        tagsets = {split.name: split.tagset}
        pools = {split.name: split.train}
        for a in aux:
            tagsets[a.name] = a.tagset
            pools[a.name] = a.documents
    model = TaskModel(config, embeddings.dim, {t: len(ts) for t, ts in tagsets.items()})
    return model, tagsets, pools


def train(plan: TrainPlan, config: ModelConfig, split: Split, aux: Sequence[Dataset] = (),
          embeddings: EmbeddingTable | None = None, run_id: int = 0,
          checkpoint_dir: str | os.PathLike | None = None,
          progress: Callable[[int, float, float], None] | None = None,
          ) -> tuple[RunRecord, TaskModel | None]:
    """Train one model and score its best-dev checkpoint on the test split.

    A non-finite loss or gradient marks the record ``failed`` instead of
    raising; such records carry no scores.
    """
    if embeddings is None:
        raise ConfigurationError("an embedding table is required")
    started = time.perf_counter()
    record = RunRecord(run_id, split.name, split.k, config, plan)
    model, tagsets, pools = build_model(plan, config, split, aux, embeddings)
    main = split.name
    main_tagset = split.tagset

    batch_rng, sched_rng, drop_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(plan.seed).spawn(3))
    encoded = {t: encode(_sentences(docs), embeddings) for t, docs in pools.items()}
    dev = encode(_sentences(split.dev), embeddings)
    test = encode(_sentences(split.test), embeddings)
    if not encoded[main]:
        raise ConfigurationError(f"no training sentences for {main!r}")
    states = {t: NadamState(lr=plan.lr) for t in tagsets}

    best_score, best_params, bad = -1.0, None, 0
    try:
        for epoch in range(1, plan.max_epochs + 1):
            batches = {t: make_batches(encoded[t], plan.batch_size, batch_rng) for t in encoded}
            aux_sizes = {t: len(b) for t, b in batches.items() if t != main}
            schedule = epoch_schedule(len(batches[main]), aux_sizes, sched_rng, main=main)
            epoch_loss = 0.0
            for task, bi in schedule:
                loss, grads = batch_gradients(model, task, batches[task][bi], drop_rng)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"non-finite loss on task {task}")
                clip_global_norm(grads, plan.clip_norm)
                nadam_step(model.params, grads, states[task])
                epoch_loss += loss
            dev_score = score_split(model, main, dev, tagsets[main], main_tagset)[0]
            record.dev_curve.append(dev_score)
            record.epochs_trained = epoch
            if progress is not None:
                progress(epoch, epoch_loss / len(schedule), dev_score)
            if dev_score > best_score:
                best_score, bad = dev_score, 0
                best_params = {n: p.copy() for n, p in model.params.items()}
                record.best_epoch = epoch
            else:
                bad += 1
                if bad >= plan.patience:
                    break
            if dev_score >= 1.0:
                break
    except (NonFiniteError, NonFiniteGradientError, FloatingPointError) as exc:
        log.warning("run %d failed: %s", run_id, exc)
        record.status = "failed"
        record.error = str(exc)
        record.wall_clock = time.perf_counter() - started
        return record, None

    model.params = best_params
    record.dev_score = best_score
    test_score, gold, pred = score_split(model, main, test, tagsets[main], main_tagset)
    record.test_score = test_score
    record.per_label_f1 = {lab: s["f1"]
                           for lab, s in per_label_scores(gold, pred, main_tagset.tags).items()}
    record.invalid_bio = count_invalid_bio_corpus(pred)._asdict()
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"{split.name}-{split.k or 'all'}-{plan.mode}-run{run_id}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path, {"run_id": run_id, "plan": plan.to_dict()})
        record.checkpoint = str(path)
    record.wall_clock = time.perf_counter() - started
    return record, model


# random search --------------------------------------------------------------


def child_seeds(master_seed: int, n: int) -> list[int]:
    """``n`` distinct run seeds derived from ``master_seed``."""
    rng = np.random.default_rng(master_seed)
    return [int(s) for s in rng.choice(2**31 - 1, size=n, replace=False)]


def search_configs(space: SearchSpace, n_runs: int, master_seed: int) -> list[ModelConfig]:
    """Config of run ``i`` depends only on ``(space, master_seed, i)``."""
    seeds = child_seeds(master_seed, n_runs)
    rng = np.random.default_rng([master_seed, 1])
    return [sample_config(space, rng, i, seed=seeds[i]) for i in range(n_runs)]


def _run_one(args):
    plan, config, split, aux, embeddings, run_id, checkpoint_dir, search_seed = args
    try:
        record, _ = train(plan, config, split, aux, embeddings, run_id, checkpoint_dir)
    except ConfigurationError:
        raise
    except Exception as exc:  # recorded, the search goes on
        log.exception("run %d crashed", run_id)
        record = RunRecord(run_id, split.name, split.k, config, plan, status="failed",
                           error=f"{type(exc).__name__}: {exc}")
    record.search_seed = search_seed
    return record


def run_search(space: SearchSpace, plan: TrainPlan, n_runs: int, master_seed: int,
               split: Split, aux: Sequence[Dataset] = (),
               embeddings: EmbeddingTable | Mapping[str, EmbeddingTable] | None = None,
               skip: Iterable[int] = (), jobs: int = 1,
               checkpoint_dir: str | os.PathLike | None = None,
               on_record: Callable[[RunRecord], None] | None = None) -> list[RunRecord]:
    """Train ``n_runs`` sampled configurations; failures are recorded, not raised.

    ``embeddings`` may map embedding ids to tables. Run ids in ``skip``
    (already completed by an earlier, interrupted search) are not rerun.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    configs = search_configs(space, n_runs, master_seed)
    skip = set(skip)
    jobs_args = []
    for run_id, cfg in enumerate(configs):
        if run_id in skip:
            continue
        table = embeddings.get(cfg.embedding_id) if isinstance(embeddings, Mapping) else embeddings
        if table is None:
            raise ConfigurationError(f"no embedding table for id {cfg.embedding_id!r}")
        run_plan = TrainPlan(**{**plan.to_dict(), "seed": cfg.seed})
        jobs_args.append((run_plan, cfg, split, list(aux), table, run_id, checkpoint_dir,
                          master_seed))

    records = []
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for record in pool.map(_run_one, jobs_args):
                records.append(record)
                if on_record is not None:
                    on_record(record)
    else:
        for args in jobs_args:
            record = _run_one(args)
            records.append(record)
            if on_record is not None:
                on_record(record)
    usable = [r for r in records if r.completed]
    if not usable:
        log.warning("search produced no completed runs (%d failed)", len(records))
    return records


def save_records(records: Iterable[RunRecord], path: str | os.PathLike) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path: str | os.PathLike) -> list[RunRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(RunRecord.from_dict(json.loads(line)))
    return out
