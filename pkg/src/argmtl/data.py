"""Corpora, BIO tag sets, embeddings, sparsity scenarios and batching.

Corpus interchange format (UTF-8)::

    #doc essay01
    Since<TAB>O
    it<TAB>B-premise
    killed<TAB>I-premise
    <blank line ends a sentence>

Tags are ``O``, ``B-<type>`` or ``I-<type>`` with ``<type>`` matching
``[a-z0-9_]+``. Lines before the first ``#doc`` header belong to an implicit
document.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

log = logging.getLogger(__name__)

TYPE_RE = re.compile(r"^[a-z0-9_]+$")
SCENARIO_SIZES: dict[str, int] = {"21K": 21_000, "12K": 12_000, "6K": 6_000, "1K": 1_000}
DEV_TOKENS = 9_000
TEST_TOKENS = 5_000


class CorpusFormatError(ValueError):
    """Malformed line or tag in a corpus file."""


class InsufficientDataError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


# tag algebra ----------------------------------------------------------------


def split_tag(tag: str) -> tuple[str, str | None]:
    """``"B-claim"`` -> ``("B", "claim")``; ``"O"`` -> ``("O", None)``."""
    if tag == "O":
        return "O", None
    prefix, sep, ctype = tag.partition("-")
    if not sep or prefix not in ("B", "I"):
        raise CorpusFormatError(f"unknown tag prefix in {tag!r}")
    if not TYPE_RE.match(ctype):
        raise CorpusFormatError(f"bad component type in {tag!r}")
    return prefix, ctype


class TagSet:
    """The label set ``{O} + {B, I} x types``, ordered O, B-t1, I-t1, B-t2, ..."""

    def __init__(self, types: Iterable[str]):
        types = sorted(set(types))
        for t in types:
            if not TYPE_RE.match(t):
                raise ValueError(f"bad component type {t!r}")
        self.types: tuple[str, ...] = tuple(types)
        tags = ["O"]
        for t in self.types:
            tags += [f"B-{t}", f"I-{t}"]
        self.tags: tuple[str, ...] = tuple(tags)
        self.index = {tag: i for i, tag in enumerate(self.tags)}

    def __len__(self):
        return len(self.tags)

    def __eq__(self, other):
        return isinstance(other, TagSet) and self.types == other.types

    def __hash__(self):
        return hash(self.types)

    def __repr__(self):
        return f"TagSet({list(self.types)})"

    def encode(self, tags: Sequence[str]) -> list[int]:
        return [self.index[t] for t in tags]

    def decode(self, indices: Sequence[int]) -> list[str]:
        return [self.tags[i] for i in indices]

    @staticmethod
    def valid_start(tag: str) -> bool:
        return not tag.startswith("I-")

    @staticmethod
    def valid_transition(a: str, b: str) -> bool:
        """False for O -> I-t and for B-s/I-s -> I-t with s != t."""
        if not b.startswith("I-"):
            return True
        if a == "O":
            return False
        return a[2:] == b[2:]


def repair_bio(tags: Sequence[str]) -> tuple[list[str], int]:
    """Turn every I-tag that cannot continue its predecessor into B of its type."""
    out, fixes, prev = [], 0, "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            tag = "B-" + tag[2:]
            fixes += 1
        out.append(tag)
        prev = tag
    return out, fixes


# corpora --------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    surface: str
    tag: int


@dataclass
class Document:
    doc_id: str
    sentences: list[list[Token]]

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


@dataclass
class Dataset:
    name: str
    documents: list[Document]
    tagset: TagSet
    repairs: int = 0

    @property
    def n_tokens(self) -> int:
        return sum(d.n_tokens for d in self.documents)

    def sentences(self) -> list[list[Token]]:
        return [s for d in self.documents for s in d.sentences]

    def vocabulary(self) -> set[str]:
        return {tok.surface for s in self.sentences() for tok in s}

    def subset(self, doc_ids: Iterable[str]) -> list[Document]:
        by_id = {d.doc_id: d for d in self.documents}
        return [by_id[i] for i in doc_ids]


def parse_corpus(stream: TextIO | str, name: str = "corpus") -> Dataset:
    """Read the interchange format into a :class:`Dataset`.

    Invalid BIO continuations (I after O, sentence-initial I, I of another
    type) are rewritten to B of the same type; the count is kept in
    ``Dataset.repairs``.
    """
    lines = stream.splitlines() if isinstance(stream, str) else stream.read().splitlines()
    raw_docs: list[tuple[str, list[list[tuple[str, str]]]]] = []
    doc: tuple[str, list[list[tuple[str, str]]]] | None = None
    sentence: list[tuple[str, str]] = []
    types: set[str] = set()

    def close_sentence():
        nonlocal sentence
        if sentence:
            assert doc is not None
            doc[1].append(sentence)
            sentence = []

    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r")
        if line.startswith("#doc"):
            close_sentence()
            doc_id = line[4:].strip()
            if not doc_id or line[4] not in " \t":
                raise CorpusFormatError(f"line {lineno}: '#doc' header needs an id")
            doc = (doc_id, [])
            raw_docs.append(doc)
            continue
        if not line.strip():
            close_sentence()
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise CorpusFormatError(f"line {lineno}: expected 'surface<TAB>tag', got {line!r}")
        surface, tag = parts[0], parts[1].strip()
        try:
            _, ctype = split_tag(tag)
        except CorpusFormatError as exc:
            raise CorpusFormatError(f"line {lineno}: {exc}") from None
        if ctype is not None:
            types.add(ctype)
        if doc is None:
            doc = (f"{name}-0", [])
            raw_docs.append(doc)
        sentence.append((surface, tag))
    close_sentence()

    seen = set()
    for doc_id, _ in raw_docs:
        if doc_id in seen:
            raise CorpusFormatError(f"duplicate document id {doc_id!r}")
        seen.add(doc_id)

    tagset = TagSet(types)
    documents, repairs = [], 0
    for doc_id, sents in raw_docs:
        if not sents:
            continue
        out = []
        for s in sents:
            tags, fixes = repair_bio([t for _, t in s])
            repairs += fixes
            out.append([Token(w, tagset.index[t]) for (w, _), t in zip(s, tags)])
        documents.append(Document(doc_id, out))
    if repairs:
        log.info("%s: rewrote %d invalid I-tags to B", name, repairs)
    return Dataset(name, documents, tagset, repairs)


def load_corpus(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_corpus(fh, name or path.stem)


def format_corpus(dataset: Dataset) -> str:
    out = []
    for doc in dataset.documents:
        out.append(f"#doc {doc.doc_id}")
        for sent in doc.sentences:
            out += [f"{tok.surface}\t{dataset.tagset.tags[tok.tag]}" for tok in sent]
            out.append("")
    return "\n".join(out) + "\n"


# union baseline -------------------------------------------------------------


def retag(docs: Iterable[Document], source: TagSet, target: TagSet) -> list[Document]:
    """Re-index tags from ``source`` into ``target``; tags ``target`` lacks become O."""
    mapping = [target.index.get(tag, 0) for tag in source.tags]
    return [
        Document(d.doc_id, [[Token(t.surface, mapping[t.tag]) for t in s] for s in d.sentences])
        for d in docs
    ]


def union_datasets(main: Dataset, auxes: Sequence[Dataset] = ()) -> Dataset:
    """Pool documents of ``main`` and ``auxes`` under one merged tag set.

    Identically named component types are merged. Document ids of auxiliary
    data are prefixed with the source name to stay unique.
    """
    if not auxes:
        return main
    tagset = TagSet(set(main.tagset.types).union(*(a.tagset.types for a in auxes)))
    docs = retag(main.documents, main.tagset, tagset)
    for aux in auxes:
        for d in retag(aux.documents, aux.tagset, tagset):
            docs.append(Document(f"{aux.name}:{d.doc_id}", d.sentences))
    name = "+".join([main.name] + [a.name for a in auxes])
    return Dataset(name, docs, tagset, main.repairs + sum(a.repairs for a in auxes))


def project_tags(tags: Sequence[str], tagset: TagSet) -> list[str]:
    """Map tag names outside ``tagset`` to O (scoring a union model on its main task)."""
    return [t if t in tagset.index else "O" for t in tags]


# embeddings -----------------------------------------------------------------


class EmbeddingTable:
    def __init__(self, vectors: dict[str, np.ndarray], unknown: np.ndarray | None = None,
                 dim: int | None = None):
        if dim is None:
            if not vectors:
                raise ValueError("dimension needed for an empty table")
            dim = len(next(iter(vectors.values())))
        self.dim = int(dim)
        self.vectors = vectors
        for w, v in vectors.items():
            if v.shape != (self.dim,):
                raise EmbeddingFormatError(f"vector for {w!r} has shape {v.shape}")
        if unknown is None:
            unknown = (np.mean(np.stack(list(vectors.values())), axis=0)
                       if vectors else np.zeros(self.dim))
        self.unknown = np.asarray(unknown, dtype=np.float64)

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, word):
        return word in self.vectors

    def lookup(self, token: str) -> np.ndarray:
        v = self.vectors.get(token)
        if v is None:
            v = self.vectors.get(token.lower())
        return self.unknown if v is None else v


def load_embeddings(stream: TextIO | str, vocab: Iterable[str],
                    min_coverage: float = 0.3) -> EmbeddingTable:
    """Read ``word v1 ... vd`` lines, keeping only words needed for ``vocab``.

    An optional ``count dim`` header line is detected and skipped. The first
    occurrence of a repeated word wins. Fails when fewer than
    ``min_coverage`` of the vocabulary words resolve (directly or lowercased).
    """
    vocab = set(vocab)
    wanted = vocab | {w.lower() for w in vocab}
    lines = stream.splitlines() if isinstance(stream, str) else stream
    vectors: dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(lines, 1):
        parts = line.rstrip("\n").rstrip().split(" ")
        if not parts or parts == [""]:
            continue
        if lineno == 1 and len(parts) == 2 and parts[0].isdigit() and parts[1].isdigit():
            dim = int(parts[1])
            continue
        word, values = parts[0], parts[1:]
        if dim is None:
            dim = len(values)
            if dim == 0:
                raise EmbeddingFormatError(f"line {lineno}: no vector values")
        if len(values) != dim:
            raise EmbeddingFormatError(
                f"line {lineno}: {len(values)} values, expected {dim} (ragged dimension)")
        if word in wanted and word not in vectors:
            try:
                vectors[word] = np.array([float(x) for x in values])
            except ValueError:
                raise EmbeddingFormatError(f"line {lineno}: non-numeric value") from None
    if dim is None:
        raise EmbeddingFormatError("empty embedding file")
    covered = sum(1 for w in vocab if w in vectors or w.lower() in vectors)
    if vocab and covered < min_coverage * len(vocab):
        raise InsufficientDataError(
            f"embeddings cover {covered}/{len(vocab)} vocabulary words "
            f"(< {min_coverage:.0%}); insufficient coverage")
    return EmbeddingTable(vectors, dim=dim)


def random_embeddings(vocab: Iterable[str], dim: int, seed: int) -> EmbeddingTable:
    """Seeded Gaussian vectors for a vocabulary (synthetic corpora, tests)."""
    rng = np.random.default_rng(seed)
    words = sorted(set(vocab))
    vecs = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(words), dim))
    return EmbeddingTable({w: vecs[i] for i, w in enumerate(words)}, dim=dim)


def write_embeddings(table: EmbeddingTable, fh: TextIO, header: bool = False) -> None:
    if header:
        fh.write(f"{len(table)} {table.dim}\n")
    for w, v in table.vectors.items():
        fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


# sparsity scenarios ---------------------------------------------------------


@dataclass
class SparsityScenario:
    dataset: str
    k: str
    train: list[str]
    dev: list[str]
    test: list[str]
    seed: int
    tokens: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "k": self.k,
            "seed": self.seed,
            "tokens": self.tokens,
            "train": self.train,
            "dev": self.dev,
            "test": self.test,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparsityScenario":
        return cls(d["dataset"], d["k"], list(d["train"]), list(d["dev"]), list(d["test"]),
                   int(d["seed"]), dict(d.get("tokens", {})))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def take_documents(docs: Sequence[Document], min_tokens: int) -> int:
    """Number of leading whole documents needed to reach ``min_tokens``.

    Returns ``len(docs) + 1`` when all of them together fall short.
    """
    total = 0
    for i, d in enumerate(docs):
        total += d.n_tokens
        if total >= min_tokens:
            return i + 1
    return len(docs) + 1


def build_scenarios(
    dataset: Dataset,
    seed: int,
    sizes: dict[str, int] | None = None,
    dev_tokens: int = DEV_TOKENS,
    test_tokens: int = TEST_TOKENS,
) -> dict[str, SparsityScenario]:
    """Split ``dataset`` into nested sparse training sets with fixed dev/test.

    Documents are shuffled by ``seed`` and taken whole into train until the
    largest size is reached, then into dev; the rest is test. Smaller
    training sets are prefixes of a second shuffle of the largest one, so
    they nest.
    """
    sizes = dict(sorted((sizes or SCENARIO_SIZES).items(), key=lambda kv: -kv[1]))
    largest_k, largest = next(iter(sizes.items()))
    need = largest + dev_tokens + test_tokens
    if dataset.n_tokens < need:
        raise InsufficientDataError(
            f"dataset {dataset.name!r} has {dataset.n_tokens} tokens, needs at least {need}")
    rng = np.random.default_rng(seed)
    order = [dataset.documents[i] for i in rng.permutation(len(dataset.documents))]
    n_train = take_documents(order, largest)
    rest = order[n_train:]
    n_dev = take_documents(rest, dev_tokens)
    train, dev, test = order[:n_train], rest[:n_dev], rest[n_dev:]
    n_test = sum(d.n_tokens for d in test)
    if n_dev > len(rest) or n_test < test_tokens:
        raise InsufficientDataError(
            f"dataset {dataset.name!r}: only {n_test} test tokens after whole-document "
            f"train/dev splits, needs {test_tokens}")

    shuffled = [train[i] for i in rng.permutation(len(train))]
    dev_ids = [d.doc_id for d in dev]
    test_ids = [d.doc_id for d in test]
    dev_n = sum(d.n_tokens for d in dev)
    out = {}
    for k, size in sizes.items():
        if k == largest_k:
            chosen = train
        else:
            chosen = shuffled[: min(take_documents(shuffled, size), len(shuffled))]
        out[k] = SparsityScenario(
            dataset.name, k, [d.doc_id for d in chosen], dev_ids, test_ids, seed,
            {"train": sum(d.n_tokens for d in chosen), "dev": dev_n, "test": n_test},
        )
    return out


def write_scenario(scenario: SparsityScenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=1) + "\n", encoding="utf-8")


def read_scenario(path: str | Path) -> SparsityScenario:
    return SparsityScenario.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# batching -------------------------------------------------------------------


def make_batches(sentences: Sequence, batch_size: int, rng: np.random.Generator) -> list[list]:
    """Shuffle ``sentences`` and cut them into ``ceil(n / batch_size)`` batches.

    ``sentences`` may also be a list of :class:`Document`, in which case
    their sentences are pooled first.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if sentences and isinstance(sentences[0], Document):
        sentences = [s for d in sentences for s in d.sentences]
    order = rng.permutation(len(sentences))
    return [[sentences[i] for i in order[j : j + batch_size]]
            for j in range(0, len(order), batch_size)]
