"""BiLSTM-CRF tagger with a shared recurrent trunk and one CRF head per task."""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import Graph, Node, evaluate

CHECKPOINT_VERSION = 1

LAYOUTS: tuple[tuple[int, ...], ...] = ((50,), (100,), (150,), (100, 100))


@dataclass
class ModelConfig:
    layer_sizes: tuple[int, ...] = (100,)
    input_dropout: float = 0.25
    recurrent_dropout: float = 0.25
    embedding_id: str = "random"
    seed: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(h) for h in self.layer_sizes)
        if not self.layer_sizes or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {self.layer_sizes}")
        for rate in (self.input_dropout, self.recurrent_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CRFParams(NamedTuple):
    transitions: np.ndarray  # K x K, [from, to]
    start: np.ndarray  # 1 x K
    end: np.ndarray  # 1 x K


# embedding ------------------------------------------------------------------


def embed(tokens: Sequence[str], table) -> np.ndarray:
    """Stack the frozen vectors of ``tokens`` into an ``L x d`` matrix."""
    return np.stack([table.lookup(t) for t in tokens]) if tokens else np.zeros((0, table.dim))


# dropout --------------------------------------------------------------------


@dataclass
class LayerMasks:
    input: dict[str, np.ndarray] = field(default_factory=dict)
    recurrent: dict[str, np.ndarray] = field(default_factory=dict)


def _bernoulli(rng, n: int, rate: float) -> np.ndarray:
    if rate == 0.0:
        return np.ones((1, n))
    keep = rng.random((1, n)) >= rate
    return keep / (1.0 - rate)


def make_variational_masks(
    dims: Sequence[tuple[int, int]],
    input_rate: float,
    recurrent_rate: float,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> list[LayerMasks]:
    """One input mask and one recurrent mask per layer and direction.

    ``dims`` holds ``(input_size, hidden_size)`` per layer. Each mask is a
    ``1 x n`` row reused at every timestep of the sequence. In evaluation
    mode (``train=False``) every mask is all ones.
    """
    for rate in (input_rate, recurrent_rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
    out = []
    for d_in, hidden in dims:
        lm = LayerMasks()
        for direction in ("fw", "bw"):
            if train:
                lm.input[direction] = _bernoulli(rng, d_in, input_rate)
                lm.recurrent[direction] = _bernoulli(rng, hidden, recurrent_rate)
            else:
                lm.input[direction] = np.ones((1, d_in))
                lm.recurrent[direction] = np.ones((1, hidden))
        out.append(lm)
    return out


def _is_ones(mask: np.ndarray | None) -> bool:
    return mask is None or bool((mask == 1.0).all())


# recurrent trunk ------------------------------------------------------------


def _lstm_direction(g: Graph, x: Node, length: int, W: Node, U: Node, b: Node,
                    in_mask, rec_mask, reverse: bool) -> list[Node]:
    """Hidden states of one direction, returned in time order.

    Gate column layout of ``W``/``U``/``b``: input, forget, output, candidate.
    """
    hidden = U.value.shape[0]
    if not _is_ones(in_mask):
        x = g.mask(x, in_mask)
    proj = g.add(g.matmul(x, W), b)
    use_rec_mask = not _is_ones(rec_mask)
    steps = range(length - 1, -1, -1) if reverse else range(length)
    states: list[Node] = [None] * length  # type: ignore[list-item]
    h = c = None
    for t in steps:
        z = g.row_select(proj, t)
        if h is not None:
            h_in = g.mask(h, rec_mask) if use_rec_mask else h
            z = g.add(z, g.matmul(h_in, U))
        gates = g.sigmoid(g.col_slice(z, 0, 3 * hidden))
        cand = g.tanh(g.col_slice(z, 3 * hidden, 4 * hidden))
        i = g.col_slice(gates, 0, hidden)
        o = g.col_slice(gates, 2 * hidden, 3 * hidden)
        ic = g.hadamard(i, cand)
        if c is None:
            c = ic
        else:
            f = g.col_slice(gates, hidden, 2 * hidden)
            c = g.add(g.hadamard(f, c), ic)
        h = g.hadamard(o, g.tanh(c))
        states[t] = h
    return states


def bilstm_forward(g: Graph, inputs: Node, layers: Sequence[dict[str, Node]],
                   masks: Sequence[LayerMasks] | None = None) -> Node:
    """Stacked BiLSTM; returns an ``L x 2H`` node for the top layer.

    ``layers[l]`` maps ``"fw.W"``, ``"fw.U"``, ``"fw.b"`` (and ``bw.*``) to
    parameter nodes. Initial hidden and cell states are zero.
    """
    length = inputs.value.shape[0] if inputs.value is not None else None
    if not length:
        raise ValueError("bilstm_forward needs at least one timestep")
    x = inputs
    for li, p in enumerate(layers):
        lm = masks[li] if masks is not None else None
        halves = []
        for direction in ("fw", "bw"):
            states = _lstm_direction(
                g, x, length, p[f"{direction}.W"], p[f"{direction}.U"], p[f"{direction}.b"],
                lm.input[direction] if lm else None,
                lm.recurrent[direction] if lm else None,
                reverse=direction == "bw",
            )
            halves.append(g.concat_rows(states) if length > 1 else states[0])
        x = g.concat_cols(halves)
    return x


# CRF ------------------------------------------------------------------------


def _one_hot_rows(tags: Sequence[int], k: int) -> np.ndarray:
    m = np.zeros((len(tags), k))
    m[np.arange(len(tags)), tags] = 1.0
    return m


def crf_log_likelihood(g: Graph, emissions: Node, transitions: Node, start: Node,
                       end: Node, gold: Sequence[int]) -> Node:
    """Negative log-likelihood of ``gold`` under a linear-chain CRF (scalar node)."""
    k = transitions.value.shape[0]
    length = len(gold)
    if length == 0:
        raise ValueError("empty tag sequence")
    if emissions.value is not None and emissions.value.shape[0] != length:
        raise ValueError(f"{length} gold tags for {emissions.value.shape[0]} emission rows")
    if min(gold) < 0 or max(gold) >= k:
        raise IndexError(f"gold tag index outside [0, {k})")

    score = g.sum(g.mask(emissions, _one_hot_rows(gold, k)))
    score = g.add(score, g.sum(g.mask(start, _one_hot_rows(gold[:1], k))))
    score = g.add(score, g.sum(g.mask(end, _one_hot_rows(gold[-1:], k))))
    if length > 1:
        counts = np.zeros((k, k))
        np.add.at(counts, (np.asarray(gold[:-1]), np.asarray(gold[1:])), 1.0)
        score = g.add(score, g.sum(g.mask(transitions, counts)))

    alpha = g.add(start, g.row_select(emissions, 0))
    if length > 1:
        # row j of (trans^T + alpha) holds alpha[i] + trans[i, j] over i
        trans_t = g.transpose(transitions)
        for t in range(1, length):
            nxt = g.transpose(g.logsumexp_rows(g.add(trans_t, alpha)))
            alpha = g.add(nxt, g.row_select(emissions, t))
    log_z = g.logsumexp_rows(g.add(alpha, end))
    return g.add(log_z, g.scale(score, -1.0))


def path_score(emissions: np.ndarray, head: CRFParams, path: Sequence[int]) -> float:
    s = head.start[0, path[0]] + head.end[0, path[-1]]
    s += sum(emissions[t, y] for t, y in enumerate(path))
    s += sum(head.transitions[a, b] for a, b in zip(path[:-1], path[1:]))
    return float(s)


def crf_viterbi(emissions: np.ndarray, head: CRFParams) -> list[int]:
    """Highest-scoring tag path; ties go to the lowest tag index."""
    emissions = np.asarray(emissions, dtype=np.float64)
    length, k = emissions.shape
    trans = head.transitions
    score = head.start[0] + emissions[0]
    back = np.zeros((length, k), dtype=np.intp)
    cols = np.arange(k)
    for t in range(1, length):
        cand = score[:, None] + trans
        best = cand.argmax(axis=0)
        back[t] = best
        score = cand[best, cols] + emissions[t]
    score = score + head.end[0]
    path = [int(score.argmax())]
    for t in range(length - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1]


# the multi-task model -------------------------------------------------------


def _glorot(rng, rows: int, cols: int) -> np.ndarray:
    r = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-r, r, size=(rows, cols))


class TaskModel:
    """Shared BiLSTM trunk plus a projection + CRF head per task.

    Parameters live in ``self.params`` under dotted names:
    ``lstm{l}.{fw|bw}.{W|U|b}`` for the trunk and
    ``head.{task}.{W|b|trans|start|end}`` for each head.
    """

    def __init__(self, config: ModelConfig, input_dim: int, tag_counts: dict[str, int],
                 init: bool = True):
        self.config = config
        self.input_dim = int(input_dim)
        self.tag_counts = dict(tag_counts)
        self.params: dict[str, np.ndarray] = {}
        if init:
            self._init_params(np.random.default_rng(config.seed))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims, d_in = [], self.input_dim
        for h in self.config.layer_sizes:
            dims.append((d_in, h))
            d_in = 2 * h
        return dims

    @property
    def tasks(self) -> list[str]:
        return list(self.tag_counts)

    def _init_params(self, rng):
        for li, (d_in, h) in enumerate(self.layer_dims):
            for direction in ("fw", "bw"):
                pre = f"lstm{li}.{direction}"
                self.params[f"{pre}.W"] = _glorot(rng, d_in, 4 * h)
                self.params[f"{pre}.U"] = _glorot(rng, h, 4 * h)
                b = np.zeros((1, 4 * h))
                b[0, h : 2 * h] = 1.0  # forget gate
                self.params[f"{pre}.b"] = b
        top = 2 * self.config.layer_sizes[-1]
        for task, k in self.tag_counts.items():
            pre = f"head.{task}"
            self.params[f"{pre}.W"] = _glorot(rng, top, k)
            self.params[f"{pre}.b"] = np.zeros((1, k))
            self.params[f"{pre}.trans"] = np.zeros((k, k))
            self.params[f"{pre}.start"] = np.zeros((1, k))
            self.params[f"{pre}.end"] = np.zeros((1, k))

    def trunk_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("lstm")]

    def head_names(self, task: str) -> list[str]:
        if task not in self.tag_counts:
            raise KeyError(f"unknown task {task!r}")
        pre = f"head.{task}."
        return [n for n in self.params if n.startswith(pre)]

    def crf_head(self, task: str) -> CRFParams:
        pre = f"head.{task}"
        return CRFParams(self.params[f"{pre}.trans"], self.params[f"{pre}.start"],
                         self.params[f"{pre}.end"])

    def make_masks(self, rng, train: bool = True) -> list[LayerMasks]:
        return make_variational_masks(self.layer_dims, self.config.input_dropout,
                                      self.config.recurrent_dropout, rng, train)

    def emission_graph(self, x: np.ndarray, task: str, masks=None,
                       graph: Graph | None = None, nodes: dict[str, Node] | None = None):
        """Build ``(graph, emissions_node, param_nodes)`` for one sentence.

        Passing ``graph`` and ``nodes`` appends to an existing tape and reuses
        its parameter leaves, so several sentences can share one loss.
        """
        g = Graph() if graph is None else graph
        if nodes is None:
            nodes = {n: g.parameter(self.params[n], name=n)
                     for n in self.trunk_names() + self.head_names(task)}
        layers = [
            {f"{d}.{p}": nodes[f"lstm{li}.{d}.{p}"] for d in ("fw", "bw") for p in "WUb"}
            for li in range(len(self.config.layer_sizes))
        ]
        hidden = bilstm_forward(g, g.input(x), layers, masks)
        pre = f"head.{task}"
        em = g.add(g.matmul(hidden, nodes[f"{pre}.W"]), nodes[f"{pre}.b"])
        return g, em, nodes

    def loss_graph(self, x: np.ndarray, gold: Sequence[int], task: str, masks=None,
                   graph: Graph | None = None, nodes: dict[str, Node] | None = None):
        """``(graph, nll_node, param_nodes)`` for one training sentence."""
        g, em, nodes = self.emission_graph(x, task, masks, graph, nodes)
        pre = f"head.{task}"
        nll = crf_log_likelihood(g, em, nodes[f"{pre}.trans"], nodes[f"{pre}.start"],
                                 nodes[f"{pre}.end"], list(gold))
        return g, nll, nodes

    def emissions(self, x: np.ndarray, task: str) -> np.ndarray:
        g, em, _ = self.emission_graph(x, task, None)
        return evaluate(g, em)

    def predict(self, x: np.ndarray, task: str) -> list[int]:
        return crf_viterbi(self.emissions(x, task), self.crf_head(task))

    def copy(self) -> "TaskModel":
        other = TaskModel(self.config, self.input_dim, self.tag_counts, init=False)
        other.params = {n: p.copy() for n, p in self.params.items()}
        return other


# checkpoints ----------------------------------------------------------------


def save_checkpoint(model: TaskModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Atomically write every named parameter plus config to an ``.npz`` file."""
    meta = {
        "format": "argmtl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "input_dim": model.input_dim,
        "tag_counts": model.tag_counts,
        "names": list(model.params),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    arrays = {f"p{i}": arr for i, arr in enumerate(model.params.values())}
    np.savez(buf, __meta__=np.array(json.dumps(meta)), **arrays)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[TaskModel, dict]:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != "argmtl-checkpoint":
            raise ValueError(f"{path} is not a checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} is newer than supported")
        model = TaskModel(ModelConfig.from_dict(meta["config"]), meta["input_dim"],
                          meta["tag_counts"], init=False)
        model.params = {n: npz[f"p{i}"] for i, n in enumerate(meta["names"])}
    return model, meta.get("extra", {})
