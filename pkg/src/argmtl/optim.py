"""Nadam updates and random hyperparameter sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .model import LAYOUTS, ModelConfig


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class NadamState:
    """Moment accumulators for one set of named parameters.

    ``m_schedule`` is the running product of momentum coefficients
    ``mu_1 * ... * mu_t``, with ``mu_t = beta1 * (1 - 0.5 * 0.96 ** (t * schedule_decay))``.
    """

    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.004
    step: int = 0
    m_schedule: float = 1.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def momentum(self, t: int) -> float:
        return self.beta1 * (1.0 - 0.5 * 0.96 ** (t * self.schedule_decay))


def nadam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: NadamState) -> None:
    """Apply one Nadam update in place to every parameter named in ``grads``.

    Parameters absent from ``grads`` are untouched, so a task head that took
    no part in the step keeps its exact values.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name}")

    state.step += 1
    t = state.step
    mu_t = state.momentum(t)
    mu_next = state.momentum(t + 1)
    state.m_schedule *= mu_t
    m_schedule_next = state.m_schedule * mu_next
    b1, b2 = state.beta1, state.beta2

    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        g_hat = g / (1.0 - state.m_schedule)
        m_hat = m / (1.0 - m_schedule_next)
        v_hat = v / (1.0 - b2**t)
        m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat
        params[name] -= state.lr * m_bar / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if not np.isfinite(norm):
        raise NonFiniteGradientError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# hyperparameter search space ------------------------------------------------


@dataclass
class SearchSpace:
    layouts: tuple[tuple[int, ...], ...] = LAYOUTS
    dropout_range: tuple[float, float] = (0.2, 0.5)
    embedding_ids: tuple[str, ...] = ("random",)
    runs_per_embedding: int = 50

    def __post_init__(self):
        self.layouts = tuple(tuple(int(h) for h in lay) for lay in self.layouts)
        self.embedding_ids = tuple(self.embedding_ids)
        lo, hi = self.dropout_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ValueError(f"bad dropout range {self.dropout_range}")

    def embedding_for_run(self, run_index: int) -> str:
        """Blocks of ``runs_per_embedding`` runs per embedding family, cycling."""
        block = run_index // max(1, self.runs_per_embedding)
        return self.embedding_ids[block % len(self.embedding_ids)]

    def to_dict(self) -> dict:
        return {
            "layouts": [list(x) for x in self.layouts],
            "dropout_range": list(self.dropout_range),
            "embedding_ids": list(self.embedding_ids),
            "runs_per_embedding": self.runs_per_embedding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        d = dict(d)
        if "dropout_range" in d:
            d["dropout_range"] = tuple(d["dropout_range"])
        return cls(**d)


def sample_config(space: SearchSpace, rng: np.random.Generator, run_index: int = 0,
                  seed: int | None = None) -> ModelConfig:
    layout = space.layouts[int(rng.integers(len(space.layouts)))]
    lo, hi = space.dropout_range
    input_rate = float(rng.uniform(lo, hi))
    recurrent_rate = float(rng.uniform(lo, hi))
    if seed is None:
        seed = int(rng.integers(2**31 - 1))
    return ModelConfig(
        layer_sizes=layout,
        input_dropout=input_rate,
        recurrent_dropout=recurrent_rate,
        embedding_id=space.embedding_for_run(run_index),
        seed=seed,
    )


def sample_configs(space: SearchSpace, n: int, seed: int) -> Iterable[ModelConfig]:
    rng = np.random.default_rng(seed)
    return [sample_config(space, rng, i) for i in range(n)]
