"""Label transition matrices and the weak-label correction layer.

Each noisy head (category and every attribute type) owns a column-stochastic
matrix ``Q`` with ``Q[j, i] = p(weak label j | true label i)``. It is stored
as unconstrained logits and realized by a column softmax, so it stays on the
simplex under any gradient step. The occasion head has no matrix.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InvalidLabel, InvalidShape
from .model import Labels, collate, forward_batch, weighted_concept_loss
from .numcore import Tensor

LOG_FLOOR = 1e-8
DEFAULT_BETA = 0.5


def estimate_transition_init(pairs, n: int, eps: float = 1.0) -> np.ndarray:
    """Count-based estimate from (machine label j, human label i) pairs.

    ``q[j, i] = (count(j, i) + eps) / (sum_j count(j, i) + n * eps)``; a
    column with no mass at all becomes uniform.
    """
    if n < 1:
        raise ConfigError(f"need at least one class, got {n}")
    if eps < 0:
        raise ConfigError("smoothing must be non-negative")
    counts = np.zeros((n, n), dtype=np.int64)
    if len(pairs):
        arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if arr.min() < 0 or arr.max() >= n:
            raise InvalidLabel(f"label outside [0, {n})")
        np.add.at(counts, (arr[:, 0], arr[:, 1]), 1)
    num = counts + eps
    den = counts.sum(axis=0) + n * eps
    q = np.empty((n, n))
    empty = den == 0
    q[:, ~empty] = num[:, ~empty] / den[~empty]
    q[:, empty] = 1.0 / n
    return q


def realize(logits) -> Tensor:
    """Column softmax of the logits (differentiable when they are tracked)."""
    return nc.softmax(nc.as_tensor(logits), axis=0)


def logits_from_q(q) -> np.ndarray:
    return np.log(np.asarray(q, dtype=np.float64) + LOG_FLOOR)


def correct_prediction(clean_probs, q) -> Tensor:
    """``Q p`` for each probability row of ``clean_probs`` (shape (..., N))."""
    p, q = nc.as_tensor(clean_probs), nc.as_tensor(q)
    if q.values.ndim != 2 or q.shape[0] != q.shape[1] or p.shape[-1] != q.shape[1]:
        raise InvalidShape(f"cannot correct probabilities {p.shape} with Q {q.shape}")
    return nc.matmul(p, nc.transpose(q))


class TransitionMatrix:
    """Trainable transition matrix for one head."""

    def __init__(self, logits, name: str = "Q"):
        self.logits = Tensor(np.array(logits, dtype=np.float64), requires_grad=True,
                             name=f"noise.{name}")
        self.name = name

    @classmethod
    def from_q(cls, q, name: str = "Q") -> "TransitionMatrix":
        return cls(logits_from_q(q), name)

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    def realize(self) -> Tensor:
        return realize(self.logits)

    @property
    def q(self) -> np.ndarray:
        return realize(Tensor(self.logits.values)).values


class NoiseModelSet:
    """One :class:`TransitionMatrix` per noisy head, keyed by head name."""

    def __init__(self, matrices: dict):
        self.matrices = dict(matrices)

    @classmethod
    def identity(cls, space) -> "NoiseModelSet":
        sizes = space.head_sizes()
        return cls({h: TransitionMatrix.from_q(np.eye(sizes[h]), h) for h in noisy_heads(space)})

    @classmethod
    def from_pairs(cls, pairs: dict, space, eps: float = 1.0) -> "NoiseModelSet":
        sizes = space.head_sizes()
        return cls({h: TransitionMatrix.from_q(estimate_transition_init(pairs.get(h, []), sizes[h], eps), h)
                    for h in noisy_heads(space)})

    @classmethod
    def from_logits(cls, logits: dict) -> "NoiseModelSet":
        return cls({h: TransitionMatrix(v, h) for h, v in logits.items()})

    def __getitem__(self, head) -> TransitionMatrix:
        return self.matrices[head]

    def __iter__(self):
        return iter(self.matrices)

    def tensors(self) -> list:
        return [m.logits for m in self.matrices.values()]

    def realized(self) -> dict:
        return {h: m.realize() for h, m in self.matrices.items()}

    def logits(self) -> dict:
        return {h: m.logits.values.copy() for h, m in self.matrices.items()}

    def q(self) -> dict:
        return {h: m.q for h, m in self.matrices.items()}

    def export_csv(self, directory) -> list:
        """Write ``noise_<head>.csv`` (rows = weak label j, columns = true label i)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for h, q in self.q().items():
            p = directory / f"noise_{h.replace('/', '_')}.csv"
            write_matrix_csv(p, q)
            paths.append(p)
        return paths


def write_matrix_csv(path, q, row_labels=None, col_labels=None) -> None:
    q = np.asarray(q)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = col_labels if col_labels is not None else [f"true_{i}" for i in range(q.shape[1])]
        rows = row_labels if row_labels is not None else [f"weak_{j}" for j in range(q.shape[0])]
        w.writerow([""] + list(cols))
        for name, row in zip(rows, q):
            w.writerow([name] + [repr(float(v)) for v in row])


def noisy_heads(space) -> list:
    return ["category"] + [a.name for a in space.attribute_types]


def _realized(noise) -> dict:
    if noise is None:
        return None
    if isinstance(noise, NoiseModelSet):
        return noise.realized()
    return {h: (v.realize() if isinstance(v, TransitionMatrix) else nc.as_tensor(v))
            for h, v in noise.items()}


def fused_loss_parts(clean_batch, weak_batch, params, noise, beta: float = DEFAULT_BETA,
                     mode: str = "final", use_text: bool = True, correct: bool = True) -> tuple:
    """Return (L, L*, L') with ``L = L* + beta * L'``.

    ``L*`` averages the per-post concept loss over ``clean_batch``; ``L'``
    averages over ``weak_batch`` with category and attribute heads passed
    through ``Q`` first (skipped when ``correct`` is false).
    """
    if beta < 0:
        raise ConfigError("beta must be non-negative")
    clean_batch, weak_batch = list(clean_batch), list(weak_batch)
    records = clean_batch + weak_batch
    n_c, n_w = len(clean_batch), len(weak_batch)
    if not records:
        zero = Tensor(np.array(0.0))
        return zero, zero, zero
    batch = collate(records, params.cfg, params.space)
    out = forward_batch(params, batch, mode, use_text)
    is_weak = np.r_[np.zeros(n_c, dtype=bool), np.ones(n_w, dtype=bool)]
    w_clean = np.where(is_weak, 0.0, 1.0 / max(n_c, 1))
    w_weak = np.where(is_weak, 1.0 / max(n_w, 1), 0.0)
    q = _realized(noise) if (correct and n_w) else None
    l_clean = weighted_concept_loss(out, batch, w_clean)
    l_weak = weighted_concept_loss(out, batch, w_weak, q, is_weak if q is not None else None)
    return nc.add(l_clean, nc.scale(l_weak, beta)), l_clean, l_weak


def fused_loss(clean_batch, weak_batch, params, noise, beta: float = DEFAULT_BETA,
               mode: str = "final", use_text: bool = True) -> Tensor:
    """``L* + beta * L'`` over a clean and a weak list of posts."""
    return fused_loss_parts(clean_batch, weak_batch, params, noise, beta, mode, use_text)[0]


__all__ = [
    "DEFAULT_BETA", "Labels", "NoiseModelSet", "TransitionMatrix", "correct_prediction",
    "estimate_transition_init", "fused_loss", "fused_loss_parts", "logits_from_q", "noisy_heads",
    "realize", "write_matrix_csv",
]
