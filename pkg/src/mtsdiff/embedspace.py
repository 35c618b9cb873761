"""Continuous embedding space for categorical features."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_FLOOR = 1e-8
TIE_TOL = 1e-12


class DegenerateEmbeddingError(ValueError):
    pass


class EmbeddingTable:
    """One learnable ``C_j x d`` table per categorical feature.

    Lookups return ``sqrt(d) * e / ||e||`` so every embedding sits on the
    sphere of radius ``sqrt(d)``.
    """

    def __init__(self, cardinalities: Sequence[int], dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if dim < 1:
            raise ValueError("embedding dim must be positive")
        for c in cardinalities:
            if c < 2:
                raise ValueError(f"every categorical feature needs >= 2 categories, got {c}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim = int(dim)
        self.cardinalities = [int(c) for c in cardinalities]
        self.tables: list[Tensor] = []
        for j, c in enumerate(self.cardinalities):
            raw = rng.standard_normal((c, dim)) / np.sqrt(dim)
            # re-draw rows that are (numerically) zero
            while True:
                bad = np.linalg.norm(raw, axis=1) < 1e-6
                if not bad.any():
                    break
                raw[bad] = rng.standard_normal((int(bad.sum()), dim)) / np.sqrt(dim)
            self.tables.append(Tensor(raw.astype(dtype), requires_grad=True, name=f"emb_{j}"))

    @property
    def n_features(self) -> int:
        return len(self.tables)

    def parameters(self) -> list[Tensor]:
        return list(self.tables)

    def _check(self, j: int, k: int | None = None) -> None:
        if not 0 <= j < self.n_features:
            raise IndexError(f"categorical feature {j} out of range")
        if k is not None and not 0 <= k < self.cardinalities[j]:
            raise IndexError(f"category {k} out of range for feature {j} (C={self.cardinalities[j]})")

    def normalized(self, j: int) -> Tensor:
        """All normalised embeddings of feature ``j`` (differentiable), ``[C_j, d]``."""
        return ad.l2_normalize(self.tables[j], scale=np.sqrt(self.dim), floor=NORM_FLOOR)

    def normalized_np(self, j: int) -> np.ndarray:
        raw = self.tables[j].value.astype(np.float64)
        norm = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), NORM_FLOOR)
        return raw / norm * np.sqrt(self.dim)

    def lookup(self, indices: np.ndarray) -> Tensor:
        """Embed an index array ``[..., M_cat]`` into ``[..., M_cat * d]``."""
        indices = np.asarray(indices)
        parts = [ad.gather_rows(self.normalized(j), indices[..., j]) for j in range(self.n_features)]
        return ad.concat(parts, axis=-1)


def embed(table: EmbeddingTable, j: int, k: int) -> np.ndarray:
    table._check(j, k)
    raw = table.tables[j].value[k]
    if np.linalg.norm(raw) < NORM_FLOOR:
        raise DegenerateEmbeddingError(f"raw embedding ({j}, {k}) is zero")
    return table.normalized_np(j)[k]


def score_interpolate(table: EmbeddingTable, j: int, probabilities: np.ndarray) -> np.ndarray:
    """Posterior-mean embedding ``sum_k p_k * embed(j, k)``.

    ``probabilities`` may carry leading batch axes; the last axis has length ``C_j``.
    """
    table._check(j)
    p = np.asarray(probabilities, dtype=np.float64)
    if p.shape[-1] != table.cardinalities[j]:
        raise ValueError(f"expected {table.cardinalities[j]} probabilities, got {p.shape[-1]}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must lie on the simplex")
    return p @ table.normalized_np(j)


def nearest_decode(table: EmbeddingTable, j: int, x: np.ndarray) -> np.ndarray | int:
    """Index of the nearest normalised embedding; ties go to the lowest index."""
    table._check(j)
    x = np.asarray(x, dtype=np.float64)
    e = table.normalized_np(j)
    d2 = ((x[..., None, :] - e) ** 2).sum(axis=-1)
    # distances equal up to rounding count as ties
    best = d2.min(axis=-1, keepdims=True)
    near = d2 <= best + TIE_TOL * np.maximum(best, 1.0)
    out = np.argmax(near, axis=-1)
    return int(out) if out.ndim == 0 else out
