"""Measurement instruments: representation cosines, dead-parameter counts, cosine significance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .rng import STREAM_MONTE_CARLO, make_rng

__all__ = [
    "DEAD_THRESHOLD",
    "CosineStats",
    "DeadParamReport",
    "dead_parameters",
    "random_cosine_study",
    "representation_cosines",
    "significance_threshold",
]

DEAD_THRESHOLD = 1e-12


def significance_threshold(n: int) -> float:
    """Four-sigma level for the cosine of two random n-dimensional vectors: 4/sqrt(n)."""
    if n < 1:
        raise ValueError("dimension must be >= 1")
    return 4.0 / math.sqrt(n)


@dataclass(frozen=True)
class CosineStats:
    layer: int
    mean: float
    max: float
    count: int
    skipped: int
    dimension: int
    threshold: float
    above_threshold: int = 0

    @property
    def empty(self) -> bool:
        return self.count == 0


def representation_cosines(activations, layer: Optional[int] = None) -> CosineStats:
    """Absolute cosine over all distinct pairs of a layer's component outputs.

    `activations` is a LayerActivation or an array (batch, components, *spatial);
    each component is flattened over batch and spatial axes. Components with zero
    norm (dead across the batch) are skipped and counted in `skipped`. With fewer
    than two usable components the result is empty: count 0 and NaN statistics.
    """
    values = getattr(activations, "values", activations)
    if layer is None:
        layer = getattr(activations, "layer", -1)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"activations need shape (batch, components, ...), got {x.shape}")
    comps = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1)
    dim = comps.shape[1]
    norms = np.linalg.norm(comps, axis=1)
    live = norms > 0
    skipped = int((~live).sum())
    threshold = significance_threshold(dim) if dim else math.inf
    if live.sum() < 2:
        return CosineStats(layer, math.nan, math.nan, 0, skipped, dim, threshold)
    unit = comps[live] / norms[live, None]
    cos = np.abs(np.clip(unit @ unit.T, -1.0, 1.0))
    iu = np.triu_indices(cos.shape[0], k=1)
    pairs = cos[iu]
    return CosineStats(
        layer=layer,
        mean=float(pairs.mean()),
        max=float(pairs.max()),
        count=int(pairs.size),
        skipped=skipped,
        dimension=dim,
        threshold=threshold,
        above_threshold=int((pairs > threshold).sum()),
    )


@dataclass
class DeadParamReport:
    per_param: dict[str, int] = field(default_factory=dict)
    sizes: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_param.values())

    def per_layer(self) -> dict[str, int]:
        """Totals grouped by layer name (the parameter name up to the last dot)."""
        out: dict[str, int] = {}
        for name, count in self.per_param.items():
            key = name.rsplit(".", 1)[0]
            out[key] = out.get(key, 0) + count
        return out


def dead_parameters(grads, threshold: float = DEAD_THRESHOLD) -> DeadParamReport:
    """Count entries with |grad| <= threshold.

    `grads` may be a mapping name -> array, a sequence of ParamTensor, or a bare array.
    """
    if isinstance(grads, np.ndarray) or not hasattr(grads, "__iter__"):
        items: Iterable = [("param", grads)]
    elif hasattr(grads, "items"):
        items = grads.items()
    else:
        items = [(p.name, p.grad) for p in grads]
    report = DeadParamReport()
    for name, g in items:
        arr = np.asarray(g)
        report.per_param[name] = int(np.count_nonzero(np.abs(arr) <= threshold))
        report.sizes[name] = int(arr.size)
    return report


def random_cosine_study(n: int, pairs: int = 100_000, seed: int = 0, chunk: int = 2048):
    """Monte-Carlo cosine between independent standard-normal vector pairs of dimension n.

    Returns (sample std of the cosine, fraction of |cosine| above 4/sqrt(n)).
    """
    rng = make_rng(seed, STREAM_MONTE_CARLO, n)
    thr = significance_threshold(n)
    total = 0.0
    total_sq = 0.0
    exceed = 0
    done = 0
    while done < pairs:
        m = min(chunk, pairs - done)
        x = rng.standard_normal((m, n), dtype=np.float32).astype(np.float64)
        y = rng.standard_normal((m, n), dtype=np.float32).astype(np.float64)
        cos = np.einsum("ij,ij->i", x, y) / (np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1))
        total += cos.sum()
        total_sq += (cos * cos).sum()
        exceed += int((np.abs(cos) > thr).sum())
        done += m
    mean = total / pairs
    std = math.sqrt(max(total_sq / pairs - mean * mean, 0.0) * pairs / (pairs - 1))
    return std, exceed / pairs
