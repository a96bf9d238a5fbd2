"""Magnitude-pruning competitors: gradual (cubic ramp) and one-shot hard pruning.

Masks are dicts ``layer name -> {0,1} float array``.  Magnitude ties are broken
by lowest flat index first (stable sort), so every mask is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

Mask = dict[str, np.ndarray]
SCHEMES = ("class_blind", "class_uniform", "class_distribution")


@dataclass(frozen=True)
class GradualSchedule:
    s_final: float
    t_start: int
    t_end: int
    freq: int = 1

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("t_start must be < t_end")
        if self.freq < 1:
            raise ValueError("freq must be >= 1")

    def is_update_step(self, t: int) -> bool:
        return self.t_start <= t <= self.t_end and (t - self.t_start) % self.freq == 0 or t == self.t_end


def gradual_target(t: int, sched: GradualSchedule) -> float:
    if t < sched.t_start:
        return 0.0
    if t >= sched.t_end:
        return sched.s_final
    frac = (t - sched.t_start) / (sched.t_end - sched.t_start)
    return sched.s_final * (1.0 - (1.0 - frac) ** 3)


def full_mask(weights: Mapping[str, np.ndarray]) -> Mask:
    return {n: np.ones_like(w, dtype=np.float64) for n, w in weights.items()}


def _prune_smallest(scores: np.ndarray, alive: np.ndarray, k: int) -> np.ndarray:
    """Mask with the k lowest-scoring entries (among all) set to 0.

    Already-dead entries sort first so they stay pruned.
    """
    flat = np.where(alive.ravel() > 0, scores.ravel(), -np.inf)
    order = np.argsort(flat, kind="stable")
    out = np.ones(flat.size)
    out[order[:k]] = 0.0
    return out.reshape(scores.shape)


def _apportion(sizes: list[int], s: float) -> list[int]:
    """Per-layer prune counts near s*n_l that add up to floor(s * sum n_l)."""
    exact = [s * n for n in sizes]
    counts = [int(np.floor(e)) for e in exact]
    extra = int(np.floor(s * sum(sizes) + 1e-9)) - sum(counts)
    by_remainder = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_remainder[: max(extra, 0)]:
        counts[i] = min(counts[i] + 1, sizes[i])
    return counts


def gradual_update(weights: Mapping[str, np.ndarray], mask: Mask, t: int, sched: GradualSchedule) -> Mask:
    """Prune every layer to ``gradual_target(t)``; pruned entries never regrow."""
    target = gradual_target(t, sched)
    names = list(weights)
    counts = _apportion([weights[n].size for n in names], target)
    out = {}
    for name, k in zip(names, counts):
        already = int(mask[name].size - np.count_nonzero(mask[name]))
        out[name] = _prune_smallest(np.abs(weights[name]), mask[name], max(k, already))
    return out


def hard_prune(weights: Mapping[str, np.ndarray], s_final: float, scheme: str) -> Mask:
    """One-shot magnitude pruning of a trained model.

    class_blind: one global threshold on |w|.
    class_uniform: every layer pruned to s_final.
    class_distribution: per-layer threshold proportional to the layer's weight
    std; the shared multiplier is the one giving overall sparsity s_final, which
    is the same as a global threshold on |w| / std(layer).
    """
    if not 0.0 <= s_final < 1.0:
        raise ValueError(f"s_final must be in [0, 1), got {s_final}")
    names = list(weights)
    sizes = [weights[n].size for n in names]
    k_total = int(np.floor(s_final * sum(sizes) + 1e-9))
    if scheme == "class_uniform":
        counts = _apportion(sizes, s_final)
        return {n: _prune_smallest(np.abs(weights[n]), np.ones(weights[n].shape), k)
                for n, k in zip(names, counts)}
    if scheme == "class_blind":
        scores = [np.abs(weights[n]).ravel() for n in names]
    elif scheme == "class_distribution":
        scores = [np.abs(weights[n]).ravel() / (np.std(weights[n]) or 1.0) for n in names]
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    flat = _prune_smallest(np.concatenate(scores), np.ones(sum(sizes)), k_total)
    bounds = np.cumsum(sizes)[:-1]
    return {n: part.reshape(weights[n].shape) for n, part in zip(names, np.split(flat, bounds))}


def mask_sparsity(mask: Mapping[str, np.ndarray]) -> float:
    total = sum(m.size for m in mask.values())
    return 1.0 - sum(int(np.count_nonzero(m)) for m in mask.values()) / total


def apply_mask(weights: Mapping[str, np.ndarray], mask: Mapping[str, np.ndarray]) -> None:
    """Zero masked entries in place."""
    for n, m in mask.items():
        weights[n] *= m
