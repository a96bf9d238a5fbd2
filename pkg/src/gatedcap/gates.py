"""Learnable binary gates over weight matrices.

Each pruned weight matrix ``W`` is paired with a same-shape matrix of gate
logits ``G``.  The effective weight is ``W * sample(sigmoid(G))`` where the
sample is either a Bernoulli draw (training) or a threshold at 0.5 (maximum
likelihood).  Both samplers are differentiated with the straight-through
estimator: the sampling step passes gradients unchanged, the sigmoid keeps its
own derivative.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_GATE_INIT = 5.0


@dataclass
class GatedParameter:
    name: str
    W: Tensor
    G: Tensor
    frozen: bool = False

    def __post_init__(self):
        if self.G.shape != self.W.shape:
            raise ValueError(f"{self.name}: gate shape {self.G.shape} != weight shape {self.W.shape}")

    @classmethod
    def create(cls, name: str, W: Tensor, m: float = DEFAULT_GATE_INIT) -> "GatedParameter":
        return cls(name, W, Tensor(np.full(W.shape, float(m)), requires_grad=True, name=f"{name}/gate"))

    @property
    def size(self) -> int:
        return int(self.W.data.size)


@dataclass
class SparsityConfig:
    s_target: float
    lambda_s: float
    m: float = DEFAULT_GATE_INIT
    n_max: int = 1
    gate_lr: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.s_target < 1.0:
            raise ValueError(f"s_target must be in [0, 1), got {self.s_target}")
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be nonnegative")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


def ml_mask(g: np.ndarray) -> np.ndarray:
    """round(sigmoid(g)) with the tie g == 0 going to 0."""
    return (g > 0).astype(np.float64)


def sample_bernoulli(g_logits: Tensor, rng: np.random.Generator) -> Tensor:
    probs = ad.sigmoid(g_logits)
    draw = rng.random(g_logits.shape) < probs.data
    return ad.straight_through(probs, draw)


def sample_ml(g_logits: Tensor) -> Tensor:
    probs = ad.sigmoid(g_logits)
    return ad.straight_through(probs, ml_mask(g_logits.data))


def _gate_input(p: GatedParameter) -> Tensor:
    # frozen gates stay out of the graph so they never receive gradient
    return Tensor(p.G.data) if p.frozen else p.G


def effective_weight_train(p: GatedParameter, rng: np.random.Generator) -> Tensor:
    return ad.mul(p.W, sample_bernoulli(_gate_input(p), rng))


def effective_weight_ml(p: GatedParameter) -> Tensor:
    return ad.mul(p.W, sample_ml(_gate_input(p)))


def sparsity(phis: Sequence[GatedParameter]) -> float:
    """Fraction of gates whose ML sample is 0, over all gated layers."""
    if not phis:
        raise ValueError("sparsity of an empty gate list")
    total = sum(p.size for p in phis)
    nnz = sum(int(np.count_nonzero(p.G.data > 0)) for p in phis)
    return 1.0 - nnz / total


def layer_sparsity(p: GatedParameter) -> float:
    return 1.0 - np.count_nonzero(p.G.data > 0) / p.size


def cosine_anneal(n: int, n_max: int) -> float:
    """0.5 * (1 + cos(pi n / n_max)); steps past n_max clamp to 0."""
    if n >= n_max:
        return 0.0
    if n <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * n / n_max))


def sparsity_loss(phis: Sequence[GatedParameter], s_target: float, n: int, n_max: int) -> Tensor:
    alpha = cosine_anneal(n, n_max)
    if not phis:
        raise ValueError("sparsity_loss of an empty gate list")
    total = float(sum(p.size for p in phis))
    nnz = None
    for p in phis:
        count = ad.sum(sample_ml(_gate_input(p)))
        nnz = count if nnz is None else ad.add(nnz, count)
    current = ad.sub(1.0, ad.mul(nnz, 1.0 / total))
    return ad.mul(ad.abs(ad.sub(s_target, current)), 1.0 - alpha)


def lambda_heuristic(s_target: float) -> float:
    if s_target >= 1.0:
        raise ValueError("s_target must be < 1")
    # decimal arithmetic so 0.975 -> 20 exactly rather than 19.999...
    keep = 1 - Fraction(str(s_target))
    return float(max(Fraction(5), Fraction(1, 2) / keep))


def total_loss(caption_loss: Tensor, sparsity_loss: Tensor, lambda_s: float) -> Tensor:
    if lambda_s == 0:
        return caption_loss
    return ad.add(caption_loss, ad.mul(sparsity_loss, float(lambda_s)))


def export_final(p: GatedParameter) -> np.ndarray:
    """W * round(sigmoid(G)) as a plain array; gates can be dropped afterwards."""
    return p.W.data * ml_mask(p.G.data)
