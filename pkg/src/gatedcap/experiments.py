"""Reusable experiment recipes shared by the acceptance suite and scripts/.

Every recipe is memoized in-process, so suites that compare several methods
on the same seeds train each model once per interpreter.
"""

from __future__ import annotations

import copy
import statistics
import time
from dataclasses import dataclass, field
from functools import lru_cache

from . import baselines as bl
from . import data as dt
from . import evaluation as ev
from . import gates as gt
from . import training as tr
from .decoder import LAYER_NAMES, DecoderModel, weight_shapes
from .sparse import SparseModel

SEEDS = (0, 1, 2)
DATA_SEED = 0


@dataclass
class Score:
    """Test-split metrics for one trained model."""

    sparsity: float
    bleu4: float
    bleu: dict
    uniqueness_pct: float
    avg_len: float
    token_acc: float
    layers: dict = field(default_factory=dict)

    def summary(self) -> str:
        return (f"sparsity {self.sparsity:.4f}  B-4 {self.bleu4:.4f}  uniq {self.uniqueness_pct:.1f}%  "
                f"len {self.avg_len:.2f}  acc {self.token_acc:.4f}")


@dataclass
class Run:
    name: str
    config: tr.TrainConfig
    scores: dict[str, Score]
    seconds: float
    state: tr.TrainState = field(repr=False, default=None)


@lru_cache(maxsize=None)
def prepared(seed: int = DATA_SEED) -> dt.Prepared:
    return dt.preprocess(dt.generate(seed))


def layer_sparsity(model: DecoderModel) -> dict[str, float]:
    if model.gates is not None:
        return {n: gt.layer_sparsity(model.gates[n]) for n in LAYER_NAMES}
    if model.masks is not None:
        return {n: float(1.0 - model.masks[n].mean()) for n in LAYER_NAMES}
    return {n: 0.0 for n in LAYER_NAMES}


def score(model: DecoderModel, prep: dt.Prepared, split: str = "test") -> Score:
    """Beam-3 decode through the exported sparse model plus teacher-forced accuracy."""
    res = ev.evaluate(SparseModel.from_model(model), prep, split=split)
    return Score(tr.current_sparsity(model), res.bleu["bleu4"], res.bleu, res.uniqueness_pct, res.avg_len,
                 ev.token_accuracy(model, prep, split), layer_sparsity(model))


def _snapshot(state: tr.TrainState) -> tr.TrainState:
    return copy.deepcopy(state)


@lru_cache(maxsize=None)
def gated(s_target: float, seed: int, lambda_s: float | None = None, gate_init: float = gt.DEFAULT_GATE_INIT,
          stage2: bool = True, cell: str = "lstm") -> Run:
    """End-to-end gated pruning; scores at stage-1 exit and after fine-tuning."""
    prep = prepared()
    cfg = tr.TrainConfig(method="gated", s_target=s_target, lambda_s=lambda_s, gate_init=gate_init,
                         seed=seed, cell=cell)
    t0 = time.perf_counter()
    state = tr.train_stage1(prep, cfg)
    scores = {"stage1": score(state.model, prep)}
    if stage2:
        tr.train_stage2(state, prep)
        scores["stage2"] = score(state.model, prep)
    return Run(f"gated s={s_target} seed={seed}", cfg, scores, time.perf_counter() - t0, _snapshot(state))


@lru_cache(maxsize=None)
def dense(seed: int, width: float = 1.0, cell: str = "lstm") -> Run:
    """Dense baseline (both stages) at a width multiple of the default model."""
    prep = prepared()
    base = tr.TrainConfig()
    cfg = tr.TrainConfig(method="dense", seed=seed, cell=cell, r=max(1, round(base.r * width)),
                         q=max(1, round(base.q * width)), a=max(1, round(base.a * width)))
    t0 = time.perf_counter()
    state = tr.train_stage1(prep, cfg)
    scores = {"stage1": score(state.model, prep)}
    tr.train_stage2(state, prep)
    scores["stage2"] = score(state.model, prep)
    return Run(f"dense w={width} seed={seed}", cfg, scores, time.perf_counter() - t0, _snapshot(state))


@lru_cache(maxsize=None)
def gradual(s_target: float, seed: int, cell: str = "lstm") -> Run:
    """In-loop gradual magnitude pruning, then encoder fine-tuning with the mask fixed."""
    prep = prepared()
    cfg = tr.TrainConfig(method="gradual", s_target=s_target, seed=seed, cell=cell)
    t0 = time.perf_counter()
    state = tr.train_stage1(prep, cfg)
    scores = {"stage1": score(state.model, prep)}
    tr.train_stage2(state, prep)
    scores["stage2"] = score(state.model, prep)
    return Run(f"gradual s={s_target} seed={seed}", cfg, scores, time.perf_counter() - t0, _snapshot(state))


@lru_cache(maxsize=None)
def hard(s_target: float, seed: int, scheme: str, retrain_epochs: int = 10, cell: str = "lstm") -> Run:
    """One-shot magnitude pruning of the fine-tuned dense model, then masked retraining."""
    prep = prepared()
    state = _snapshot(dense(seed, cell=cell).state)
    t0 = time.perf_counter()
    mask = bl.hard_prune({n: state.model.weights[n].data for n in LAYER_NAMES}, s_target, scheme)
    state.config.method, state.config.s_target = "masked", s_target
    tr.retrain(state, prep, mask, retrain_epochs)
    scores = {"stage2": score(state.model, prep)}
    return Run(f"hard {scheme} s={s_target} seed={seed}", state.config, scores, time.perf_counter() - t0,
               state)


def weight_count(width: float = 1.0, cell: str = "lstm") -> int:
    base = tr.TrainConfig()
    dims = base.dims(len(prepared().vocab)).scaled(width)
    return sum(a * b for a, b in weight_shapes(dims, cell).values())


def matched_sparsity(width: float = 0.25, cell: str = "lstm") -> float:
    """Sparsity at which the full-size model keeps as many weights as a dense model of ``width``."""
    return 1.0 - weight_count(width, cell) / weight_count(1.0, cell)


def median(xs) -> float:
    return statistics.median(xs)


def mean(xs) -> float:
    return statistics.fmean(xs)
