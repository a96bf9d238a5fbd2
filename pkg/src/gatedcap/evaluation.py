"""Beam-search decoding and caption metrics (BLEU-1..4, uniqueness, length)."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import END, START, Prepared, pad_batch, training_pairs
from .decoder import DecoderModel, DecoderState, attention_memory, encode, init_state, step_logits


class Stepper(Protocol):
    """Decoder interface consumed by beam search.

    ``start`` encodes one image and returns an opaque batch-1 state; ``step``
    takes a state for k hypotheses plus their previous tokens and returns
    (k, V) log-probabilities and the advanced state; ``select`` reindexes a
    state along the hypothesis axis.
    """

    def start(self, features: np.ndarray): ...

    def step(self, state, tokens: np.ndarray) -> tuple[np.ndarray, object]: ...

    def select(self, state, idx: np.ndarray): ...


def _log_softmax(z: np.ndarray) -> np.ndarray:
    return ad.log_softmax(z)


class DenseStepper:
    """Masked-dense inference through the autodiff forward pass (no graph)."""

    def __init__(self, model: DecoderModel):
        self.model = model
        with ad.no_grad():
            self.layers = model.layers(stochastic=False)

    def start(self, features: np.ndarray):
        with ad.no_grad():
            f = encode(self.layers, np.asarray(features, dtype=np.float64)[None])
            memory = attention_memory(self.layers.attn, f)
            state = init_state(self.layers, f, self.model.cell)
        return state, memory

    def step(self, state, tokens):
        st, (keys, values) = state
        k = len(tokens)
        if keys.shape[0] != k:
            keys = Tensor(np.repeat(keys.data[:1], k, axis=0))
            values = Tensor(np.repeat(values.data[:1], k, axis=0))
        st = DecoderState(st.h, st.m, np.asarray(tokens, dtype=np.int64))
        with ad.no_grad():
            logits, new = step_logits(self.layers, st, (keys, values))
        return _log_softmax(logits.data), (new, (keys, values))

    def probs(self, state, tokens) -> tuple[np.ndarray, object]:
        logp, new = self.step(state, tokens)
        return np.exp(logp), new

    def select(self, state, idx):
        st, (keys, values) = state
        m = None if st.m is None else Tensor(st.m.data[idx])
        new = DecoderState(Tensor(st.h.data[idx]), m, st.prev_token[idx])
        return new, (Tensor(keys.data[idx]), Tensor(values.data[idx]))


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logp: float
    finished_at: int = -1


def beam_search(stepper: Stepper, features: np.ndarray, b: int = 3, max_len: int = 20) -> list[int]:
    """Highest cumulative log-prob caption, no length normalisation.

    Expansions are ranked by score, ties by token sequence.  Finished
    hypotheses (emitted END, or reached ``max_len`` words) are retired; the
    search stops once no live hypothesis can beat the best finished one.
    Returned tokens exclude START and END.
    """
    if b < 1 or max_len < 1:
        raise ValueError("beam width and max_len must be >= 1")
    state = stepper.start(features)
    live = [Hypothesis((), 0.0)]
    done: list[Hypothesis] = []
    for t in range(max_len + 1):
        prev = np.array([h.tokens[-1] if h.tokens else START for h in live], dtype=np.int64)
        logp, state = stepper.step(state, prev)
        cands = []
        for i, h in enumerate(live):
            row = logp[i]
            for tok in range(row.shape[0]):
                cands.append((h.logp + float(row[tok]), h.tokens + (tok,), i))
        cands.sort(key=lambda c: (-c[0], c[1]))
        keep, parents = [], []
        for score, toks, parent in cands[:b]:
            if toks[-1] == END:
                done.append(Hypothesis(toks[:-1], score, t))
            elif len(toks) >= max_len:
                done.append(Hypothesis(toks, score, t))
            else:
                keep.append(Hypothesis(toks, score))
                parents.append(parent)
        if not keep:
            break
        if done and max(d.logp for d in done) >= keep[0].logp:
            break
        live = keep
        state = stepper.select(state, np.asarray(parents))
    if not done:
        done = [Hypothesis(h.tokens, h.logp, max_len) for h in live]
    best = min(done, key=lambda h: (-h.logp, h.finished_at, h.tokens))
    return list(best.tokens)


def greedy_decode(stepper: Stepper, features: np.ndarray, max_len: int = 20) -> list[int]:
    state = stepper.start(features)
    out: list[int] = []
    prev = START
    for _ in range(max_len):
        logp, state = stepper.step(state, np.array([prev]))
        prev = int(np.argmax(logp[0]))
        if prev == END:
            break
        out.append(prev)
    return out


# -- metrics ---------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
         n_max: int = 4) -> dict[str, float]:
    """Corpus BLEU-1..n_max with clipped n-gram counts and a brevity penalty.

    The effective reference length for each candidate is the closest reference
    length (shorter wins ties).
    """
    if len(candidates) != len(references):
        raise ValueError("one reference set per candidate required")
    matches = [0] * n_max
    totals = [0] * n_max
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            counts = _ngrams(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    scores = {}
    if cand_len == 0:
        return {f"bleu{n}": 0.0 for n in range(1, n_max + 1)}
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    log_sum = 0.0
    for n in range(1, n_max + 1):
        if matches[n - 1] == 0 or totals[n - 1] == 0:
            log_sum = -math.inf
        else:
            log_sum += math.log(matches[n - 1] / totals[n - 1])
        scores[f"bleu{n}"] = bp * math.exp(log_sum / n) if log_sum > -math.inf else 0.0
    return scores


def uniqueness(captions: Iterable[Sequence[str]], training_captions: Iterable[Sequence[str]]) -> float:
    """Percentage of generated captions that never occur in the training set."""
    seen = {" ".join(c) for c in training_captions}
    caps = [" ".join(c) for c in captions]
    if not caps:
        return 0.0
    return 100.0 * sum(c not in seen for c in caps) / len(caps)


def avg_length(captions: Sequence[Sequence[str]]) -> float:
    if not captions:
        raise ValueError("avg_length of an empty caption set")
    return float(np.mean([len(c) for c in captions]))


def token_accuracy(model: DecoderModel, prep: Prepared, split: str = "test", batch_size: int = 64) -> float:
    """Teacher-forced top-1 next-token accuracy (the unigram accuracy)."""
    pairs = training_pairs(prep, split)
    feats = prep.features[split]
    hits = total = 0
    with ad.no_grad():
        layers = model.layers(stochastic=False)
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            tokens = pad_batch([c for _, c in chunk])
            f = encode(layers, feats[[j for j, _ in chunk]])
            memory = attention_memory(layers.attn, f)
            state = init_state(layers, f, model.cell)
            for t in range(tokens.shape[1] - 1):
                state.prev_token = tokens[:, t]
                logits, state = step_logits(layers, state, memory)
                target = tokens[:, t + 1]
                valid = target != 0
                hits += int(np.sum((np.argmax(logits.data, axis=1) == target) & valid))
                total += int(valid.sum())
    return hits / total


@dataclass
class EvalResult:
    bleu: dict[str, float]
    uniqueness_pct: float
    avg_len: float
    captions: list[list[str]]


def evaluate(stepper: Stepper, prep: Prepared, split: str = "test", beam: int = 3, max_len: int = 20,
             limit: int | None = None) -> EvalResult:
    feats = prep.features[split]
    refs = prep.references[split]
    n = len(refs) if limit is None else min(limit, len(refs))
    caps = [prep.vocab.decode(beam_search(stepper, feats[i], beam, max_len)) for i in range(n)]
    train_caps = [r for scene in prep.references["train"] for r in scene]
    return EvalResult(bleu(caps, refs[:n]), uniqueness(caps, train_caps), avg_length(caps), caps)


EVAL_COLUMNS = ("model_id", "sparsity", "cr", "b1", "b2", "b3", "b4", "uniqueness_pct", "avg_len")


def write_eval_csv(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def eval_row(model_id: str, sparsity: float, cr: float, res: EvalResult) -> dict:
    return {
        "model_id": model_id,
        "sparsity": f"{sparsity:.6f}",
        "cr": f"{cr:.4f}",
        **{f"b{n}": f"{res.bleu[f'bleu{n}']:.6f}" for n in range(1, 5)},
        "uniqueness_pct": f"{res.uniqueness_pct:.4f}",
        "avg_len": f"{res.avg_len:.4f}",
    }
