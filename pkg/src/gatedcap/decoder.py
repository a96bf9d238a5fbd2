"""Single-layer LSTM/GRU caption decoder with additive soft attention.

Weights are stored input-major (``x @ W``), so the paper's ``W_I`` (r x h)
lives here as (h, r) and the logits matrix ``E_o`` (v x r) as (r, v).  The
word embedding is a (v, q) row-lookup table.

The model can carry learnable gates (end-to-end pruning), fixed binary masks
(magnitude baselines) or neither (dense).  :meth:`DecoderModel.effective_weights`
resolves whichever applies into the eight weight tensors used by the forward
pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from . import gates as gt
from .autodiff import Tensor
from .data import END, PAD, START

LAYER_NAMES = (
    "rnn_initial_state",
    "rnn_kernel",
    "attn_key",
    "attn_value",
    "attn_query",
    "attn_mlp",
    "word_embedding",
    "logits",
)
BIAS_NAMES = ("rnn_bias", "attn_key_bias", "attn_value_bias", "logits_bias")
ENCODER_NAMES = ("encoder_kernel", "encoder_bias")


@dataclass(frozen=True)
class Dims:
    r: int = 64  # rnn units
    q: int = 32  # word size
    a: int = 64  # attention / context size
    v: int = 60  # vocabulary
    d_in: int = 32  # raw feature size per position
    d_f: int = 32  # encoded feature size (also the image-embed size h)
    n_pos: int = 16

    @property
    def h(self) -> int:
        return self.d_f

    def scaled(self, factor: float) -> "Dims":
        """Width-scaled copy (r, q, a); vocabulary and features unchanged."""
        return replace(self, r=max(1, round(self.r * factor)), q=max(1, round(self.q * factor)),
                       a=max(1, round(self.a * factor)))


def weight_shapes(dims: Dims, cell: str) -> dict[str, tuple[int, int]]:
    gates = {"lstm": 4, "gru": 3}[cell]
    return {
        "rnn_initial_state": (dims.h, dims.r),
        "rnn_kernel": (dims.q + dims.a + dims.r, gates * dims.r),
        "attn_key": (dims.d_f, dims.a),
        "attn_value": (dims.d_f, dims.a),
        "attn_query": (dims.r, dims.a),
        "attn_mlp": (dims.a, 1),
        "word_embedding": (dims.v, dims.q),
        "logits": (dims.r, dims.v),
    }


def bias_shapes(dims: Dims, cell: str) -> dict[str, tuple[int]]:
    gates = {"lstm": 4, "gru": 3}[cell]
    return {
        "rnn_bias": (gates * dims.r,),
        "attn_key_bias": (dims.a,),
        "attn_value_bias": (dims.a,),
        "logits_bias": (dims.v,),
    }


def xavier_uniform(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class AttentionParams(NamedTuple):
    key: Tensor
    value: Tensor
    query: Tensor
    mlp: Tensor
    key_bias: Tensor
    value_bias: Tensor


class RNNCellParams(NamedTuple):
    kind: str
    kernel: Tensor
    bias: Tensor


@dataclass
class Layers:
    """Effective (possibly masked) parameters for one forward pass."""

    init: Tensor
    rnn: RNNCellParams
    attn: AttentionParams
    embed: Tensor
    logits: Tensor
    logits_bias: Tensor
    enc_kernel: Tensor
    enc_bias: Tensor
    # cached kernel slices so per-step work does not re-slice
    split: tuple = ()


@dataclass
class DecoderState:
    h: Tensor
    m: Tensor | None
    prev_token: np.ndarray


@dataclass
class Dropout:
    rnn: float = 0.0
    attn: float = 0.0


DENSE_DROPOUT = Dropout(0.35, 0.1)
SPARSE_DROPOUT = Dropout(0.11, 0.03)


@dataclass
class DecoderModel:
    dims: Dims
    cell: str
    weights: dict[str, Tensor]
    biases: dict[str, Tensor]
    encoder: dict[str, Tensor]
    gates: dict[str, gt.GatedParameter] | None = None
    masks: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, dims: Dims, cell: str, rng: np.random.Generator) -> "DecoderModel":
        if cell not in ("lstm", "gru"):
            raise ValueError(f"unknown cell {cell!r}")
        weights = {n: Tensor(xavier_uniform(s, rng), True, n) for n, s in weight_shapes(dims, cell).items()}
        biases = {n: Tensor(np.zeros(s), True, n) for n, s in bias_shapes(dims, cell).items()}
        if cell == "lstm":
            biases["rnn_bias"].data[dims.r : 2 * dims.r] = 1.0  # forget gate
        encoder = {
            "encoder_kernel": Tensor(xavier_uniform((dims.d_in, dims.d_f), rng), True, "encoder_kernel"),
            "encoder_bias": Tensor(np.zeros(dims.d_f), True, "encoder_bias"),
        }
        return cls(dims, cell, weights, biases, encoder)

    def add_gates(self, m: float = gt.DEFAULT_GATE_INIT) -> None:
        self.gates = {n: gt.GatedParameter.create(n, self.weights[n], m) for n in LAYER_NAMES}

    def gate_list(self) -> list[gt.GatedParameter]:
        return [self.gates[n] for n in LAYER_NAMES] if self.gates else []

    def freeze_gates(self, frozen: bool = True) -> None:
        for p in self.gate_list():
            p.frozen = frozen

    def decoder_params(self) -> list[Tensor]:
        return [self.weights[n] for n in LAYER_NAMES] + [self.biases[n] for n in BIAS_NAMES]

    def encoder_params(self) -> list[Tensor]:
        return [self.encoder[n] for n in ENCODER_NAMES]

    def effective_weight(self, name: str, stochastic: bool, rng: np.random.Generator | None) -> Tensor:
        if self.gates is not None:
            p = self.gates[name]
            return gt.effective_weight_train(p, rng) if stochastic else gt.effective_weight_ml(p)
        if self.masks is not None:
            return ad.mul(self.weights[name], Tensor(self.masks[name]))
        return self.weights[name]

    def layers(self, stochastic: bool = False, rng: np.random.Generator | None = None) -> Layers:
        w = {n: self.effective_weight(n, stochastic, rng) for n in LAYER_NAMES}
        b = self.biases
        return make_layers(self.cell, self.dims, w, b, self.encoder)

    def final_weights(self) -> dict[str, np.ndarray]:
        """Plain arrays with gates/masks folded in (the exported weights)."""
        if self.gates is not None:
            return {n: gt.export_final(self.gates[n]) for n in LAYER_NAMES}
        if self.masks is not None:
            return {n: self.weights[n].data * self.masks[n] for n in LAYER_NAMES}
        return {n: self.weights[n].data.copy() for n in LAYER_NAMES}


def make_layers(cell: str, dims: Dims, w: Mapping[str, Tensor], b: Mapping[str, Tensor],
                enc: Mapping[str, Tensor]) -> Layers:
    r = dims.r
    kernel, bias = w["rnn_kernel"], b["rnn_bias"]
    split: tuple = ()
    if cell == "gru":
        split = (
            ad.slice_cols(kernel, 0, 2 * r), ad.slice_cols(bias, 0, 2 * r),
            ad.slice_cols(kernel, 2 * r, 3 * r), ad.slice_cols(bias, 2 * r, 3 * r),
        )
    return Layers(
        init=w["rnn_initial_state"],
        rnn=RNNCellParams(cell, kernel, bias),
        attn=AttentionParams(w["attn_key"], w["attn_value"], w["attn_query"], w["attn_mlp"],
                             b["attn_key_bias"], b["attn_value_bias"]),
        embed=w["word_embedding"],
        logits=w["logits"],
        logits_bias=b["logits_bias"],
        enc_kernel=enc["encoder_kernel"],
        enc_bias=enc["encoder_bias"],
        split=split,
    )


# -- forward pieces ---------------------------------------------------------------


def encode(layers: Layers, features: np.ndarray) -> Tensor:
    """(B, n_pos, d_in) raw features -> (B, n_pos, d_f) feature map."""
    bsz, n_pos, d_in = features.shape
    flat = ad.matmul(Tensor(features.reshape(bsz * n_pos, d_in)), layers.enc_kernel)
    return ad.reshape(ad.add_bias(flat, layers.enc_bias), (bsz, n_pos, -1))


def attention_memory(attn: AttentionParams, f: Tensor) -> tuple[Tensor, Tensor]:
    """Key and value projections of the feature map, computed once per sequence."""
    bsz, n_pos, d_f = f.shape
    flat = ad.reshape(f, (bsz * n_pos, d_f))
    keys = ad.add_bias(ad.matmul(flat, attn.key), attn.key_bias)
    values = ad.add_bias(ad.matmul(flat, attn.value), attn.value_bias)
    a = attn.key.shape[1]
    return ad.reshape(keys, (bsz, n_pos, a)), ad.reshape(values, (bsz, n_pos, a))


def soft_attention(attn: AttentionParams, f: Tensor | None, h_prev: Tensor, memory=None,
                   drop: float = 0.0, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """Context vector and attention weights.

    ``scores = mlp(tanh(key(f) + query(h_prev)))``, ``weights = softmax(scores)``,
    ``c = weights^T value(f)``.
    """
    keys, values = memory if memory is not None else attention_memory(attn, f)
    bsz, n_pos, a = keys.shape
    query = ad.matmul(h_prev, attn.query)
    hidden = ad.tanh(ad.add(keys, ad.expand(query, 1, n_pos)))
    scores = ad.reshape(ad.matmul(ad.reshape(hidden, (bsz * n_pos, a)), attn.mlp), (bsz, n_pos))
    weights = ad.softmax(scores, axis=1)
    dropped = ad.dropout(weights, drop, training, rng)
    context = ad.sum(ad.mul(ad.expand(dropped, 2, a), values), axis=1)
    return context, weights


def init_state(layers: Layers, f: Tensor, cell: str) -> DecoderState:
    """h = W_I * mean-pooled feature map, m = 0, previous token = START."""
    bsz, n_pos, _ = f.shape
    if layers.init.shape[0] != f.shape[2]:
        raise ValueError(f"image embedding size {f.shape[2]} does not match W_I {layers.init.shape}")
    embed = ad.mul(ad.sum(f, axis=1), 1.0 / n_pos)
    h = ad.matmul(embed, layers.init)
    m = Tensor(np.zeros(h.shape)) if cell == "lstm" else None
    return DecoderState(h, m, np.full(bsz, START, dtype=np.int64))


def rnn_cell(rnn: RNNCellParams, x: Tensor, h: Tensor, m: Tensor | None, split=()) -> tuple[Tensor, Tensor | None]:
    r = h.shape[1]
    if rnn.kind == "lstm":
        z = ad.add_bias(ad.matmul(ad.concat([x, h], axis=1), rnn.kernel), rnn.bias)
        i = ad.sigmoid(ad.slice_cols(z, 0, r))
        f = ad.sigmoid(ad.slice_cols(z, r, 2 * r))
        g = ad.tanh(ad.slice_cols(z, 2 * r, 3 * r))
        o = ad.sigmoid(ad.slice_cols(z, 3 * r, 4 * r))
        m_new = ad.add(ad.mul(f, m), ad.mul(i, g))
        return ad.mul(o, ad.tanh(m_new)), m_new
    k_zr, b_zr, k_c, b_c = split or (
        ad.slice_cols(rnn.kernel, 0, 2 * r), ad.slice_cols(rnn.bias, 0, 2 * r),
        ad.slice_cols(rnn.kernel, 2 * r, 3 * r), ad.slice_cols(rnn.bias, 2 * r, 3 * r),
    )
    zr = ad.sigmoid(ad.add_bias(ad.matmul(ad.concat([x, h], axis=1), k_zr), b_zr))
    u = ad.slice_cols(zr, 0, r)
    reset = ad.slice_cols(zr, r, 2 * r)
    cand = ad.tanh(ad.add_bias(ad.matmul(ad.concat([x, ad.mul(reset, h)], axis=1), k_c), b_c))
    return ad.add(ad.mul(u, h), ad.mul(ad.sub(1.0, u), cand)), None


def step_logits(layers: Layers, state: DecoderState, memory, drop: Dropout = Dropout(),
                training: bool = False, rng=None) -> tuple[Tensor, DecoderState]:
    """One decoding step returning unnormalized vocabulary scores."""
    context, _ = soft_attention(layers.attn, None, state.h, memory, drop.attn, training, rng)
    word = ad.lookup(layers.embed, state.prev_token)
    x = ad.dropout(ad.concat([word, context], axis=1), drop.rnn, training, rng)
    h, m = rnn_cell(layers.rnn, x, state.h, state.m, layers.split)
    out = ad.dropout(h, drop.rnn, training, rng)
    logits = ad.add_bias(ad.matmul(out, layers.logits), layers.logits_bias)
    return logits, DecoderState(h, m, state.prev_token)


def decoder_step(layers: Layers, state: DecoderState, memory, rng=None, training: bool = False,
                 drop: Dropout = Dropout()) -> tuple[Tensor, DecoderState]:
    """Vocabulary distribution p_t and the next state (prev_token unchanged)."""
    logits, new = step_logits(layers, state, memory, drop, training, rng)
    return ad.softmax(logits, axis=1), new


def weight_decay_term(model: DecoderModel) -> Tensor:
    total = None
    for p in model.decoder_params():
        term = ad.square_sum(p)
        total = term if total is None else ad.add(total, term)
    return total


def caption_loss(model: DecoderModel, features: np.ndarray, tokens: np.ndarray, weight_decay: float = 0.0,
                 rng: np.random.Generator | None = None, training: bool = False,
                 drop: Dropout = Dropout(), layers: Layers | None = None, reduction: str = "sum") -> Tensor:
    """Teacher-forced cross-entropy plus ``weight_decay * ||theta||^2`` over
    decoder weights and biases.

    ``tokens`` is (B, L) padded with PAD, each row starting with START.  With
    ``reduction="sum"`` the cross-entropy is summed over each caption's tokens
    and averaged over the batch; ``"token_mean"`` averages over all target
    tokens in the batch instead.
    """
    if reduction not in ("sum", "token_mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2:
        features = features[None]
    if tokens.shape[1] < 2:
        raise ValueError("caption_loss needs at least one target token")
    if layers is None:
        layers = model.layers(stochastic=training and model.gates is not None, rng=rng)
    bsz = tokens.shape[0]
    f = encode(layers, features)
    memory = attention_memory(layers.attn, f)
    state = init_state(layers, f, model.cell)
    steps = []
    for t in range(tokens.shape[1] - 1):
        state.prev_token = tokens[:, t]
        logits, state = step_logits(layers, state, memory, drop, training, rng)
        steps.append(logits)
    targets = tokens[:, 1:].T.reshape(-1)  # time-major to match stacked logits
    mask = (targets != PAD).astype(np.float64)
    ce = ad.cross_entropy(ad.concat(steps, axis=0), targets, mask)
    loss = ad.mul(ce, 1.0 / (bsz if reduction == "sum" else mask.sum()))
    if weight_decay:
        loss = ad.add(loss, ad.mul(weight_decay_term(model), weight_decay))
    return loss


__all__ = [
    "LAYER_NAMES", "BIAS_NAMES", "Dims", "DecoderModel", "DecoderState", "Dropout", "Layers",
    "AttentionParams", "RNNCellParams", "DENSE_DROPOUT", "SPARSE_DROPOUT", "attention_memory",
    "caption_loss", "decoder_step", "encode", "init_state", "rnn_cell", "soft_attention", "step_logits",
    "weight_shapes", "bias_shapes", "END",
]
