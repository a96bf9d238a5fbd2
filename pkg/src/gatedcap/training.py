"""Two-stage training driver, optimizers, schedules and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from . import baselines as bl
from . import gates as gt
from .data import Prepared, pad_batch
from .decoder import BIAS_NAMES, ENCODER_NAMES, LAYER_NAMES, DecoderModel, Dims, Dropout, caption_loss

log = logging.getLogger(__name__)

METHODS = ("dense", "gated", "gradual", "masked")


def derive_seed(seed: int, purpose: str) -> int:
    """Stable sub-seed for one consumer of randomness."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrainConfig:
    method: str = "dense"
    cell: str = "lstm"
    r: int = 64
    q: int = 32
    a: int = 64
    batch_size: int = 32
    epochs_stage1: int = 30
    epochs_stage2: int = 10
    lr_init_stage1: float = 1e-2
    lr_final: float = 1e-5
    lr_init_stage2: float = 1e-3
    gate_lr: float = 1000.0
    gate_optimizer: str = "sgd"
    gate_momentum: float = 0.9
    loss_reduction: str = "token_mean"
    weight_decay: float = 1e-5
    dropout_dense_rnn: float = 0.35
    dropout_dense_attn: float = 0.1
    dropout_sparse_rnn: float = 0.11
    dropout_sparse_attn: float = 0.03
    s_target: float = 0.0
    lambda_s: float | None = None  # None -> lambda_heuristic(s_target)
    gate_init: float = gt.DEFAULT_GATE_INIT
    gradual_start_epoch: int = 1
    gradual_end_epoch: int = 15
    gradual_freq: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.cell not in ("lstm", "gru"):
            raise ValueError("cell must be lstm or gru")
        if self.gate_optimizer not in ("sgd", "adam"):
            raise ValueError("gate_optimizer must be sgd or adam")
        if self.loss_reduction not in ("sum", "token_mean"):
            raise ValueError("loss_reduction must be sum or token_mean")
        if not 0.0 <= self.s_target < 1.0:
            raise ValueError(f"s_target must be in [0, 1), got {self.s_target}")
        if self.lr_final > self.lr_init_stage1:
            raise ValueError("lr_final must not exceed lr_init_stage1")
        for f in ("dropout_dense_rnn", "dropout_dense_attn", "dropout_sparse_rnn", "dropout_sparse_attn"):
            if not 0.0 <= getattr(self, f) < 1.0:
                raise ValueError(f"{f} must be in [0, 1)")

    @property
    def resolved_lambda(self) -> float:
        return gt.lambda_heuristic(self.s_target) if self.lambda_s is None else float(self.lambda_s)

    @property
    def sparse(self) -> bool:
        return self.method != "dense"

    def dropout(self) -> Dropout:
        if self.sparse:
            return Dropout(self.dropout_sparse_rnn, self.dropout_sparse_attn)
        return Dropout(self.dropout_dense_rnn, self.dropout_dense_attn)

    def dims(self, vocab_size: int) -> Dims:
        return Dims(r=self.r, q=self.q, a=self.a, v=vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# -- schedules and optimizers -----------------------------------------------------


def lr_at(step: int, n_max: int, lr_init: float, lr_final: float) -> float:
    return lr_final + (lr_init - lr_final) * gt.cosine_anneal(step, n_max)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of every param that has a gradient."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def momentum_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
                  momentum: float = 0.9) -> None:
    """Heavy-ball SGD; the velocity lives in ``state.m``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        vel = state.m.setdefault(name, np.zeros_like(p.data))
        state.v.setdefault(name, np.zeros(()))
        state.t[name] = state.t.get(name, 0) + 1
        vel *= momentum
        vel += g
        p.data -= lr * vel


# -- training loop --------------------------------------------------------------


@dataclass
class TrainState:
    model: DecoderModel
    config: TrainConfig
    stage: int = 1
    step: int = 0
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    gate_adam: AdamState = field(default_factory=AdamState)
    history: list[dict] = field(default_factory=list)


def new_model(cfg: TrainConfig, vocab_size: int) -> DecoderModel:
    rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
    model = DecoderModel.init(cfg.dims(vocab_size), cfg.cell, rng)
    if cfg.method == "gated":
        model.add_gates(cfg.gate_init)
    elif cfg.method in ("gradual", "masked"):
        model.masks = bl.full_mask({n: model.weights[n].data for n in LAYER_NAMES})
    return model


def _batches(n_items: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


def steps_per_epoch(prep: Prepared, batch_size: int) -> int:
    return math.ceil(len(prep.captions["train"]) / batch_size)


def _named(params: Iterable[ad.Tensor]) -> dict[str, ad.Tensor]:
    return {p.name: p for p in params}


def run_epochs(state: TrainState, prep: Prepared, epochs: int, *, lr_init: float, lr_final: float,
               train_encoder: bool, gates_live: bool, schedule: bl.GradualSchedule | None = None,
               on_epoch: Callable[[TrainState, dict], None] | None = None) -> TrainState:
    """Shared optimization loop for both stages and every method."""
    cfg, model = state.config, state.model
    captions = prep.captions["train"]
    feats = prep.features["train"]
    if not captions:
        raise ValueError("training split is empty")
    per_epoch = math.ceil(len(captions) / cfg.batch_size)
    n_max = per_epoch * epochs
    start_step = state.step
    lambda_s = cfg.resolved_lambda if model.gates is not None else 0.0
    theta = _named(model.decoder_params() + (model.encoder_params() if train_encoder else []))
    gate_params = {p.name: p.G for p in model.gate_list()}
    drop = cfg.dropout()
    tag = f"stage{state.stage}"
    for _ in range(epochs):
        shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, f"{tag}/shuffle/{state.epoch}"))
        noise_rng = np.random.default_rng(derive_seed(cfg.seed, f"{tag}/noise/{state.epoch}"))
        sums = {"loss_caption": 0.0, "loss_sparsity": 0.0}
        # one pass over the scenes, each with one of its captions
        pick = [int(shuffle_rng.integers(len(c))) for c in captions]
        batches = _batches(len(captions), cfg.batch_size, shuffle_rng)
        for idx in batches:
            n = state.step - start_step
            lr = lr_at(n, n_max, lr_init, lr_final)
            tokens = pad_batch([captions[i][pick[i]] for i in idx])
            x = feats[idx]
            loss_c = caption_loss(model, x, tokens, cfg.weight_decay, noise_rng, True, drop,
                                  reduction=cfg.loss_reduction)
            loss = loss_c
            loss_s_val = 0.0
            if gates_live and model.gates is not None:
                loss_s = gt.sparsity_loss(model.gate_list(), cfg.s_target, n, n_max)
                loss_s_val = loss_s.item()
                loss = gt.total_loss(loss_c, loss_s, lambda_s)
            ad.backward(loss)
            adam_step(theta, {k: p.grad for k, p in theta.items()}, state.adam, lr)
            if gates_live and gate_params:
                grads = {k: p.grad for k, p in gate_params.items()}
                if cfg.gate_optimizer == "adam":
                    adam_step(gate_params, grads, state.gate_adam, cfg.gate_lr)
                else:
                    momentum_step(gate_params, grads, state.gate_adam, cfg.gate_lr, cfg.gate_momentum)
            ad.zero_grad(list(theta.values()) + list(gate_params.values()) + model.encoder_params())
            if model.masks is not None:
                if schedule is not None and schedule.is_update_step(state.step):
                    model.masks = bl.gradual_update({k: model.weights[k].data for k in LAYER_NAMES},
                                                    model.masks, state.step, schedule)
                bl.apply_mask({k: model.weights[k].data for k in LAYER_NAMES}, model.masks)
            sums["loss_caption"] += loss_c.item()
            sums["loss_sparsity"] += loss_s_val
            state.step += 1
        state.epoch += 1
        record = {
            "step": state.step,
            "epoch": state.epoch,
            "loss_caption": sums["loss_caption"] / len(batches),
            "loss_sparsity": sums["loss_sparsity"] / len(batches),
            "alpha": gt.cosine_anneal(state.step - start_step, n_max),
            "sparsity_ml": current_sparsity(model),
            "lr": lr_at(state.step - start_step, n_max, lr_init, lr_final),
        }
        state.history.append(record)
        log.info("%s epoch %d %s", tag, state.epoch, json.dumps(record))
        if on_epoch is not None:
            on_epoch(state, record)
    return state


def current_sparsity(model: DecoderModel) -> float:
    if model.gates is not None:
        return gt.sparsity(model.gate_list())
    if model.masks is not None:
        return bl.mask_sparsity(model.masks)
    return 0.0


def gradual_schedule(cfg: TrainConfig, per_epoch: int) -> bl.GradualSchedule:
    # mask updates begin on the first step of the epoch after gradual_start_epoch
    return bl.GradualSchedule(cfg.s_target, cfg.gradual_start_epoch * per_epoch,
                              cfg.gradual_end_epoch * per_epoch - 1, cfg.gradual_freq)


def train_stage1(prep: Prepared, cfg: TrainConfig, model: DecoderModel | None = None,
                 on_epoch=None) -> TrainState:
    """Decoder (and gate) training with the encoder frozen."""
    model = model or new_model(cfg, len(prep.vocab))
    state = TrainState(model, cfg, stage=1)
    schedule = None
    if cfg.method == "gradual":
        schedule = gradual_schedule(cfg, steps_per_epoch(prep, cfg.batch_size))
    return run_epochs(state, prep, cfg.epochs_stage1, lr_init=cfg.lr_init_stage1, lr_final=cfg.lr_final,
                      train_encoder=False, gates_live=True, schedule=schedule, on_epoch=on_epoch)


def train_stage2(state: TrainState, prep: Prepared, on_epoch=None) -> TrainState:
    """Fine-tune decoder and encoder with frozen gates (still Bernoulli-sampled)."""
    model, cfg = state.model, state.config
    if cfg.method == "gated" and model.gates is None:
        raise ValueError("stage-2 checkpoint has no gates")
    model.freeze_gates(True)
    state.stage, state.step = 2, 0
    state.adam = AdamState()
    state.gate_adam = AdamState()
    return run_epochs(state, prep, cfg.epochs_stage2, lr_init=cfg.lr_init_stage2, lr_final=cfg.lr_final,
                      train_encoder=True, gates_live=False, on_epoch=on_epoch)


def retrain(state: TrainState, prep: Prepared, mask: dict[str, np.ndarray], epochs: int,
            on_epoch=None) -> TrainState:
    """Retrain a hard-pruned model with a fixed mask (dense-baseline LR schedule)."""
    model, cfg = state.model, state.config
    model.masks = {k: v.copy() for k, v in mask.items()}
    model.gates = None
    bl.apply_mask({k: model.weights[k].data for k in LAYER_NAMES}, model.masks)
    state.stage, state.step, state.adam = 3, 0, AdamState()
    return run_epochs(state, prep, epochs, lr_init=cfg.lr_init_stage1, lr_final=cfg.lr_final,
                      train_encoder=False, gates_live=False, on_epoch=on_epoch)


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"GCKP"
CKPT_VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated file")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(fh, name, arr)


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return dict(_read_tensor(fh) for _ in range(count))


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_json(arr: np.ndarray):
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    model = state.model
    out: dict[str, np.ndarray] = {}
    meta = {"config": state.config.to_dict(), "dims": asdict(model.dims), "cell": model.cell,
            "stage": state.stage, "step": state.step, "epoch": state.epoch, "history": state.history,
            "frozen": bool(model.gate_list() and model.gate_list()[0].frozen), **model.meta}
    out["meta/json"] = encode_json(meta)
    for n in LAYER_NAMES:
        out[f"weight/{n}"] = model.weights[n].data
    for n in BIAS_NAMES:
        out[f"bias/{n}"] = model.biases[n].data
    for n in ENCODER_NAMES:
        out[f"encoder/{n}"] = model.encoder[n].data
    for p in model.gate_list():
        out[f"gate/{p.name}"] = p.G.data
    if model.masks is not None:
        for n in LAYER_NAMES:
            out[f"mask/{n}"] = model.masks[n]
    for prefix, adam in (("adam", state.adam), ("gate_adam", state.gate_adam)):
        for k in adam.m:
            out[f"{prefix}/m/{k}"] = adam.m[k]
            out[f"{prefix}/v/{k}"] = adam.v[k]
            out[f"{prefix}/t/{k}"] = np.asarray(float(adam.t[k]))
    return out


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    write_tensors(path, state_tensors(state))


def load_checkpoint(path: str | Path) -> TrainState:
    t = read_tensors(path)
    meta = decode_json(t["meta/json"])
    cfg = TrainConfig.from_dict(meta["config"])
    dims = Dims(**meta["dims"])
    weights = {n: ad.Tensor(t[f"weight/{n}"].copy(), True, n) for n in LAYER_NAMES}
    biases = {n: ad.Tensor(t[f"bias/{n}"].copy(), True, n) for n in BIAS_NAMES}
    encoder = {n: ad.Tensor(t[f"encoder/{n}"].copy(), True, n) for n in ENCODER_NAMES}
    extra = {k: v for k, v in meta.items()
             if k not in ("config", "dims", "cell", "stage", "step", "epoch", "history", "frozen")}
    model = DecoderModel(dims, meta["cell"], weights, biases, encoder, meta=extra)
    if f"gate/{LAYER_NAMES[0]}" in t:
        model.gates = {
            n: gt.GatedParameter(n, weights[n], ad.Tensor(t[f"gate/{n}"].copy(), True, f"{n}/gate"),
                                 frozen=meta["frozen"])
            for n in LAYER_NAMES
        }
    if f"mask/{LAYER_NAMES[0]}" in t:
        model.masks = {n: t[f"mask/{n}"].copy() for n in LAYER_NAMES}
    state = TrainState(model, cfg, meta["stage"], meta["step"], meta["epoch"], history=meta["history"])
    for prefix, adam in (("adam", state.adam), ("gate_adam", state.gate_adam)):
        head = f"{prefix}/m/"
        for key in [k for k in t if k.startswith(head)]:
            name = key[len(head):]
            adam.m[name] = t[key].copy()
            adam.v[name] = t[f"{prefix}/v/{name}"].copy()
            adam.t[name] = int(t[f"{prefix}/t/{name}"].item())
    return state
