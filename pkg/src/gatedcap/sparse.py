"""Compressed-row sparse inference for exported decoders, plus size accounting.

Weight matrices are stored output-major (rows = output units) so that one
decoding step is a sparse matrix-vector product per layer.  The word
embedding keeps its (v, q) orientation and is read row by row.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import START
from .decoder import BIAS_NAMES, ENCODER_NAMES, LAYER_NAMES, DecoderModel, Dims

SPM_MAGIC = b"GSPM"
SPM_VERSION = 1
ROW_LOOKUP_LAYERS = ("word_embedding",)


@dataclass(frozen=True)
class SparseMatrix:
    rows: int
    cols: int
    row_ptr: np.ndarray  # int64, rows + 1
    col_idx: np.ndarray  # int64, nnz
    values: np.ndarray  # float64, nnz
    _row_of: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rp = self.row_ptr
        if rp.shape != (self.rows + 1,) or rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be nondecreasing, start at 0 and have rows + 1 entries")
        if rp[-1] != len(self.values) or len(self.values) != len(self.col_idx):
            raise ValueError("row_ptr[-1], len(values) and len(col_idx) must agree")
        object.__setattr__(self, "_row_of", np.repeat(np.arange(self.rows), np.diff(rp)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def nnz(self) -> int:
        return len(self.values)

    def nbytes(self) -> int:
        """On-disk payload: u64 row pointers, u32 column indices, f64 values."""
        return 8 * (self.rows + 1) + 4 * self.nnz + 8 * self.nnz

    def row(self, i: int) -> np.ndarray:
        if not 0 <= i < self.rows:
            raise IndexError(f"row {i} out of range for {self.rows} rows")
        out = np.zeros(self.cols)
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        out[self.col_idx[lo:hi]] = self.values[lo:hi]
        return out

    def row_block(self, start: int, stop: int) -> "SparseMatrix":
        lo, hi = self.row_ptr[start], self.row_ptr[stop]
        return SparseMatrix(stop - start, self.cols, self.row_ptr[start : stop + 1] - lo,
                            self.col_idx[lo:hi], self.values[lo:hi])


def to_sparse(dense: np.ndarray) -> SparseMatrix:
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise ValueError("to_sparse expects a 2-D array")
    rows, cols = np.nonzero(dense)  # row-major order, columns sorted within a row
    row_ptr = np.zeros(dense.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=dense.shape[0]), out=row_ptr[1:])
    return SparseMatrix(dense.shape[0], dense.shape[1], row_ptr, cols.astype(np.int64), dense[rows, cols].copy())


def from_sparse(a: SparseMatrix) -> np.ndarray:
    out = np.zeros(a.shape)
    out[a._row_of, a.col_idx] = a.values
    return out


def spmv(a: SparseMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.cols,):
        raise ValueError(f"spmv: vector of length {x.shape} for matrix with {a.cols} columns")
    return np.bincount(a._row_of, weights=a.values * x[a.col_idx], minlength=a.rows).astype(np.float64)


def spmm(a: SparseMatrix, xs: np.ndarray) -> np.ndarray:
    """Row-batched product: (k, cols) -> (k, rows), each row an spmv."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != a.cols:
        raise ValueError(f"spmm: batch of shape {xs.shape} for matrix with {a.cols} columns")
    out = np.zeros((xs.shape[0], a.rows))
    if a.nnz == 0:
        return out
    contrib = xs[:, a.col_idx] * a.values
    starts = a.row_ptr[:-1]
    nonempty = np.flatnonzero(np.diff(a.row_ptr))
    out[:, nonempty] = np.add.reduceat(contrib, starts[nonempty], axis=1)
    return out


# -- accounting -----------------------------------------------------------------


@dataclass(frozen=True)
class LayerStat:
    name: str
    total: int
    nnz: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.total if self.total else 0.0


@dataclass(frozen=True)
class PruneReport:
    layers: tuple[LayerStat, ...]
    bias_total: int = 0

    @property
    def total(self) -> int:
        return sum(l.total for l in self.layers)

    @property
    def nnz(self) -> int:
        return sum(l.nnz for l in self.layers)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.total

    @property
    def compression_ratio(self) -> float:
        """Weights-only total / NNZ."""
        return self.total / self.nnz if self.nnz else float("inf")

    @property
    def nnz_with_biases(self) -> int:
        return self.nnz + self.bias_total

    @property
    def compression_ratio_with_biases(self) -> float:
        return (self.total + self.bias_total) / self.nnz_with_biases

    def to_dict(self) -> dict:
        return {
            "layers": [{"layer": l.name, "total": l.total, "nnz": l.nnz, "sparsity": l.sparsity} for l in self.layers],
            "total": self.total,
            "nnz": self.nnz,
            "sparsity": self.sparsity,
            "compression_ratio": self.compression_ratio,
            "nnz_with_biases": self.nnz_with_biases,
            "compression_ratio_with_biases": self.compression_ratio_with_biases,
        }


def cr_for_sparsity(s: float) -> float:
    """1 / (1 - s) in decimal arithmetic (0.975 -> 40 exactly)."""
    keep = 1 - Fraction(str(s))
    if keep <= 0:
        raise ValueError("sparsity must be < 1")
    return float(1 / keep)


def report_from_arrays(weights: Mapping[str, np.ndarray], bias_total: int = 0) -> PruneReport:
    return PruneReport(tuple(LayerStat(n, int(w.size), int(np.count_nonzero(w))) for n, w in weights.items()),
                       bias_total)


def report(model: "DecoderModel | SparseModel") -> PruneReport:
    """Per-layer and overall NNZ accounting (decoder only, encoder excluded)."""
    if isinstance(model, SparseModel):
        return PruneReport(tuple(LayerStat(n, m.rows * m.cols, m.nnz) for n, m in model.layers.items()),
                           sum(b.size for b in model.biases.values()))
    bias_total = sum(model.biases[n].data.size for n in BIAS_NAMES)
    if model.gates is not None:
        return PruneReport(tuple(LayerStat(n, p.size, int(np.count_nonzero(p.G.data > 0)))
                                 for n, p in model.gates.items()), bias_total)
    if model.masks is not None:
        return PruneReport(tuple(LayerStat(n, m.size, int(np.count_nonzero(m))) for n, m in model.masks.items()),
                           bias_total)
    return report_from_arrays({n: model.weights[n].data for n in LAYER_NAMES}, bias_total)


def write_layer_csv(path: str | Path, rep: PruneReport) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "total", "nnz", "sparsity"])
        for l in rep.layers:
            w.writerow([l.name, l.total, l.nnz, f"{l.sparsity:.6f}"])


# -- sparse model --------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class SparseState:
    h: np.ndarray  # (k, r)
    m: np.ndarray | None
    keys: np.ndarray  # (k, n_pos, a)
    values: np.ndarray


@dataclass
class SparseModel:
    """Exported decoder: CSR weights, dense biases and encoder."""

    dims: Dims
    cell: str
    layers: dict[str, SparseMatrix]
    biases: dict[str, np.ndarray]
    encoder: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: DecoderModel) -> "SparseModel":
        final = model.final_weights()
        layers = {n: to_sparse(final[n] if n in ROW_LOOKUP_LAYERS else final[n].T) for n in LAYER_NAMES}
        return cls(model.dims, model.cell, layers, {n: model.biases[n].data.copy() for n in BIAS_NAMES},
                   {n: model.encoder[n].data.copy() for n in ENCODER_NAMES}, dict(model.meta))

    def dense_weight(self, name: str) -> np.ndarray:
        """Weight in the decoder's input-major orientation."""
        d = from_sparse(self.layers[name])
        return d if name in ROW_LOOKUP_LAYERS else d.T

    # Stepper protocol -----------------------------------------------------------

    def start(self, features: np.ndarray) -> SparseState:
        feats = np.asarray(features, dtype=np.float64)
        f = feats @ self.encoder["encoder_kernel"] + self.encoder["encoder_bias"]
        keys = spmm(self.layers["attn_key"], f) + self.biases["attn_key_bias"]
        values = spmm(self.layers["attn_value"], f) + self.biases["attn_value_bias"]
        h = spmv(self.layers["rnn_initial_state"], f.mean(axis=0))[None]
        m = np.zeros_like(h) if self.cell == "lstm" else None
        return SparseState(h, m, keys[None], values[None])

    def step(self, state: SparseState, tokens) -> tuple[np.ndarray, SparseState]:
        probs, new = self.decode_step(state, tokens)
        with np.errstate(divide="ignore"):
            return np.log(probs), new

    def select(self, state: SparseState, idx) -> SparseState:
        return SparseState(state.h[idx], None if state.m is None else state.m[idx], state.keys[idx], state.values[idx])

    def decode_step(self, state: SparseState, tokens) -> tuple[np.ndarray, SparseState]:
        """Vocabulary distributions (k, v) for k hypotheses and the next state."""
        tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
        k = len(tokens)
        keys, values = state.keys, state.values
        if keys.shape[0] != k:
            keys = np.repeat(keys[:1], k, axis=0)
            values = np.repeat(values[:1], k, axis=0)
        L = self.layers
        n_pos, a = keys.shape[1], keys.shape[2]
        query = spmm(L["attn_query"], state.h)
        hidden = np.tanh(keys + query[:, None, :])
        scores = spmm(L["attn_mlp"], hidden.reshape(k * n_pos, a)).reshape(k, n_pos)
        weights = _softmax(scores)
        context = np.einsum("kp,kpa->ka", weights, values)
        word = np.stack([L["word_embedding"].row(int(t)) for t in tokens])
        x = np.concatenate([word, context], axis=1)
        h, m = self._cell(x, state.h, state.m)
        logits = spmm(L["logits"], h) + self.biases["logits_bias"]
        return _softmax(logits), SparseState(h, m, keys, values)

    def _cell(self, x, h, m):
        r = h.shape[1]
        kernel, bias = self.layers["rnn_kernel"], self.biases["rnn_bias"]
        if self.cell == "lstm":
            z = spmm(kernel, np.concatenate([x, h], axis=1)) + bias
            i, f, g, o = (z[:, j * r : (j + 1) * r] for j in range(4))
            m_new = _sigmoid(f) * m + _sigmoid(i) * np.tanh(g)
            return _sigmoid(o) * np.tanh(m_new), m_new
        zr = _sigmoid(spmm(kernel.row_block(0, 2 * r), np.concatenate([x, h], axis=1)) + bias[: 2 * r])
        u, reset = zr[:, :r], zr[:, r:]
        cand = np.tanh(spmm(kernel.row_block(2 * r, 3 * r), np.concatenate([x, reset * h], axis=1)) + bias[2 * r :])
        return u * h + (1.0 - u) * cand, None

    def initial_tokens(self, k: int = 1) -> np.ndarray:
        return np.full(k, START, dtype=np.int64)

    # file format ----------------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        dense = {f"bias/{n}": b for n, b in self.biases.items()}
        dense.update({f"encoder/{n}": e for n, e in self.encoder.items()})
        meta = {"dims": self.dims.__dict__, "cell": self.cell, **self.meta}
        raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(SPM_MAGIC)
            fh.write(struct.pack("<IIII", SPM_VERSION, len(raw_meta), len(self.layers), len(dense)))
            fh.write(raw_meta)
            for name, mat in self.layers.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(struct.pack("<QQQ", mat.rows, mat.cols, mat.nnz))
                fh.write(mat.row_ptr.astype("<u8").tobytes())
                fh.write(mat.col_idx.astype("<u4").tobytes())
                fh.write(mat.values.astype("<f8").tobytes())
            for name, arr in dense.items():
                raw = name.encode("utf-8")
                arr = np.ascontiguousarray(arr, dtype="<f8")
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SparseModel":
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:4] != SPM_MAGIC:
            raise ValueError(f"{path}: not a sparse model file")
        version, meta_len, n_sparse, n_dense = struct.unpack_from("<IIII", buf, 4)
        if version != SPM_VERSION:
            raise ValueError(f"{path}: unsupported sparse model version {version}")
        pos = 20
        meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len

        def take(dtype, count):
            nonlocal pos
            size = np.dtype(dtype).itemsize * count
            if pos + size > len(buf):
                raise ValueError(f"{path}: truncated file")
            out = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
            pos += size
            return out

        def name():
            (n,) = take("<u4", 1)
            return bytes(take("u1", int(n))).decode("utf-8")

        layers = {}
        for _ in range(n_sparse):
            key = name()
            rows, cols, nnz = (int(v) for v in take("<u8", 3))
            row_ptr = take("<u8", rows + 1).astype(np.int64)
            col_idx = take("<u4", nnz).astype(np.int64)
            values = take("<f8", nnz).astype(np.float64)
            layers[key] = SparseMatrix(rows, cols, row_ptr, col_idx, values)
        dense = {}
        for _ in range(n_dense):
            key = name()
            (rank,) = take("<u4", 1)
            shape = tuple(int(v) for v in take("<u8", int(rank)))
            dense[key] = take("<f8", int(np.prod(shape)) if rank else 1).astype(np.float64).reshape(shape)
        dims = Dims(**meta.pop("dims"))
        cell = meta.pop("cell")
        biases = {k[5:]: v for k, v in dense.items() if k.startswith("bias/")}
        encoder = {k[8:]: v for k, v in dense.items() if k.startswith("encoder/")}
        return cls(dims, cell, layers, biases, encoder, meta)
