import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gatedcap import decoder as dec
from gatedcap import evaluation as ev
from gatedcap import sparse as sp

from conftest import SMALL, random_model


def sparse_arrays(max_side=12):
    shapes = st.tuples(st.integers(0, max_side), st.integers(0, max_side))
    values = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
    return shapes.flatmap(lambda s: hnp.arrays(np.float64, s, elements=st.one_of(st.just(0.0), values)))


def test_csr_example():
    a = sp.to_sparse(np.array([[1.0, 0.0], [0.0, 2.0]]))
    np.testing.assert_array_equal(a.values, [1, 2])
    np.testing.assert_array_equal(a.col_idx, [0, 1])
    np.testing.assert_array_equal(a.row_ptr, [0, 1, 2])


def test_all_zero_matrix():
    a = sp.to_sparse(np.zeros((3, 4)))
    assert a.nnz == 0 and np.all(a.row_ptr == 0)
    np.testing.assert_array_equal(sp.spmv(a, np.ones(4)), np.zeros(3))


def test_invalid_row_ptr_rejected():
    with pytest.raises(ValueError):
        sp.SparseMatrix(2, 2, np.array([0, 2, 1]), np.array([0]), np.array([1.0]))
    with pytest.raises(ValueError):
        sp.SparseMatrix(2, 2, np.array([0, 1, 2]), np.array([0]), np.array([1.0]))


@given(sparse_arrays())
@settings(max_examples=1000)
def test_round_trip_exact(x):
    a = sp.to_sparse(x)
    assert np.array_equal(sp.from_sparse(a), x)
    assert np.all(a.values != 0)
    for i in range(a.rows):
        cols = a.col_idx[a.row_ptr[i] : a.row_ptr[i + 1]]
        assert np.all(np.diff(cols) > 0)


@given(st.integers(1, 40), st.integers(1, 40), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
@settings(max_examples=1000)
def test_spmv_matches_dense(rows, cols, density, seed):
    rng = np.random.default_rng(seed)
    dense = rng.normal(size=(rows, cols)) * (rng.random((rows, cols)) < density)
    x = rng.normal(size=cols)
    got = sp.spmv(sp.to_sparse(dense), x)
    ref = dense @ x
    assert np.linalg.norm(got - ref) <= 1e-12 * max(np.linalg.norm(ref), 1e-300) + 1e-300


def test_spmv_examples():
    x = np.arange(5.0)
    np.testing.assert_array_equal(sp.spmv(sp.to_sparse(np.eye(5)), x), x)
    with pytest.raises(ValueError):
        sp.spmv(sp.to_sparse(np.eye(5)), np.ones(4))
    rng = np.random.default_rng(0)
    d = rng.normal(size=(64, 64)) * (rng.random((64, 64)) < 0.1)
    v = rng.normal(size=64)
    assert np.linalg.norm(sp.spmv(sp.to_sparse(d), v) - d @ v) < 1e-12 * np.linalg.norm(d @ v)


def test_round_trip_50x50_high_sparsity():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(50, 50)) * (rng.random((50, 50)) < 0.025)
    assert np.array_equal(sp.from_sparse(sp.to_sparse(d)), d)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 6), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_spmm_matches_rowwise_spmv(rows, cols, k, density, seed):
    rng = np.random.default_rng(seed)
    dense = rng.normal(size=(rows, cols)) * (rng.random((rows, cols)) < density)
    xs = rng.normal(size=(k, cols))
    a = sp.to_sparse(dense)
    got = sp.spmm(a, xs)
    np.testing.assert_allclose(got, np.stack([sp.spmv(a, x) for x in xs]), rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(got, xs @ dense.T, rtol=1e-10, atol=1e-12)


def test_row_block():
    d = np.arange(12.0).reshape(4, 3) * (np.arange(12).reshape(4, 3) % 2)
    a = sp.to_sparse(d)
    np.testing.assert_array_equal(sp.from_sparse(a.row_block(1, 3)), d[1:3])


def test_sparse_storage_smaller_beyond_half():
    rng = np.random.default_rng(0)
    for s in (0.6, 0.8, 0.975):
        d = rng.normal(size=(64, 64)) * (rng.random((64, 64)) >= s)
        assert sp.to_sparse(d).nbytes() < 8 * d.size


@pytest.mark.parametrize("s,cr", [(0.8, 5), (0.9, 10), (0.95, 20), (0.975, 40), (0.0, 1)])
def test_compression_ratio_from_sparsity(s, cr):
    assert sp.cr_for_sparsity(s) == cr


def test_report_dense_and_sparse():
    dense = random_model(0, mode="dense")
    rep = sp.report(dense)
    assert rep.sparsity == 0.0 and rep.compression_ratio == 1.0
    w = {"a": np.array([1.0, 0, 0, 0, 0]), "b": np.array([0.0, 2.0, 0, 0, 0])}
    rep = sp.report_from_arrays(w, bias_total=3)
    assert rep.sparsity == pytest.approx(0.8) and rep.compression_ratio == 5.0
    assert rep.nnz_with_biases == 5 and rep.compression_ratio_with_biases == 13 / 5


def test_report_from_gates_matches_export():
    model = random_model(2, mode="gated")
    by_gates = sp.report(model)
    by_export = sp.report(sp.SparseModel.from_model(model))
    assert [l.nnz for l in by_gates.layers] == [l.nnz for l in by_export.layers]
    assert by_gates.bias_total == by_export.bias_total


def test_layer_csv(tmp_path):
    rep = sp.report(random_model(1, mode="gated"))
    path = tmp_path / "layers.csv"
    sp.write_layer_csv(path, rep)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,total,nnz,sparsity"
    assert [l.split(",")[0] for l in lines[1:]] == list(dec.LAYER_NAMES)


def _step_both(model, seed, steps=4):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(SMALL.n_pos, SMALL.d_in))
    dense = ev.DenseStepper(model)
    sparse = sp.SparseModel.from_model(model)
    ds, ss = dense.start(feats), sparse.start(feats)
    k = 3
    toks = np.full(1, 1)
    out = []
    for t in range(steps):
        pd, ds = dense.probs(ds, toks)
        ps, ss = sparse.decode_step(ss, toks)
        out.append((pd, ps))
        toks = rng.integers(0, SMALL.v, size=k if t == 0 else len(toks))
        if t == 0:
            ds, ss = dense.select(ds, np.zeros(k, int)), sparse.select(ss, np.zeros(k, int))
    return out


@pytest.mark.parametrize("cell", ["lstm", "gru"])
@pytest.mark.parametrize("mode", ["gated", "masked", "dense"])
def test_sparse_step_matches_masked_dense(cell, mode):
    for seed in range(100 // 6 + 1):
        model = random_model(seed, cell, mode=mode)
        for pd, ps in _step_both(model, seed):
            np.testing.assert_allclose(ps, pd, rtol=1e-9, atol=0)


def test_sparse_step_deterministic():
    model = sp.SparseModel.from_model(random_model(4))
    feats = np.random.default_rng(0).normal(size=(SMALL.n_pos, SMALL.d_in))
    a = model.decode_step(model.start(feats), [1])[0]
    b = model.decode_step(model.start(feats), [1])[0]
    assert np.array_equal(a, b)


def test_sparse_model_file_round_trip(tmp_path):
    model = random_model(6, "gru")
    model.meta["vocab"] = ["x"] * SMALL.v
    sm = sp.SparseModel.from_model(model)
    path = tmp_path / "m.gspm"
    sm.save(path)
    back = sp.SparseModel.load(path)
    assert back.dims == sm.dims and back.cell == "gru" and back.meta == sm.meta
    for n in dec.LAYER_NAMES:
        a, b = sm.layers[n], back.layers[n]
        assert a.shape == b.shape
        assert np.array_equal(a.row_ptr, b.row_ptr) and np.array_equal(a.col_idx, b.col_idx)
        assert a.values.tobytes() == b.values.tobytes()
    for n in sm.biases:
        assert sm.biases[n].tobytes() == back.biases[n].tobytes()
    path2 = tmp_path / "m2.gspm"
    back.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_sparse_model_load_errors(tmp_path):
    bad = tmp_path / "bad.gspm"
    bad.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError):
        sp.SparseModel.load(bad)
    good = tmp_path / "good.gspm"
    sp.SparseModel.from_model(random_model(0)).save(good)
    trunc = tmp_path / "trunc.gspm"
    trunc.write_bytes(good.read_bytes()[:-50])
    with pytest.raises(ValueError):
        sp.SparseModel.load(trunc)


def test_dense_weight_orientation():
    model = random_model(8)
    sm = sp.SparseModel.from_model(model)
    final = model.final_weights()
    for n in dec.LAYER_NAMES:
        assert np.array_equal(sm.dense_weight(n), final[n])
