import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedcap import decoder as dec
from gatedcap.autodiff import Tensor

from conftest import SMALL, random_model


def zero_model(cell="lstm", dims=SMALL):
    model = dec.DecoderModel.init(dims, cell, np.random.default_rng(0))
    for t in list(model.weights.values()) + list(model.biases.values()):
        t.data[:] = 0.0
    return model


def test_layer_names_and_shapes():
    model = dec.DecoderModel.init(SMALL, "lstm", np.random.default_rng(0))
    assert tuple(model.weights) == dec.LAYER_NAMES
    d = SMALL
    assert model.weights["rnn_kernel"].shape == (d.q + d.a + d.r, 4 * d.r)
    gru = dec.DecoderModel.init(SMALL, "gru", np.random.default_rng(0))
    assert gru.weights["rnn_kernel"].shape == (d.q + d.a + d.r, 3 * d.r)
    assert model.weights["rnn_initial_state"].shape == (d.h, d.r)
    assert model.weights["word_embedding"].shape == (d.v, d.q)
    assert model.weights["logits"].shape == (d.r, d.v)


def test_forget_bias_init():
    model = dec.DecoderModel.init(SMALL, "lstm", np.random.default_rng(0))
    b = model.biases["rnn_bias"].data
    r = SMALL.r
    assert np.all(b[r : 2 * r] == 1.0) and np.all(b[:r] == 0) and np.all(b[2 * r :] == 0)


def test_xavier_bounds():
    w = dec.xavier_uniform((30, 20), np.random.default_rng(0))
    assert np.abs(w).max() <= np.sqrt(6 / 50)


def test_init_state_identity_projection():
    dims = dec.Dims(r=4, q=3, a=5, v=6, d_in=4, d_f=4, n_pos=2)
    model = zero_model(dims=dims)
    model.weights["rnn_initial_state"].data[:] = np.eye(4) * np.arange(1, 5)
    layers = model.layers()
    f = Tensor(np.tile(np.eye(4)[0], (1, 2, 1)))  # I_embed = e1 after mean pooling
    state = dec.init_state(layers, f, "lstm")
    np.testing.assert_array_equal(state.h.data[0], model.weights["rnn_initial_state"].data[0])
    assert np.all(state.m.data == 0)
    assert dec.init_state(layers, f, "gru").m is None


def test_init_state_shape_mismatch():
    layers = zero_model().layers()
    with pytest.raises(ValueError):
        dec.init_state(layers, Tensor(np.zeros((1, 3, SMALL.d_f + 1))), "lstm")


def _attn(seed=0):
    model = random_model(seed, mode="dense")
    return model.layers().attn


def test_attention_identical_positions_uniform():
    attn = _attn()
    f = Tensor(np.tile(np.random.default_rng(1).normal(size=SMALL.d_f), (1, SMALL.n_pos, 1)))
    c, w = dec.soft_attention(attn, f, Tensor(np.random.default_rng(2).normal(size=(1, SMALL.r))))
    np.testing.assert_allclose(w.data, 1.0 / SMALL.n_pos, rtol=1e-12)
    value = f.data[0, 0] @ attn.value.data + attn.value_bias.data
    np.testing.assert_allclose(c.data[0], value, rtol=1e-12)


def test_attention_saturated_position():
    dims = SMALL
    model = random_model(0, mode="dense")
    attn = model.layers().attn
    # route a large score to position 1 through the key bias of a one-hot feature direction
    f = np.zeros((1, dims.n_pos, dims.d_f))
    f[0, 1, 0] = 1.0
    attn.key.data[0] = 0.0
    attn.key.data[0, 0] = 1000.0
    attn.mlp.data[:] = 0.0
    attn.mlp.data[0] = 1000.0
    c, w = dec.soft_attention(attn, Tensor(f), Tensor(np.zeros((1, dims.r))))
    assert w.data[0, 1] == pytest.approx(1.0)
    value = f[0, 1] @ attn.value.data + attn.value_bias.data
    np.testing.assert_allclose(c.data[0], value, rtol=1e-9)


@given(st.integers(0, 10_000), st.sampled_from(["lstm", "gru"]))
@settings(max_examples=25)
def test_step_distribution_valid(seed, cell):
    model = random_model(seed, cell, mode="gated")
    rng = np.random.default_rng(seed)
    layers = model.layers(stochastic=True, rng=rng)
    f = dec.encode(layers, rng.normal(size=(2, SMALL.n_pos, SMALL.d_in)))
    memory = dec.attention_memory(layers.attn, f)
    state = dec.init_state(layers, f, cell)
    for _ in range(3):
        p, state = dec.decoder_step(layers, state, memory, rng, True, dec.Dropout(0.3, 0.2))
        assert np.all(p.data >= 0)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)
        _, weights = dec.soft_attention(layers.attn, None, state.h, memory)
        np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-12)
        state.prev_token = rng.integers(0, SMALL.v, size=2)
        assert np.all(np.abs(state.h.data) < 1)


def test_zero_parameters_uniform_output():
    model = zero_model()
    layers = model.layers()
    f = dec.encode(layers, np.random.default_rng(0).normal(size=(1, SMALL.n_pos, SMALL.d_in)))
    memory = dec.attention_memory(layers.attn, f)
    state = dec.init_state(layers, f, "lstm")
    p, new = dec.decoder_step(layers, state, memory)
    assert np.all(new.h.data == 0)
    np.testing.assert_allclose(p.data, 1.0 / SMALL.v, rtol=1e-12)


def test_token_out_of_range():
    model = random_model(0, mode="dense")
    layers = model.layers()
    f = dec.encode(layers, np.zeros((1, SMALL.n_pos, SMALL.d_in)))
    state = dec.init_state(layers, f, "lstm")
    state.prev_token = np.array([SMALL.v])
    with pytest.raises(IndexError):
        dec.decoder_step(layers, state, dec.attention_memory(layers.attn, f))


def test_caption_loss_uniform_predictions():
    model = zero_model()
    tokens = np.array([[1, 5, 6, 2]])
    loss = dec.caption_loss(model, np.zeros((SMALL.n_pos, SMALL.d_in)), tokens, weight_decay=0.0)
    assert loss.item() == pytest.approx(3 * np.log(SMALL.v))
    # weight decay over all-zero weights adds nothing
    assert dec.caption_loss(model, np.zeros((SMALL.n_pos, SMALL.d_in)), tokens, 0.1).item() == loss.item()


def test_caption_loss_token_mean():
    model = zero_model()
    tokens = np.array([[1, 5, 6, 2], [1, 4, 2, 0]])
    feats = np.zeros((2, SMALL.n_pos, SMALL.d_in))
    loss = dec.caption_loss(model, feats, tokens, reduction="token_mean")
    assert loss.item() == pytest.approx(np.log(SMALL.v))
    with pytest.raises(ValueError):
        dec.caption_loss(model, feats, tokens, reduction="mean")


def test_caption_loss_needs_a_target():
    with pytest.raises(ValueError):
        dec.caption_loss(zero_model(), np.zeros((SMALL.n_pos, SMALL.d_in)), np.array([[1]]))


def test_weight_decay_excludes_gates_and_encoder():
    model = random_model(0, mode="gated")
    expected = sum(float(np.sum(p.data**2)) for p in model.decoder_params())
    assert dec.weight_decay_term(model).item() == pytest.approx(expected)


def test_loss_invariant_under_vocabulary_relabeling():
    model = random_model(3, mode="dense")
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(2, SMALL.n_pos, SMALL.d_in))
    tokens = np.array([[1, 5, 7, 9, 2], [1, 8, 4, 2, 0]])
    base = dec.caption_loss(model, feats, tokens).item()
    # permute non-reserved ids consistently in embedding rows, logits columns and targets
    perm = np.arange(SMALL.v)
    perm[4:] = 4 + rng.permutation(SMALL.v - 4)
    inv = np.argsort(perm)
    model.weights["word_embedding"].data[:] = model.weights["word_embedding"].data[inv]
    model.weights["logits"].data[:] = model.weights["logits"].data[:, inv]
    model.biases["logits_bias"].data[:] = model.biases["logits_bias"].data[inv]
    assert dec.caption_loss(model, feats, perm[tokens]).item() == pytest.approx(base, rel=1e-12)


def test_loss_deterministic_given_seed():
    def run():
        model = random_model(7, mode="gated")
        rng = np.random.default_rng(11)
        feats = rng.normal(size=(2, SMALL.n_pos, SMALL.d_in))
        out = []
        for _ in range(100):
            loss = dec.caption_loss(model, feats, np.array([[1, 5, 6, 2], [1, 4, 2, 0]]), 1e-5, rng, True,
                                    dec.Dropout(0.3, 0.1))
            out.append(loss.item())
        return out
    assert run() == run()


def test_masked_forward_equals_zeroed_weights():
    model = random_model(5, mode="masked")
    feats = np.random.default_rng(5).normal(size=(1, SMALL.n_pos, SMALL.d_in))
    tokens = np.array([[1, 4, 6, 2]])
    a = dec.caption_loss(model, feats, tokens).item()
    for n, m in model.masks.items():
        model.weights[n].data *= m
    model.masks = None
    assert dec.caption_loss(model, feats, tokens).item() == a


def test_dims_scaled():
    d = dec.Dims().scaled(0.25)
    assert (d.r, d.q, d.a) == (16, 8, 16)
