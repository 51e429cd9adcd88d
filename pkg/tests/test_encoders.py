"""Tests for the two input encoders and the CBHG block."""

import numpy as np
import pytest

from msseq.config import EncoderConfig
from msseq.errors import DimensionError
from msseq.encoders import CBHG, PreNet, SpeechEncoder, TextEncoder
from msseq.numerics import sigmoid


def small_cfg(d_gru=3, dropout=0.0):
    return EncoderConfig(d_embed=4, d_prenet=3, bank_K=2, conv_channels=3,
                         highway_layers=2, d_gru=d_gru, dropout_rate=dropout)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# pre-net
# ---------------------------------------------------------------------------


def test_prenet_zero_weights_zero_output():
    pn = PreNet("p", 4, 3, rate=0.5, rng=rng(1))
    for p in pn.params():
        p.value[...] = 0.0
    y, _ = pn.forward(rng(2).standard_normal((3, 4)), training=False, rng=None)
    assert np.array_equal(y, np.zeros((3, 3)))


def test_prenet_inference_equals_rate_zero_training():
    pn = PreNet("p", 4, 3, rate=0.5, rng=rng(1))
    pn0 = PreNet("q", 4, 3, rate=0.0, rng=rng(1))
    x = rng(2).standard_normal((3, 4))
    y_inf, _ = pn.forward(x, training=False, rng=None)
    y_tr0, _ = pn0.forward(x, training=True, rng=rng(3))
    assert np.array_equal(y_inf, y_tr0)


# ---------------------------------------------------------------------------
# CBHG
# ---------------------------------------------------------------------------


def test_cbhg_length_one():
    cbhg = CBHG("c", 3, small_cfg(), rng(5))
    states, final, _ = cbhg.forward(rng(6).standard_normal((1, 3)))
    assert states.shape == (1, 6)
    assert final.shape == (6,)


def test_cbhg_zero_params_zero_states():
    cbhg = CBHG("c", 3, small_cfg(), rng(5))
    for p in cbhg.params():
        p.value[...] = 0.0
    states, final, _ = cbhg.forward(rng(6).standard_normal((4, 3)))
    assert np.array_equal(states, np.zeros((4, 6)))
    assert np.array_equal(final, np.zeros(6))


def test_cbhg_length_preserved():
    cbhg = CBHG("c", 3, small_cfg(), rng(5))
    for T in (1, 2, 5, 9):
        states, _, _ = cbhg.forward(rng(T).standard_normal((T, 3)))
        assert states.shape[0] == T


def test_cbhg_matches_straight_line_reference():
    """Seed-5 forward against an independently written pipeline."""
    cfg = small_cfg()
    cbhg = CBHG("c", 3, cfg, rng(5))
    x = rng(7).standard_normal((5, 3))
    states, final, _ = cbhg.forward(x)

    def conv_same(xin, w, b):
        k = w.shape[0]
        T = xin.shape[0]
        xp = np.vstack([np.zeros(((k - 1) // 2, xin.shape[1])), xin,
                        np.zeros((k // 2, xin.shape[1]))])
        out = np.tile(b, (T, 1))
        for t in range(T):
            for i in range(k):
                out[t] += xp[t + i] @ w[i]
        return out

    # conv bank (widths 1..K, ReLU), concatenated
    bank = np.concatenate(
        [np.maximum(conv_same(x, w.value, b.value), 0.0)
         for w, b in zip(cbhg.bank.filters, cbhg.bank.biases)], axis=1)
    # width-2 stride-1 max pool, last frame self-padded
    pooled = np.maximum(bank, np.vstack([bank[1:], bank[-1:]]))
    p1 = np.maximum(conv_same(pooled, cbhg.proj1.w.value, cbhg.proj1.b.value), 0.0)
    p2 = conv_same(p1, cbhg.proj2.w.value, cbhg.proj2.b.value)
    h = x + p2
    if cbhg.pre_highway is not None:
        h = h @ cbhg.pre_highway.W.value + cbhg.pre_highway.b.value
    for layer in cbhg.highway:
        hh = np.maximum(h @ layer.h.W.value + layer.h.b.value, 0.0)
        tt = sigmoid(h @ layer.t.W.value + layer.t.b.value)
        h = tt * hh + (1.0 - tt) * h
    # bidirectional GRU
    def gru(cell, xs, order):
        st = np.zeros(cfg.d_gru)
        out = np.zeros((len(order), cfg.d_gru))
        for t in order:
            z = sigmoid(xs[t] @ cell.Wz.value + st @ cell.Uz.value + cell.bz.value)
            r = sigmoid(xs[t] @ cell.Wr.value + st @ cell.Ur.value + cell.br.value)
            c = np.tanh(xs[t] @ cell.Wh.value + (r * st) @ cell.Uh.value
                        + cell.bh.value)
            st = (1.0 - z) * st + z * c
            out[t] = st
        return out, st

    fwd, f_last = gru(cbhg.rnn.fwd, h, range(5))
    bwd, b_last = gru(cbhg.rnn.bwd, h, range(4, -1, -1))
    ref_states = np.concatenate([fwd, bwd], axis=1)
    ref_final = np.concatenate([f_last, b_last])
    assert np.max(np.abs(states - ref_states)) < 1e-10
    assert np.max(np.abs(final - ref_final)) < 1e-10


def test_cbhg_rejects_empty():
    cbhg = CBHG("c", 3, small_cfg(), rng(5))
    with pytest.raises(DimensionError):
        cbhg.forward(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def test_text_encoder_single_token_shape():
    enc = TextEncoder("t", 5, small_cfg(), rng(9))
    out, _ = enc.forward([2], training=False, rng=None)
    assert out.outputs.shape == (1, 6)
    assert out.state.shape == (6,)


def test_text_encoder_deterministic_inference():
    enc = TextEncoder("t", 5, small_cfg(), rng(9))
    a, _ = enc.forward([1, 2, 3], training=False, rng=None)
    b, _ = enc.forward([1, 2, 3], training=False, rng=None)
    assert np.array_equal(a.outputs, b.outputs)
    assert np.array_equal(a.state, b.state)


def test_text_encoder_output_length_matches_input():
    enc = TextEncoder("t", 5, small_cfg(), rng(9))
    for M in (1, 3, 7):
        out, _ = enc.forward(list(range(M % 5, M % 5 + 1)) * M, training=False,
                             rng=None)
        assert out.outputs.shape[0] == M


def test_text_encoder_rejects_unknown_symbol():
    enc = TextEncoder("t", 5, small_cfg(), rng(9))
    with pytest.raises(DimensionError):
        enc.forward([0, 5], training=False, rng=None)
    with pytest.raises(DimensionError):
        enc.forward([], training=False, rng=None)


def test_speech_encoder_single_frame_shape():
    enc = SpeechEncoder("v", 4, small_cfg(), rng(10))
    out, _ = enc.forward(np.ones((1, 4)), training=False, rng=None)
    assert out.outputs.shape == (1, 6)


def test_speech_encoder_zero_everything():
    enc = SpeechEncoder("v", 4, small_cfg(), rng(10))
    for p in enc.params():
        p.value[...] = 0.0
    out, _ = enc.forward(np.zeros((3, 4)), training=False, rng=None)
    assert np.array_equal(out.outputs, np.zeros((3, 6)))


def test_speech_encoder_output_length_matches_input():
    enc = SpeechEncoder("v", 4, small_cfg(), rng(10))
    for N in (1, 4, 8):
        out, _ = enc.forward(np.ones((N, 4)), training=False, rng=None)
        assert out.outputs.shape[0] == N


def test_speech_encoder_rejects_band_mismatch():
    enc = SpeechEncoder("v", 4, small_cfg(), rng(10))
    with pytest.raises(DimensionError):
        enc.forward(np.ones((3, 5)), training=False, rng=None)


def test_encoders_do_not_share_parameters():
    """Mutating one encoder's parameters leaves the other's output alone."""
    r = rng(11)
    enc_t = TextEncoder("t", 5, small_cfg(), r)
    enc_v = SpeechEncoder("v", 4, small_cfg(), r)
    names_t = {p.name for p in enc_t.params()}
    names_v = {p.name for p in enc_v.params()}
    assert not names_t & names_v
    frames = rng(12).standard_normal((3, 4))
    before, _ = enc_v.forward(frames, training=False, rng=None)
    for p in enc_t.params():
        p.value[...] = 99.0
    after, _ = enc_v.forward(frames, training=False, rng=None)
    assert np.array_equal(before.outputs, after.outputs)


def test_swapping_parameters_changes_outputs():
    cfg = small_cfg()
    enc_a = SpeechEncoder("a", 4, cfg, rng(13))
    enc_b = SpeechEncoder("b", 4, cfg, rng(14))
    frames = rng(15).standard_normal((3, 4))
    out_a, _ = enc_a.forward(frames, training=False, rng=None)
    for pa, pb in zip(enc_a.params(), enc_b.params()):
        pa.value[...] = pb.value
    out_a2, _ = enc_a.forward(frames, training=False, rng=None)
    assert not np.array_equal(out_a.outputs, out_a2.outputs)
