"""Finite-difference verification of every layer's backward pass.

Each check builds a tiny random instance, projects its output to a scalar
with a fixed random weighting, accumulates analytic gradients through the
hand-written backward, and compares against central differences over every
parameter element (inputs included, wrapped as parameters).

Two conditioning tricks keep the comparison honest.  First, instances whose
ReLU or maxpool pre-activations land too close to a kink are resampled:
central differences straddle the kink there and disagree with the one-sided
analytic gradient even when the backward is correct.  Second, small quadratic and
linear terms on every parameter keep all gradient elements bounded away
from zero, so finite-difference roundoff on near-zero elements cannot
dominate the relative error, while a real backward bug still exceeds the
regularizer by orders of magnitude.
"""

from __future__ import annotations

import numpy as np

from .config import DecoderConfig, EncoderConfig, ModelConfig
from .decoder import Attention, Decoder
from .encoders import PreNet
from .masking import MaskSelection
from .model import Model
from .numerics import (Affine, BiGRU, Conv1dBank, Conv1dSame, GRUCell,
                       HighwayLayer, Param, grad_check, kink_margins,
                       maxpool1d_same, maxpool1d_same_backward, uniform_init)

DEFAULT_THRESHOLD = 1e-4
# Pre-activations closer to a ReLU kink (or maxpool tie) than this get the
# instance resampled; parameter perturbations of size epsilon move them by
# far less, so a surviving instance never crosses the kink during checking.
MIN_KINK_MARGIN = 1e-3
# Gradient elements below this floor are dominated by the roundoff of the
# central difference itself (~|loss|*eps_machine/epsilon); instances that
# produce one get resampled rather than tolerated.
GRAD_FLOOR = 1e-5
MAX_RESAMPLES = 64
REG = 5e-4
LIN = 1e-3


def _run_check(build, seed: int, tag: int, epsilon: float) -> float:
    """Resample the instance until it is well conditioned, then compare
    analytic gradients against central differences."""
    for attempt in range(MAX_RESAMPLES):
        rng = np.random.default_rng([seed, tag, attempt])
        data_loss, backward, params = build(rng)
        with kink_margins() as margins:
            data_loss()
        for p in params:
            p.zero_grad()
        backward()
        for p in params:
            p.grad += 2.0 * REG * p.value + LIN
        min_grad = min(np.min(np.abs(p.grad)) for p in params)
        if (min(margins, default=np.inf) >= MIN_KINK_MARGIN
                and min_grad >= GRAD_FLOOR):
            break

    def loss():
        return data_loss() + sum(
            REG * (p.value ** 2).sum() + LIN * p.value.sum()
            for p in params)

    return grad_check(loss, params, epsilon)


def _build_affine(rng):
    layer = Affine("affine", 3, 4, rng)
    x = Param("x", rng.standard_normal((2, 3)))
    proj = rng.standard_normal((2, 4))
    params = layer.params() + [x]

    def loss():
        y, _ = layer.forward(x.value)
        return float((proj * y).sum())

    def backward():
        y, cache = layer.forward(x.value)
        x.grad += layer.backward(proj, cache)

    return loss, backward, params


def _build_gru_step(rng):
    cell = GRUCell("gru", 3, 4, rng)
    x = Param("x", rng.standard_normal(3))
    h = Param("h", rng.standard_normal(4))
    proj = rng.standard_normal(4)
    params = cell.params() + [x, h]

    def loss():
        hn, _ = cell.forward(x.value, h.value)
        return float((proj * hn).sum())

    def backward():
        hn, cache = cell.forward(x.value, h.value)
        dx, dh = cell.backward(proj, cache)
        x.grad += dx
        h.grad += dh

    return loss, backward, params


def _build_bigru(rng):
    layer = BiGRU("bigru", 3, 2, rng)
    x = Param("x", rng.standard_normal((4, 3)))
    proj_s = rng.standard_normal((4, 4))
    proj_f = rng.standard_normal(4)
    params = layer.params() + [x]

    def loss():
        states, final, _ = layer.forward(x.value)
        return float((proj_s * states).sum() + (proj_f * final).sum())

    def backward():
        states, final, cache = layer.forward(x.value)
        x.grad += layer.backward(proj_s, proj_f, cache)

    return loss, backward, params


def _build_conv_bank(rng):
    layer = Conv1dBank("bank", 3, 2, 2, rng)
    x = Param("x", rng.standard_normal((5, 3)))
    proj = rng.standard_normal((5, 4))
    params = layer.params() + [x]

    def loss():
        y, _ = layer.forward(x.value)
        return float((proj * y).sum())

    def backward():
        y, cache = layer.forward(x.value)
        x.grad += layer.backward(proj, cache)

    return loss, backward, params


def _build_conv_proj(rng):
    layer = Conv1dSame("proj", 3, 2, 3, relu=True, rng=rng)
    x = Param("x", rng.standard_normal((5, 3)))
    proj = rng.standard_normal((5, 2))
    params = layer.params() + [x]

    def loss():
        y, _ = layer.forward(x.value)
        return float((proj * y).sum())

    def backward():
        y, cache = layer.forward(x.value)
        x.grad += layer.backward(proj, cache)

    return loss, backward, params


def _build_maxpool(rng):
    x = Param("x", rng.standard_normal((6, 3)))
    proj = rng.standard_normal((6, 3))

    def loss():
        y, _ = maxpool1d_same(x.value)
        return float((proj * y).sum())

    def backward():
        _, take_first = maxpool1d_same(x.value)
        x.grad += maxpool1d_same_backward(proj, take_first)

    return loss, backward, [x]


def _build_highway(rng):
    layer = HighwayLayer("hw", 4, rng)
    x = Param("x", rng.standard_normal((3, 4)))
    proj = rng.standard_normal((3, 4))
    params = layer.params() + [x]

    def loss():
        y, _ = layer.forward(x.value)
        return float((proj * y).sum())

    def backward():
        y, cache = layer.forward(x.value)
        x.grad += layer.backward(proj, cache)

    return loss, backward, params


def _build_prenet(rng):
    layer = PreNet("pn", 4, 3, rate=0.5, rng=rng)
    x = Param("x", rng.standard_normal((3, 4)))
    proj = rng.standard_normal((3, 3))
    params = layer.params() + [x]

    def loss():
        y, _ = layer.forward(x.value, training=False, rng=None)
        return float((proj * y).sum())

    def backward():
        y, cache = layer.forward(x.value, training=False, rng=None)
        x.grad += layer.backward(proj, cache)

    return loss, backward, params


def _build_attention(rng):
    layer = Attention("att", 3, 4, 3, rng)
    h = Param("h", rng.standard_normal(3))
    mem = Param("mem", rng.standard_normal((5, 4)))
    proj = rng.standard_normal(4)
    params = layer.params() + [h, mem]

    def loss():
        _, ctx, _ = layer.forward(h.value, mem.value)
        return float((proj * ctx).sum())

    def backward():
        _, ctx, cache = layer.forward(h.value, mem.value)
        dmem = np.zeros_like(mem.value)
        h.grad += layer.backward(proj, cache, dmem)
        mem.grad += dmem

    return loss, backward, params


def tiny_model_config(bank_K: int = 2) -> ModelConfig:
    enc = EncoderConfig(d_embed=3, d_prenet=3, bank_K=bank_K, conv_channels=3,
                        highway_layers=1, d_gru=3, dropout_rate=0.0)
    dec = DecoderConfig(d_prenet=3, d_attn_rnn=4, d_dec_rnn=4, dec_layers=2,
                        r=2, n_mels=4, dropout_rate=0.0)
    return ModelConfig(vocab=5, n_mels=4, encoder=enc, decoder=dec)


def _build_decoder_unrolled(rng, mask: MaskSelection = MaskSelection.BOTH):
    """Squared-error loss through a 3-step teacher-forced decode of the full
    dual-attention model, including both encoders."""
    model = Model(tiny_model_config(), rng)
    # Zero biases plus the zero GO frame would park several pre-activations
    # exactly at 0; randomizing every parameter spreads them out.
    for p in model.params():
        p.value[...] = 0.3 * rng.standard_normal(p.value.shape)
    tokens = rng.integers(0, 5, size=4)
    src_mel = rng.standard_normal((5, 4))
    target = rng.standard_normal((6, 4))  # 3 steps at r=2
    params = model.params()

    def forward():
        pred, _, caches = model.forward_teacher(
            tokens, src_mel, target, mask, training=False, rng=None)
        return pred, caches

    def loss():
        pred, _ = forward()
        return float(0.5 * ((pred - target) ** 2).sum())

    def backward():
        pred, caches = forward()
        model.backward_teacher(pred - target, caches)

    return loss, backward, params


_BUILDERS = {
    "affine": (1, _build_affine),
    "gru_step": (2, _build_gru_step),
    "bigru": (3, _build_bigru),
    "conv_bank": (4, _build_conv_bank),
    "conv_proj": (5, _build_conv_proj),
    "maxpool": (6, _build_maxpool),
    "highway": (7, _build_highway),
    "prenet": (8, _build_prenet),
    "attention": (9, _build_attention),
    "decoder_unrolled": (10, _build_decoder_unrolled),
}


def check_layer(name: str, seed: int, epsilon: float = 1e-5) -> float:
    tag, build = _BUILDERS[name]
    return _run_check(build, seed, tag, epsilon)


LAYER_CHECKS = {name: (lambda seed, epsilon=1e-5, _n=name:
                       check_layer(_n, seed, epsilon))
                for name in _BUILDERS}


def run_all_checks(seed: int = 1, epsilon: float = 1e-5) -> dict[str, float]:
    return {name: check_layer(name, seed, epsilon) for name in _BUILDERS}
