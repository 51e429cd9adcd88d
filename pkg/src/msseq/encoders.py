"""The two symmetric input encoders: symbol-sequence and source-spectrogram.

Each encoder is a pre-net (single dense + ReLU + dropout) followed by a CBHG
block (convolution bank, max pool, projection convolutions, residual,
highway stack, bidirectional GRU). The two encoders share architecture but
never share parameter storage.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import EncoderConfig
from .errors import DimensionError
from .numerics import (Affine, BiGRU, Conv1dBank, Conv1dSame, HighwayLayer,
                       Param, dropout_mask, maxpool1d_same,
                       maxpool1d_same_backward, record_kink_margin,
                       uniform_init)


@dataclasses.dataclass
class EncoderOutput:
    """Final state vector and per-position output sequence of one encoder."""

    state: np.ndarray     # [2*d_gru]
    outputs: np.ndarray   # [len, 2*d_gru]


class PreNet:
    """Bottleneck dense layer with ReLU and inverted dropout."""

    def __init__(self, name: str, d_in: int, d_out: int, rate: float,
                 rng: np.random.Generator):
        self.fc = Affine(f"{name}.fc", d_in, d_out, rng)
        self.rate = rate

    def params(self) -> list[Param]:
        return self.fc.params()

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator):
        pre, fc_cache = self.fc.forward(x)
        record_kink_margin(pre)
        h = np.maximum(pre, 0.0)
        mask = dropout_mask(h.shape, self.rate, rng, training=training)
        return h * mask, (pre, mask, fc_cache)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        pre, mask, fc_cache = cache
        return self.fc.backward(dy * mask * (pre > 0.0), fc_cache)


class CBHG:
    """Convolution bank + highway + bidirectional GRU, length-preserving.

    conv bank -> width-2 max pool -> two width-3 projection convolutions
    (ReLU then linear, back to the input dim) -> residual add of the input
    -> affine to the highway dim when the dims differ -> highway stack ->
    bi-GRU.
    """

    def __init__(self, name: str, d_in: int, cfg: EncoderConfig,
                 rng: np.random.Generator):
        self.d_in = d_in
        d_hw = cfg.d_gru
        self.bank = Conv1dBank(f"{name}.bank", d_in, cfg.bank_K,
                               cfg.conv_channels, rng)
        self.proj1 = Conv1dSame(f"{name}.proj1", cfg.bank_K * cfg.conv_channels,
                                cfg.conv_channels, 3, relu=True, rng=rng)
        self.proj2 = Conv1dSame(f"{name}.proj2", cfg.conv_channels, d_in, 3,
                                relu=False, rng=rng)
        self.pre_highway = (Affine(f"{name}.pre_hw", d_in, d_hw, rng)
                            if d_in != d_hw else None)
        self.highway = [HighwayLayer(f"{name}.hw{i}", d_hw, rng)
                        for i in range(cfg.highway_layers)]
        self.rnn = BiGRU(f"{name}.rnn", d_hw, cfg.d_gru, rng)

    def params(self) -> list[Param]:
        out = self.bank.params() + self.proj1.params() + self.proj2.params()
        if self.pre_highway is not None:
            out += self.pre_highway.params()
        for hw in self.highway:
            out += hw.params()
        return out + self.rnn.params()

    def forward(self, x: np.ndarray):
        if x.shape[0] < 1:
            raise DimensionError("CBHG requires a non-empty sequence")
        bank_out, bank_cache = self.bank.forward(x)
        pooled, pool_cache = maxpool1d_same(bank_out)
        p1, p1_cache = self.proj1.forward(pooled)
        p2, p2_cache = self.proj2.forward(p1)
        res = x + p2
        if self.pre_highway is not None:
            h, pre_hw_cache = self.pre_highway.forward(res)
        else:
            h, pre_hw_cache = res, None
        hw_caches = []
        for layer in self.highway:
            h, c = layer.forward(h)
            hw_caches.append(c)
        states, final, rnn_cache = self.rnn.forward(h)
        return states, final, (bank_cache, pool_cache, p1_cache, p2_cache,
                               pre_hw_cache, hw_caches, rnn_cache)

    def backward(self, dstates: np.ndarray, dfinal: np.ndarray, cache) -> np.ndarray:
        (bank_cache, pool_cache, p1_cache, p2_cache, pre_hw_cache, hw_caches,
         rnn_cache) = cache
        dh = self.rnn.backward(dstates, dfinal, rnn_cache)
        for layer, c in zip(reversed(self.highway), reversed(hw_caches)):
            dh = layer.backward(dh, c)
        if self.pre_highway is not None:
            dres = self.pre_highway.backward(dh, pre_hw_cache)
        else:
            dres = dh
        dx = dres.copy()
        dp1 = self.proj2.backward(dres, p2_cache)
        dpool = self.proj1.backward(dp1, p1_cache)
        dbank = maxpool1d_same_backward(dpool, pool_cache)
        dx += self.bank.backward(dbank, bank_cache)
        return dx


class TextEncoder:
    """Symbol-id sequence -> embedding lookup -> pre-net -> CBHG."""

    def __init__(self, name: str, vocab: int, cfg: EncoderConfig,
                 rng: np.random.Generator):
        self.vocab = vocab
        self.embed = Param(f"{name}.embed", uniform_init(rng, (vocab, cfg.d_embed)))
        self.prenet = PreNet(f"{name}.prenet", cfg.d_embed, cfg.d_prenet,
                             cfg.dropout_rate, rng)
        self.cbhg = CBHG(f"{name}.cbhg", cfg.d_prenet, cfg, rng)

    def params(self) -> list[Param]:
        return [self.embed] + self.prenet.params() + self.cbhg.params()

    def forward(self, tokens, training: bool, rng: np.random.Generator):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size < 1:
            raise DimensionError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise DimensionError(
                f"symbol id out of range [0, {self.vocab}): {tokens}")
        x = self.embed.value[tokens]
        p, pn_cache = self.prenet.forward(x, training, rng)
        states, final, cbhg_cache = self.cbhg.forward(p)
        return EncoderOutput(final, states), (tokens, pn_cache, cbhg_cache)

    def backward(self, doutputs: np.ndarray, dstate: np.ndarray, cache) -> None:
        tokens, pn_cache, cbhg_cache = cache
        dp = self.cbhg.backward(doutputs, dstate, cbhg_cache)
        dx = self.prenet.backward(dp, pn_cache)
        np.add.at(self.embed.grad, tokens, dx)


class SpeechEncoder:
    """Source spectrogram frames -> pre-net -> CBHG."""

    def __init__(self, name: str, n_mels: int, cfg: EncoderConfig,
                 rng: np.random.Generator):
        self.n_mels = n_mels
        self.prenet = PreNet(f"{name}.prenet", n_mels, cfg.d_prenet,
                             cfg.dropout_rate, rng)
        self.cbhg = CBHG(f"{name}.cbhg", cfg.d_prenet, cfg, rng)

    def params(self) -> list[Param]:
        return self.prenet.params() + self.cbhg.params()

    def forward(self, frames: np.ndarray, training: bool,
                rng: np.random.Generator):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DimensionError("speech input must be a non-empty [N, n_mels] array")
        if frames.shape[1] != self.n_mels:
            raise DimensionError(
                f"speech input has {frames.shape[1]} bands, config says {self.n_mels}")
        p, pn_cache = self.prenet.forward(frames, training, rng)
        states, final, cbhg_cache = self.cbhg.forward(p)
        return EncoderOutput(final, states), (pn_cache, cbhg_cache)

    def backward(self, doutputs: np.ndarray, dstate: np.ndarray, cache) -> None:
        pn_cache, cbhg_cache = cache
        dp = self.cbhg.backward(doutputs, dstate, cbhg_cache)
        self.prenet.backward(dp, pn_cache)
