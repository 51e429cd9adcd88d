"""The full model: up to two input encoders plus the dual-attention decoder.

A model built with only one encoder is a stand-alone single-task model; the
decoder keeps both context slots either way (the absent one stays zero), so
encoder parameter blobs line up between stand-alone and joint models.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .decoder import Decoder
from .encoders import SpeechEncoder, TextEncoder
from .errors import InputKindError
from .masking import MaskSelection
from .numerics import Param


class Model:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_state = cfg.encoder.d_state
        self.enc_t = (TextEncoder("enc_t", cfg.vocab, cfg.encoder, rng)
                      if cfg.has_text else None)
        self.enc_v = (SpeechEncoder("enc_v", cfg.n_mels, cfg.encoder, rng)
                      if cfg.has_speech else None)
        self.decoder = Decoder("dec", cfg.decoder, d_state, d_state,
                               has_text=cfg.has_text, has_speech=cfg.has_speech,
                               rng=rng)

    def params(self) -> list[Param]:
        out: list[Param] = []
        if self.enc_t is not None:
            out += self.enc_t.params()
        if self.enc_v is not None:
            out += self.enc_v.params()
        return out + self.decoder.params()

    def param_dict(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def _check_inputs(self, tokens, src_mel, mask: MaskSelection) -> None:
        if mask.text_active and (self.enc_t is None or tokens is None):
            raise InputKindError(
                f"mask {mask.value!r} needs a text input and a text encoder")
        if mask.speech_active and (self.enc_v is None or src_mel is None):
            raise InputKindError(
                f"mask {mask.value!r} needs a speech input and a speech encoder")

    def encode(self, tokens, src_mel, mask: MaskSelection, training: bool,
               rng: Optional[np.random.Generator]):
        """Run the encoders the mask asks for; masked sources are skipped."""
        self._check_inputs(tokens, src_mel, mask)
        out_t = cache_t = out_v = cache_v = None
        if mask.text_active:
            out_t, cache_t = self.enc_t.forward(tokens, training, rng)
        if mask.speech_active:
            out_v, cache_v = self.enc_v.forward(src_mel, training, rng)
        return out_t, cache_t, out_v, cache_v

    def forward_teacher(self, tokens: Optional[Sequence[int]],
                        src_mel: Optional[np.ndarray], target: np.ndarray,
                        mask: MaskSelection, training: bool = True,
                        rng: Optional[np.random.Generator] = None):
        out_t, cache_t, out_v, cache_v = self.encode(
            tokens, src_mel, mask, training, rng)
        pred, trace, dec_caches = self.decoder.decode_teacher_forced(
            out_t, out_v, target, mask, training=training, rng=rng)
        return pred, trace, (cache_t, cache_v, dec_caches, mask)

    def backward_teacher(self, dpred: np.ndarray, caches) -> None:
        cache_t, cache_v, dec_caches, mask = caches
        dmem_t, ds_t, dmem_v, ds_v = self.decoder.decode_backward(dpred, dec_caches)
        if mask.text_active:
            self.enc_t.backward(dmem_t, ds_t, cache_t)
        if mask.speech_active:
            self.enc_v.backward(dmem_v, ds_v, cache_v)

    def generate(self, tokens=None, src_mel=None,
                 mask: MaskSelection = MaskSelection.BOTH, max_steps: int = 200,
                 prenet_dropout: bool = True,
                 rng: Optional[np.random.Generator] = None):
        """Free-running synthesis/conversion; encoders run in inference mode."""
        out_t, _, out_v, _ = self.encode(tokens, src_mel, mask,
                                         training=False, rng=rng)
        return self.decoder.generate(out_t, out_v, mask, max_steps,
                                     prenet_dropout=prenet_dropout, rng=rng)
