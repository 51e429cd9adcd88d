"""Dual-attention autoregressive decoder.

One decoder step: pre-net on the previous output frame, an attention GRU,
two independent additive-attention reads (one per source), then a residual
GRU stack and a dense layer emitting `r` spectrogram frames. A masked
source contributes an exactly-zero context vector, both as RNN input and in
the carried state, so outputs are bitwise-independent of masked inputs and
no gradient reaches a masked encoder.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .config import DecoderConfig
from .encoders import EncoderOutput, PreNet
from .errors import DimensionError, InputKindError, NumericsError
from .masking import MaskSelection
from .numerics import Affine, GRUCell, Param, check_finite, softmax, \
    softmax_backward, uniform_init


class Attention:
    """Additive (tanh) attention scorer with a learned memory projection.

    score_j = v . tanh(h W + o_j U + b); weights = softmax(score);
    context = sum_j weights_j * o_j.
    """

    def __init__(self, name: str, d_query: int, d_mem: int, d_score: int,
                 rng: np.random.Generator):
        self.W = Param(f"{name}.W", uniform_init(rng, (d_query, d_score)))
        self.U = Param(f"{name}.U", uniform_init(rng, (d_mem, d_score)))
        self.v = Param(f"{name}.v", uniform_init(rng, (d_score,)))
        self.b = Param(f"{name}.b", np.zeros(d_score))

    def params(self) -> list[Param]:
        return [self.W, self.U, self.v, self.b]

    def forward(self, h: np.ndarray, memory: np.ndarray):
        if memory.ndim != 2 or memory.shape[0] < 1:
            raise DimensionError("attention memory must be a non-empty [L, d] array")
        act = np.tanh(h @ self.W.value + memory @ self.U.value + self.b.value)
        weights = softmax(act @ self.v.value)
        context = weights @ memory
        return weights, context, (h, memory, act, weights)

    def backward(self, dcontext: np.ndarray, cache, dmemory: np.ndarray) -> np.ndarray:
        """Returns dL/dh; adds the memory gradient into `dmemory` in place."""
        h, memory, act, weights = cache
        dw = memory @ dcontext
        dmemory += np.outer(weights, dcontext)
        de = softmax_backward(weights, dw)
        self.v.grad += act.T @ de
        dact = np.outer(de, self.v.value) * (1.0 - act * act)
        dq = dact.sum(axis=0)
        self.b.grad += dq
        self.U.grad += memory.T @ dact
        dmemory += dact @ self.U.value.T
        self.W.grad += np.outer(h, dq)
        return dq @ self.W.value.T


@dataclasses.dataclass
class DecoderState:
    """Carried state between decoder steps."""

    h_a: np.ndarray            # attention-RNN state
    h_d: list[np.ndarray]      # per-layer decoder-RNN states
    c_t: np.ndarray            # previous text context (zero when masked)
    c_v: np.ndarray            # previous speech context (zero when masked)
    y_prev: np.ndarray         # previous output frame (GO frame at k=0)
    k: int = 0


@dataclasses.dataclass
class AlignmentTrace:
    """Per-step attention weights for both sources, for diagnostics."""

    mask: MaskSelection
    text_weights: list[Optional[np.ndarray]] = dataclasses.field(default_factory=list)
    speech_weights: list[Optional[np.ndarray]] = dataclasses.field(default_factory=list)

    def csv_rows(self):
        """Rows of (step, source, position, weight); masked steps emit nothing."""
        for k, (wt, wv) in enumerate(zip(self.text_weights, self.speech_weights)):
            if wt is not None:
                for j, w in enumerate(wt):
                    yield k, "t", j, float(w)
            if wv is not None:
                for j, w in enumerate(wv):
                    yield k, "v", j, float(w)


def _require_inputs(enc_t, enc_v, mask: MaskSelection) -> None:
    if mask.text_active and enc_t is None:
        raise InputKindError(f"mask {mask.value!r} requires a text input")
    if mask.speech_active and enc_v is None:
        raise InputKindError(f"mask {mask.value!r} requires a speech input")


class Decoder:
    """The full dual-attention decoder with explicit backward passes."""

    def __init__(self, name: str, cfg: DecoderConfig, d_state_t: int,
                 d_state_v: int, has_text: bool, has_speech: bool,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.d_state_t, self.d_state_v = d_state_t, d_state_v
        self.has_text, self.has_speech = has_text, has_speech
        d_ctx = d_state_t + d_state_v
        self.prenet = PreNet(f"{name}.prenet", cfg.n_mels, cfg.d_prenet,
                             cfg.dropout_rate, rng)
        self.init_fc = Affine(f"{name}.init_fc", d_ctx, cfg.d_attn_rnn, rng)
        self.att_rnn = GRUCell(f"{name}.att_rnn", cfg.d_prenet + d_ctx,
                               cfg.d_attn_rnn, rng)
        self.att_t = (Attention(f"{name}.att_t", cfg.d_attn_rnn, d_state_t,
                                cfg.d_attn_rnn, rng) if has_text else None)
        self.att_v = (Attention(f"{name}.att_v", cfg.d_attn_rnn, d_state_v,
                                cfg.d_attn_rnn, rng) if has_speech else None)
        self.input_fc = Affine(f"{name}.input_fc", cfg.d_attn_rnn + d_ctx,
                               cfg.d_dec_rnn, rng)
        self.dec_rnn = [GRUCell(f"{name}.dec_rnn{i}", cfg.d_dec_rnn,
                                cfg.d_dec_rnn, rng)
                        for i in range(cfg.dec_layers)]
        self.fc = Affine(f"{name}.fc", cfg.d_dec_rnn, cfg.r * cfg.n_mels, rng)

    def params(self) -> list[Param]:
        out = self.prenet.params() + self.init_fc.params() + self.att_rnn.params()
        if self.att_t is not None:
            out += self.att_t.params()
        if self.att_v is not None:
            out += self.att_v.params()
        out += self.input_fc.params()
        for cell in self.dec_rnn:
            out += cell.params()
        return out + self.fc.params()

    # -- state initialization ------------------------------------------------

    def init_state(self, enc_t: Optional[EncoderOutput],
                   enc_v: Optional[EncoderOutput], mask: MaskSelection):
        """First attention-RNN state from the (masked) final encoder states."""
        _require_inputs(enc_t, enc_v, mask)
        s_t = (enc_t.state if (enc_t is not None and mask.text_active)
               else np.zeros(self.d_state_t))
        s_v = (enc_v.state if (enc_v is not None and mask.speech_active)
               else np.zeros(self.d_state_v))
        s = np.concatenate([s_t, s_v])
        pre, fc_cache = self.init_fc.forward(s)
        h_a = np.tanh(pre)
        state = DecoderState(
            h_a=h_a,
            h_d=[np.zeros(self.cfg.d_dec_rnn) for _ in self.dec_rnn],
            c_t=np.zeros(self.d_state_t),
            c_v=np.zeros(self.d_state_v),
            y_prev=np.zeros(self.cfg.n_mels),
            k=0,
        )
        return state, (h_a, fc_cache)

    def init_state_backward(self, dh_a: np.ndarray, init_cache,
                            mask: MaskSelection):
        """Returns (ds_t, ds_v); entries for inactive sources are None."""
        h_a, fc_cache = init_cache
        ds = self.init_fc.backward(dh_a * (1.0 - h_a * h_a), fc_cache)
        ds_t = ds[:self.d_state_t] if mask.text_active else None
        ds_v = ds[self.d_state_t:] if mask.speech_active else None
        return ds_t, ds_v

    # -- one step ------------------------------------------------------------

    def step(self, st: DecoderState, enc_t: Optional[EncoderOutput],
             enc_v: Optional[EncoderOutput], mask: MaskSelection,
             training: bool, rng: Optional[np.random.Generator]):
        """One decoder step emitting r frames.

        Masked sources are skipped outright: their context stays the zero
        vector and their trace weights are None.
        """
        _require_inputs(enc_t, enc_v, mask)
        o_p, pn_cache = self.prenet.forward(st.y_prev, training, rng)
        x_a = np.concatenate([o_p, st.c_t, st.c_v])
        h_a, att_rnn_cache = self.att_rnn.forward(x_a, st.h_a)

        if mask.text_active:
            w_t, c_t, att_t_cache = self.att_t.forward(h_a, enc_t.outputs)
        else:
            w_t, c_t, att_t_cache = None, np.zeros(self.d_state_t), None
        if mask.speech_active:
            w_v, c_v, att_v_cache = self.att_v.forward(h_a, enc_v.outputs)
        else:
            w_v, c_v, att_v_cache = None, np.zeros(self.d_state_v), None

        x_d = np.concatenate([h_a, c_t, c_v])
        u, in_cache = self.input_fc.forward(x_d)
        h_d_new, rnn_caches, residuals = [], [], [u]
        for cell, h_prev in zip(self.dec_rnn, st.h_d):
            h_i, c = cell.forward(u, h_prev)
            h_d_new.append(h_i)
            rnn_caches.append(c)
            u = u + h_i
            residuals.append(u)
        flat, fc_cache = self.fc.forward(u)
        frames = flat.reshape(self.cfg.r, self.cfg.n_mels)
        if not np.all(np.isfinite(frames)):
            raise NumericsError(f"non-finite decoder output at step {st.k + 1}")

        st_new = DecoderState(h_a=h_a, h_d=h_d_new, c_t=c_t, c_v=c_v,
                              y_prev=frames[-1], k=st.k + 1)
        cache = (pn_cache, att_rnn_cache, att_t_cache, att_v_cache, in_cache,
                 rnn_caches, fc_cache)
        return frames, st_new, (w_t, w_v), cache

    def step_backward(self, dframes: np.ndarray, dcarry, cache,
                      mask: MaskSelection, dmem_t, dmem_v):
        """Backward through one step.

        `dcarry` is (dh_a, dh_d list, dc_t, dc_v) flowing in from step k+1;
        returns the same tuple for step k-1. Memory gradients accumulate into
        dmem_t / dmem_v (None for inactive sources).
        """
        (pn_cache, att_rnn_cache, att_t_cache, att_v_cache, in_cache,
         rnn_caches, fc_cache) = cache
        dh_a_next, dh_d_next, dc_t_next, dc_v_next = dcarry

        du = self.fc.backward(dframes.reshape(-1), fc_cache)
        dh_d_prev = []
        for cell, c, dh_carry in zip(reversed(self.dec_rnn),
                                     reversed(rnn_caches),
                                     reversed(dh_d_next)):
            # residual stream: u_i = u_{i-1} + h_i, so dh_i sees du plus BPTT carry
            dx, dh_prev = cell.backward(du + dh_carry, c)
            du = du + dx
            dh_d_prev.append(dh_prev)
        dh_d_prev.reverse()

        dx_d = self.input_fc.backward(du, in_cache)
        d_attn = self.cfg.d_attn_rnn
        dh_a = dx_d[:d_attn].copy()
        dc_t = dx_d[d_attn:d_attn + self.d_state_t] + dc_t_next
        dc_v = dx_d[d_attn + self.d_state_t:] + dc_v_next

        if mask.text_active:
            dh_a += self.att_t.backward(dc_t, att_t_cache, dmem_t)
        if mask.speech_active:
            dh_a += self.att_v.backward(dc_v, att_v_cache, dmem_v)
        dh_a += dh_a_next

        dx_a, dh_a_prev = self.att_rnn.backward(dh_a, att_rnn_cache)
        d_pn = self.cfg.d_prenet
        do_p = dx_a[:d_pn]
        dc_t_prev = dx_a[d_pn:d_pn + self.d_state_t]
        dc_v_prev = dx_a[d_pn + self.d_state_t:]
        dy_prev = self.prenet.backward(do_p, pn_cache)
        return (dh_a_prev, dh_d_prev, dc_t_prev, dc_v_prev), dy_prev

    # -- full decodes ----------------------------------------------------------

    def frame_steps(self, n_frames: int) -> int:
        return -(-n_frames // self.cfg.r)

    def decode_teacher_forced(self, enc_t, enc_v, target: np.ndarray,
                              mask: MaskSelection, training: bool = True,
                              rng: Optional[np.random.Generator] = None):
        """Teacher-forced decode; returns (pred, trace, caches).

        pred has ceil(T/r)*r rows; rows past T exist only to fill the last
        reduction group and are excluded from the loss by its valid-length
        mask.
        """
        target = np.asarray(target, dtype=np.float64)
        if target.ndim != 2 or target.shape[0] < 1:
            raise DimensionError("target must be a non-empty [T, n_mels] array")
        if target.shape[1] != self.cfg.n_mels:
            raise DimensionError(
                f"target has {target.shape[1]} bands, config says {self.cfg.n_mels}")
        r = self.cfg.r
        steps = self.frame_steps(target.shape[0])
        padded = np.zeros((steps * r, self.cfg.n_mels))
        padded[:target.shape[0]] = target

        st, init_cache = self.init_state(enc_t, enc_v, mask)
        trace = AlignmentTrace(mask=mask)
        pred = np.zeros_like(padded)
        step_caches = []
        for k in range(steps):
            if k > 0:
                st.y_prev = padded[k * r - 1]
            frames, st, (w_t, w_v), cache = self.step(
                st, enc_t, enc_v, mask, training, rng)
            pred[k * r:(k + 1) * r] = frames
            trace.text_weights.append(w_t)
            trace.speech_weights.append(w_v)
            step_caches.append(cache)
        return pred, trace, (init_cache, step_caches, mask, enc_t, enc_v)

    def decode_backward(self, dpred: np.ndarray, caches):
        """Backprop through a teacher-forced decode.

        Returns (dmem_t, ds_t, dmem_v, ds_v); None entries for inactive
        sources. Gradients w.r.t. the ground-truth pre-net inputs are
        discarded (targets are constants).
        """
        init_cache, step_caches, mask, enc_t, enc_v = caches
        r = self.cfg.r
        dmem_t = (np.zeros_like(enc_t.outputs) if mask.text_active else None)
        dmem_v = (np.zeros_like(enc_v.outputs) if mask.speech_active else None)
        dcarry = (np.zeros(self.cfg.d_attn_rnn),
                  [np.zeros(self.cfg.d_dec_rnn) for _ in self.dec_rnn],
                  np.zeros(self.d_state_t), np.zeros(self.d_state_v))
        for k in range(len(step_caches) - 1, -1, -1):
            dframes = dpred[k * r:(k + 1) * r]
            dcarry, _dy_prev = self.step_backward(
                dframes, dcarry, step_caches[k], mask, dmem_t, dmem_v)
        dh_a0 = dcarry[0]
        ds_t, ds_v = self.init_state_backward(dh_a0, init_cache, mask)
        return dmem_t, ds_t, dmem_v, ds_v

    def generate(self, enc_t, enc_v, mask: MaskSelection, max_steps: int,
                 prenet_dropout: bool = True,
                 rng: Optional[np.random.Generator] = None,
                 stop_energy: float = 0.02, stop_patience: int = 3):
        """Free-running generation: the last predicted frame of each group
        feeds the next pre-net call.

        Stops at max_steps, or earlier once `stop_patience` consecutive
        groups have mean absolute value below `stop_energy`. The decoder
        pre-net dropout stays active by default; pass prenet_dropout=False
        for deterministic output.
        """
        if max_steps < 1:
            raise DimensionError(f"max_steps must be >= 1, got {max_steps}")
        if prenet_dropout and rng is None:
            raise NumericsError("prenet_dropout=True requires an rng")
        st, _ = self.init_state(enc_t, enc_v, mask)
        trace = AlignmentTrace(mask=mask)
        groups = []
        quiet = 0
        for _ in range(max_steps):
            frames, st, (w_t, w_v), _ = self.step(
                st, enc_t, enc_v, mask, prenet_dropout, rng)
            groups.append(frames)
            trace.text_weights.append(w_t)
            trace.speech_weights.append(w_v)
            quiet = quiet + 1 if np.mean(np.abs(frames)) < stop_energy else 0
            if quiet >= stop_patience:
                break
        pred = np.concatenate(groups, axis=0)
        return check_finite(pred, "generated frames"), trace
