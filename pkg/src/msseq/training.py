"""Loss, checkpointing, and the staged training procedure.

Stages: stand-alone text-to-spectrogram training, stand-alone many-to-one
conversion training, encoder transfer into a fresh joint model, joint
training with randomly masked inputs, and low-rate fine-tuning on a small
corpus. Training is bitwise-deterministic given (seed, config, corpus): one
generator drives shuffling, mask draws, and dropout in a fixed call order,
and its state is serialized into checkpoints so a resumed run continues the
exact loss trace.
"""

from __future__ import annotations

import csv
import dataclasses
import struct
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig, cfg_float, cfg_int, model_config
from .data import Utterance
from .errors import DimensionError, FormatError, InputKindError, NumericsError
from .masking import MaskPolicy, MaskSelection, sample_mask
from .model import Model
from .numerics import Adam, LrSchedule, clip_grad_norm, noam_lr

CKPT_MAGIC = b"MSQ1"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def l1_loss_and_grad(pred: np.ndarray, target: np.ndarray, valid_len: int):
    """Masked mean-L1 over the first valid_len frames and all bands.

    Returns (loss, dloss/dpred); gradient rows past valid_len are zero, so
    padding frames never influence training.
    """
    if valid_len < 1 or valid_len > pred.shape[0]:
        raise DimensionError(
            f"valid_len {valid_len} outside [1, {pred.shape[0]}]")
    if pred.shape[1] != target.shape[1]:
        raise DimensionError(
            f"band mismatch: pred {pred.shape[1]}, target {target.shape[1]}")
    diff = pred[:valid_len] - target[:valid_len]
    n = diff.size
    loss = float(np.abs(diff).sum() / n)
    dpred = np.zeros_like(pred)
    dpred[:valid_len] = np.sign(diff) / n
    return loss, dpred


def l1_loss(pred: np.ndarray, target: np.ndarray, valid_len: int) -> float:
    return l1_loss_and_grad(pred, target, valid_len)[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Checkpoint:
    """Serializable training snapshot: config text, blobs, and counters."""

    version: int
    step: int
    opt_step: int
    config: dict[str, str]
    blobs: dict[str, np.ndarray]

    def save(self, path: str | Path) -> None:
        cfg_text = "\n".join(f"{k}={v}" for k, v in self.config.items())
        cfg_bytes = cfg_text.encode("utf-8")
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<IQQ", self.version, self.step, self.opt_step))
            f.write(struct.pack("<I", len(cfg_bytes)))
            f.write(cfg_bytes)
            f.write(struct.pack("<I", len(self.blobs)))
            for name, arr in self.blobs.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
        off = 4
        version, step, opt_step = struct.unpack_from("<IQQ", raw, off)
        off += 20
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (cfg_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        cfg_text = raw[off:off + cfg_len].decode("utf-8")
        off += cfg_len
        config: dict[str, str] = {}
        for line in cfg_text.splitlines():
            k, v = line.split("=", 1)
            config[k] = v
        (n_blobs,) = struct.unpack_from("<I", raw, off)
        off += 4
        blobs: dict[str, np.ndarray] = {}
        for _ in range(n_blobs):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", offset=off,
                                count=count).reshape(shape).copy()
            off += 8 * count
            blobs[name] = arr
        if off != len(raw):
            raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
        return cls(version=version, step=step, opt_step=opt_step,
                   config=config, blobs=blobs)


def _rng_snapshot(rng: np.random.Generator) -> dict[str, str]:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise NumericsError("only PCG64 generators are checkpointable")
    return {
        "rng.state": str(st["state"]["state"]),
        "rng.inc": str(st["state"]["inc"]),
        "rng.has_uint32": str(st["has_uint32"]),
        "rng.uinteger": str(st["uinteger"]),
    }


def _rng_restore(config: dict[str, str]) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(config["rng.state"]),
                  "inc": int(config["rng.inc"])},
        "has_uint32": int(config["rng.has_uint32"]),
        "uinteger": int(config["rng.uinteger"]),
    }
    return rng


def make_checkpoint(model: Model, opt: Adam, step: int, cfg: dict[str, str],
                    kind: str, rng: np.random.Generator) -> Checkpoint:
    snapshot = dict(cfg)
    snapshot["model.kind"] = kind
    snapshot.update(_rng_snapshot(rng))
    blobs: dict[str, np.ndarray] = {}
    for p in model.params():
        blobs[p.name] = p.value.copy()
    for p in model.params():
        blobs[f"opt.m.{p.name}"] = opt.m[p.name].copy()
        blobs[f"opt.v.{p.name}"] = opt.v[p.name].copy()
    return Checkpoint(version=CKPT_VERSION, step=step, opt_step=opt.step_count,
                      config=snapshot, blobs=blobs)


def _model_cfg_from_snapshot(cfg: dict[str, str], kind: str) -> ModelConfig:
    return model_config(cfg, has_text=kind in ("tts", "joint"),
                        has_speech=kind in ("vc", "joint"))


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild (model, optimizer, rng) from a checkpoint, bit-exactly."""
    kind = ckpt.config["model.kind"]
    mc = _model_cfg_from_snapshot(ckpt.config, kind)
    model = Model(mc, np.random.default_rng(cfg_int(ckpt.config, "seed")))
    for p in model.params():
        if p.name not in ckpt.blobs:
            raise FormatError(f"checkpoint missing blob {p.name}")
        blob = ckpt.blobs[p.name]
        if blob.shape != p.value.shape:
            raise DimensionError(
                f"blob {p.name}: checkpoint shape {blob.shape} != "
                f"model shape {p.value.shape}")
        p.value[...] = blob
    opt = Adam(model.params(), beta1=cfg_float(ckpt.config, "beta1"),
               beta2=cfg_float(ckpt.config, "beta2"))
    opt.step_count = ckpt.opt_step
    for p in model.params():
        opt.m[p.name][...] = ckpt.blobs[f"opt.m.{p.name}"]
        opt.v[p.name][...] = ckpt.blobs[f"opt.v.{p.name}"]
    return model, opt, _rng_restore(ckpt.config)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class StageReport:
    stage: str
    loss_rows: list[tuple[int, str, float, float]]  # (step, stage, loss, lr)
    wall_time: float
    final_metrics: dict[str, float]


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: StageReport


def write_loss_csv(path: str | Path,
                   rows: Sequence[tuple[int, str, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "stage", "loss", "lr"])
        for step, stage, loss, lr in rows:
            w.writerow([step, stage, f"{loss:.12f}", f"{lr:.12f}"])


def _utterance_inputs(utt: Utterance, mask: MaskSelection):
    tokens = utt.tokens if mask.text_active else None
    src = utt.source_mel if mask.speech_active else None
    return tokens, src


def _check_corpus(corpus: Sequence[Utterance], need_text: bool,
                  need_speech: bool) -> None:
    if not corpus:
        raise InputKindError("empty corpus")
    for utt in corpus:
        if need_text and (utt.tokens is None or len(utt.tokens) == 0):
            raise InputKindError(f"utterance {utt.utt_id} has no text input")
        if need_speech and utt.source_mel is None:
            raise InputKindError(f"utterance {utt.utt_id} has no speech input")
        if utt.target_mel is None:
            raise InputKindError(f"utterance {utt.utt_id} has no target")


def _train_loop(model: Model, opt: Adam, corpus: Sequence[Utterance],
                cfg: dict[str, str], stage: str, kind: str,
                mask_mode: MaskSelection | MaskPolicy, max_steps: int,
                rng: np.random.Generator, start_step: int = 0,
                lr_scale: float = 1.0,
                out_dir: Optional[Path] = None) -> TrainResult:
    sched = LrSchedule(peak_lr=cfg_float(cfg, "peak_lr") * lr_scale,
                       warmup_steps=cfg_int(cfg, "warmup_steps"))
    batch_size = cfg_int(cfg, "batch_size")
    grad_clip = cfg_float(cfg, "grad_clip")
    ckpt_every = cfg_int(cfg, "checkpoint_interval")
    params = model.params()
    rows: list[tuple[int, str, float, float]] = []
    t0 = time.monotonic()
    n = len(corpus)
    for step in range(start_step + 1, start_step + max_steps + 1):
        idx = rng.permutation(n)[:batch_size]
        batch_loss = 0.0
        for i in idx:
            utt = corpus[int(i)]
            if isinstance(mask_mode, MaskPolicy):
                mask = sample_mask(mask_mode, rng)
            else:
                mask = mask_mode
            tokens, src = _utterance_inputs(utt, mask)
            target = utt.target_mel
            pred, _, caches = model.forward_teacher(
                tokens, src, target, mask, training=True, rng=rng)
            loss, dpred = l1_loss_and_grad(pred, target, target.shape[0])
            model.backward_teacher(dpred / len(idx), caches)
            batch_loss += loss / len(idx)
        if not np.isfinite(batch_loss):
            raise NumericsError(f"non-finite loss at step {step} of {stage}")
        clip_grad_norm(params, grad_clip)
        lr = noam_lr(opt.step_count + 1, sched)
        opt.step(lr)
        rows.append((step, stage, batch_loss, lr))
        if out_dir is not None and ckpt_every > 0 and step % ckpt_every == 0:
            make_checkpoint(model, opt, step, cfg, kind, rng).save(
                out_dir / f"{stage}_step{step:06d}.msq")
    final = make_checkpoint(model, opt, start_step + max_steps, cfg, kind, rng)
    report = StageReport(
        stage=stage, loss_rows=rows, wall_time=time.monotonic() - t0,
        final_metrics={"final_loss": rows[-1][2] if rows else float("nan")})
    if out_dir is not None:
        final.save(out_dir / f"{stage}_final.msq")
        write_loss_csv(out_dir / f"{stage}_loss.csv", rows)
    return TrainResult(checkpoint=final, report=report)


def corpus_teacher_loss(model: Model, corpus: Sequence[Utterance],
                        mask: MaskSelection) -> float:
    """Mean teacher-forced loss over a corpus, inference mode (no dropout)."""
    total = 0.0
    for utt in corpus:
        tokens, src = _utterance_inputs(utt, mask)
        pred, _, _ = model.forward_teacher(
            tokens, src, utt.target_mel, mask, training=False, rng=None)
        total += l1_loss(pred, utt.target_mel, utt.target_mel.shape[0])
    return total / len(corpus)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _fresh(cfg: dict[str, str], kind: str):
    rng = np.random.default_rng(cfg_int(cfg, "seed"))
    model = Model(_model_cfg_from_snapshot(cfg, kind), rng)
    opt = Adam(model.params(), beta1=cfg_float(cfg, "beta1"),
               beta2=cfg_float(cfg, "beta2"))
    return model, opt, rng


def train_standalone_tts(corpus: Sequence[Utterance], cfg: dict[str, str],
                         max_steps: Optional[int] = None,
                         out_dir: Optional[Path] = None) -> TrainResult:
    """Stage 1a: text-input single-attention model on (text, target) pairs."""
    _check_corpus(corpus, need_text=True, need_speech=False)
    model, opt, rng = _fresh(cfg, "tts")
    return _train_loop(model, opt, corpus, cfg, "tts", "tts",
                       MaskSelection.TEXT_ONLY,
                       max_steps or cfg_int(cfg, "max_steps"), rng,
                       out_dir=out_dir)


def train_standalone_vc(corpus: Sequence[Utterance], cfg: dict[str, str],
                        max_steps: Optional[int] = None,
                        out_dir: Optional[Path] = None) -> TrainResult:
    """Stage 1b: many-to-one conversion model on parallel (source, target)
    pairs; any number of source speakers including one."""
    _check_corpus(corpus, need_text=False, need_speech=True)
    model, opt, rng = _fresh(cfg, "vc")
    return _train_loop(model, opt, corpus, cfg, "vc", "vc",
                       MaskSelection.SPEECH_ONLY,
                       max_steps or cfg_int(cfg, "max_steps"), rng,
                       out_dir=out_dir)


def init_joint(tts_ckpt: Checkpoint, vc_ckpt: Checkpoint,
               cfg: dict[str, str]) -> Model:
    """Joint model with encoders copied from the stand-alone checkpoints and
    a freshly initialized decoder and attention scorers."""
    rng = np.random.default_rng(cfg_int(cfg, "seed"))
    model = Model(_model_cfg_from_snapshot(cfg, "joint"), rng)
    for prefix, ckpt in (("enc_t.", tts_ckpt), ("enc_v.", vc_ckpt)):
        for p in model.params():
            if not p.name.startswith(prefix):
                continue
            if p.name not in ckpt.blobs:
                raise FormatError(
                    f"source checkpoint has no blob {p.name}")
            blob = ckpt.blobs[p.name]
            if blob.shape != p.value.shape:
                raise DimensionError(
                    f"blob {p.name}: checkpoint shape {blob.shape} != "
                    f"joint model shape {p.value.shape}")
            p.value[...] = blob
    return model


def train_joint(model: Model, corpus: Sequence[Utterance], cfg: dict[str, str],
                max_steps: Optional[int] = None,
                out_dir: Optional[Path] = None) -> TrainResult:
    """Stage 2: joint training with a per-utterance random input mask."""
    _check_corpus(corpus, need_text=True, need_speech=True)
    policy = MaskPolicy(cfg_float(cfg, "mask.p_text"),
                        cfg_float(cfg, "mask.p_speech"),
                        cfg_float(cfg, "mask.p_both"))
    rng = np.random.default_rng(cfg_int(cfg, "seed") + 1)
    opt = Adam(model.params(), beta1=cfg_float(cfg, "beta1"),
               beta2=cfg_float(cfg, "beta2"))
    return _train_loop(model, opt, corpus, cfg, "joint", "joint", policy,
                       max_steps or cfg_int(cfg, "max_steps"), rng,
                       out_dir=out_dir)


def adapt_finetune(ckpt: Checkpoint, small_corpus: Sequence[Utterance],
                   cfg: dict[str, str], max_steps: Optional[int] = None,
                   out_dir: Optional[Path] = None) -> TrainResult:
    """Continue training all parameters on a small corpus at peak_lr/5.

    The report carries the pre/post teacher-forced loss on the small corpus.
    """
    model, opt, rng = model_from_checkpoint(ckpt)
    kind = ckpt.config["model.kind"]
    mask = {"tts": MaskSelection.TEXT_ONLY, "vc": MaskSelection.SPEECH_ONLY,
            "joint": MaskSelection.BOTH}[kind]
    _check_corpus(small_corpus, need_text=mask.text_active,
                  need_speech=mask.speech_active)
    pre_loss = corpus_teacher_loss(model, small_corpus, mask)
    steps = cfg_int(cfg, "max_steps") if max_steps is None else max_steps
    mask_mode: MaskSelection | MaskPolicy = mask
    if kind == "joint":
        mask_mode = MaskPolicy(cfg_float(cfg, "mask.p_text"),
                               cfg_float(cfg, "mask.p_speech"),
                               cfg_float(cfg, "mask.p_both"))
    result = _train_loop(model, opt, small_corpus, cfg, "adapt", kind,
                         mask_mode, steps, rng, start_step=ckpt.step,
                         lr_scale=0.2, out_dir=out_dir)
    post_loss = corpus_teacher_loss(model, small_corpus, mask)
    result.report.final_metrics["pre_adapt_loss"] = pre_loss
    result.report.final_metrics["post_adapt_loss"] = post_loss
    return result
