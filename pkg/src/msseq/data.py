"""Synthetic verifiable corpus, feature file I/O, and objective metrics.

The toy corpus stands in for a real multi-speaker parallel dataset: every
utterance is a symbol sequence rendered deterministically to a spectrogram
by a "speaker profile" (a band shift plus a duration scale). Two source
profiles map to one target profile, so source and target renders of an
utterance are parallel by construction but differ in length and band
placement.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import math
import os
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decoder import AlignmentTrace
from .errors import DimensionError, FormatError, InputKindError
from .masking import MaskSelection

MEL_MAGIC = b"MEL1"
_MAX_DIM = 1 << 24  # sanity bound on header dims


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SpeakerProfile:
    name: str
    band_shift: int
    dur_scale: float


@dataclasses.dataclass(frozen=True)
class ToySpec:
    vocab: int = 12
    n_mels: int = 20
    silence_pad: int = 2
    silence_level: float = 0.05
    target: SpeakerProfile = SpeakerProfile("target", 0, 1.0)
    sources: tuple[SpeakerProfile, ...] = (
        SpeakerProfile("source1", +2, 1.5),
        SpeakerProfile("source2", -1, 0.75),
    )

    def duration(self, sym: int) -> int:
        return 2 + sym % 3

    def center_band(self, sym: int) -> int:
        return 1 + (sym * 7) % (self.n_mels - 2)


@dataclasses.dataclass
class Utterance:
    utt_id: str
    tokens: np.ndarray
    source_speaker: str
    source_mel: Optional[np.ndarray]
    target_mel: np.ndarray


def render(tokens: Sequence[int], profile: SpeakerProfile,
           spec: ToySpec = ToySpec()) -> np.ndarray:
    """Deterministic spectrogram render of a symbol sequence.

    Each symbol holds a Gaussian band bump for ceil(duration * dur_scale)
    frames on top of a small sinusoidal ripple; the utterance is padded with
    silence_pad constant frames on each side.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 1:
        raise DimensionError("cannot render an empty token sequence")
    if tokens.min() < 0 or tokens.max() >= spec.vocab:
        raise DimensionError(f"symbol id out of range [0, {spec.vocab})")
    durs = [math.ceil(spec.duration(int(s)) * profile.dur_scale) for s in tokens]
    T = 2 * spec.silence_pad + sum(durs)
    mel = np.full((T, spec.n_mels), spec.silence_level)
    bands = np.arange(spec.n_mels, dtype=np.float64)
    t = spec.silence_pad
    for sym, dur in zip(tokens, durs):
        center = spec.center_band(int(sym)) + profile.band_shift
        bump = np.exp(-0.5 * (bands - center) ** 2)
        for _ in range(dur):
            ripple = 0.05 * math.sin(2.0 * math.pi * t / 8.0)
            mel[t] = np.maximum(bump + ripple, 0.0)
            t += 1
    return mel


def gen_corpus(spec: ToySpec, n_utts: int, len_range: tuple[int, int] = (5, 12),
               seed: int = 0) -> list[Utterance]:
    """Random parallel corpus; source speakers alternate round-robin."""
    if n_utts < 1:
        raise DimensionError(f"n_utts must be >= 1, got {n_utts}")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise DimensionError(f"invalid length range {len_range}")
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(n_utts):
        m = int(rng.integers(lo, hi + 1))
        tokens = rng.integers(0, spec.vocab, size=m)
        src = spec.sources[i % len(spec.sources)]
        corpus.append(Utterance(
            utt_id=f"utt{i:04d}",
            tokens=tokens,
            source_speaker=src.name,
            source_mel=render(tokens, src, spec),
            target_mel=render(tokens, spec.target, spec),
        ))
    return corpus


# ---------------------------------------------------------------------------
# Binary mel files and the corpus manifest
# ---------------------------------------------------------------------------


def save_mel(path: str | Path, mel: np.ndarray) -> None:
    """Write magic 'MEL1', u32 n_frames, u32 n_bands, f32 row-major, LE."""
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[0] < 1 or mel.shape[1] < 1:
        raise DimensionError(f"mel payload must be non-empty 2-D, got {mel.shape}")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", mel.shape[0], mel.shape[1]))
        f.write(mel.astype("<f4").tobytes())


def load_mel(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MEL_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    n_frames, n_bands = struct.unpack("<II", raw[4:12])
    if n_frames < 1 or n_bands < 1:
        raise FormatError(f"{path}: empty payload dims {n_frames}x{n_bands}")
    if n_frames > _MAX_DIM or n_bands > _MAX_DIM:
        raise FormatError(f"{path}: implausible dims {n_frames}x{n_bands}")
    expect = 12 + 4 * n_frames * n_bands
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, got {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f4", offset=12)
    return payload.reshape(n_frames, n_bands).astype(np.float64)


def write_corpus(corpus: Sequence[Utterance], out_dir: str | Path) -> Path:
    """Write mel files plus manifest.csv; returns the manifest path."""
    out = Path(out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "text_tokens", "source_speaker",
                    "source_mel_path", "target_mel_path"])
        for utt in corpus:
            src_path = f"mels/{utt.utt_id}_src.mel"
            tgt_path = f"mels/{utt.utt_id}_tgt.mel"
            if utt.source_mel is not None:
                save_mel(out / src_path, utt.source_mel)
            else:
                src_path = ""
            save_mel(out / tgt_path, utt.target_mel)
            w.writerow([utt.utt_id, " ".join(str(t) for t in utt.tokens),
                        utt.source_speaker, src_path, tgt_path])
    return manifest


def load_corpus(corpus_dir: str | Path) -> list[Utterance]:
    out_dir = Path(corpus_dir)
    manifest = out_dir / "manifest.csv"
    if not manifest.exists():
        raise FormatError(f"no manifest.csv under {corpus_dir}")
    corpus = []
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            src = (load_mel(out_dir / row["source_mel_path"])
                   if row["source_mel_path"] else None)
            corpus.append(Utterance(
                utt_id=row["id"],
                tokens=np.array([int(t) for t in row["text_tokens"].split()],
                                dtype=np.int64),
                source_speaker=row["source_speaker"],
                source_mel=src,
                target_mel=load_mel(out_dir / row["target_mel_path"]),
            ))
    return corpus


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def frame_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute frame difference, aligned by truncation to min length."""
    n = min(a.shape[0], b.shape[0])
    if n < 1 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape}")
    return float(np.mean(np.abs(a[:n] - b[:n])))


def diagonality_matrix(weights: np.ndarray, band_frac: float = 0.15) -> float:
    """Mean attention mass near the ideal diagonal of a [n_steps, L] matrix.

    Step k's ideal position is k*L/n_steps; mass counts within a band of
    half-width band_frac*L. A one-hot perfectly diagonal alignment scores 1;
    uniform attention scores about 2*band_frac.
    """
    n_steps, L = weights.shape
    half = band_frac * L
    j = np.arange(L)
    total = 0.0
    for k in range(n_steps):
        ideal = k * L / n_steps
        total += float(weights[k, np.abs(j - ideal) <= half].sum())
    return total / n_steps


def trace_weights(trace: AlignmentTrace, source: str) -> np.ndarray:
    """Stack one source's per-step weights from a trace; errors if masked."""
    seq = trace.text_weights if source == "t" else trace.speech_weights
    if any(w is None for w in seq) or not seq:
        raise InputKindError(f"source {source!r} was masked in this trace")
    return np.vstack(seq)


def diagonality(trace: AlignmentTrace, source: str = "t",
                band_frac: float = 0.15) -> float:
    return diagonality_matrix(trace_weights(trace, source), band_frac)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

MODE_MASKS = {
    "tts": MaskSelection.TEXT_ONLY,
    "vc": MaskSelection.SPEECH_ONLY,
    "hybrid": MaskSelection.BOTH,
}


@dataclasses.dataclass
class EvalRow:
    mode: str
    utt_id: str
    l1: float
    diagonality: float


@dataclasses.dataclass
class EvalReport:
    rows: list[EvalRow]

    def mode_mean_l1(self, mode: str) -> float:
        vals = [r.l1 for r in self.rows if r.mode == mode]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mode", "utt_id", "l1", "diagonality"])
            for r in self.rows:
                w.writerow([r.mode, r.utt_id, f"{r.l1:.8f}",
                            f"{r.diagonality:.8f}"])


def _eval_workers() -> int:
    try:
        return max(1, int(os.environ.get("MSQ_THREADS", "1")))
    except ValueError:
        return 1


def bias_baseline_l1(corpus: Sequence[Utterance]) -> float:
    """L1 of the best constant (per-band mean) frame predictor."""
    frames = np.concatenate([u.target_mel for u in corpus], axis=0)
    const = frames.mean(axis=0)
    return float(np.mean(np.abs(frames - const)))


def evaluate(model, corpus: Sequence[Utterance],
             modes: Sequence[str] = ("tts", "vc", "hybrid"),
             max_steps_factor: float = 1.5) -> EvalReport:
    """Run generation per (mode, utterance); L1 against the target render.

    Generation runs deterministically (decoder pre-net dropout disabled) so
    reports are reproducible. Diagonality uses the text alignment when
    present, otherwise the speech alignment.
    """
    jobs = [(mode, utt) for mode in modes for utt in corpus]

    def run(job):
        mode, utt = job
        mask = MODE_MASKS[mode]
        max_steps = int(max_steps_factor * utt.target_mel.shape[0]
                        / model.cfg.decoder.r) + 2
        pred, trace = model.generate(
            tokens=utt.tokens if mask.text_active else None,
            src_mel=utt.source_mel if mask.speech_active else None,
            mask=mask, max_steps=max_steps, prenet_dropout=False)
        diag = diagonality(trace, "t" if mask.text_active else "v")
        return EvalRow(mode, utt.utt_id, frame_l1(pred, utt.target_mel), diag)

    workers = _eval_workers()
    if workers == 1:
        rows = [run(j) for j in jobs]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(run, jobs))
    return EvalReport(rows=rows)
