"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

The staged-pipeline criteria (5, 6, 7, 10) share a single module-scoped
training run that takes several minutes; everything else is fast.
"""

import sys
import time
from types import SimpleNamespace

import numpy as np
import pytest

from msseq.cli import main as cli_main
from msseq.config import (DecoderConfig, EncoderConfig, ModelConfig,
                          model_config, preset_config)
from msseq.data import (MODE_MASKS, ToySpec, bias_baseline_l1,
                        diagonality_matrix, evaluate, frame_l1, gen_corpus)
from msseq.gradcheck import run_all_checks
from msseq.masking import MaskSelection
from msseq.model import Model
from msseq.numerics import Adam, LrSchedule, Param, noam_lr
from msseq.training import (Checkpoint, init_joint, model_from_checkpoint,
                            train_joint, train_standalone_tts,
                            train_standalone_vc)


@pytest.fixture()
def report(capsys):
    """One visible PASS/FAIL line per criterion, bypassing output capture."""

    def _report(num: int, name: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            sys.stdout.write(f"\n[acceptance] criterion {num:2d} ({name}): "
                             f"{'PASS' if ok else 'FAIL'}  {detail}\n")
            sys.stdout.flush()
        assert ok, f"criterion {num} ({name}) failed: {detail}"

    return _report


def _tiny_model(seed: int = 0, has_text: bool = True,
                has_speech: bool = True) -> Model:
    enc = EncoderConfig(d_embed=6, d_prenet=4, bank_K=2, conv_channels=4,
                        highway_layers=1, d_gru=4, dropout_rate=0.0)
    dec = DecoderConfig(d_prenet=4, d_attn_rnn=6, d_dec_rnn=6, dec_layers=2,
                        r=2, n_mels=8, dropout_rate=0.0)
    mc = ModelConfig(vocab=10, n_mels=8, encoder=enc, decoder=dec,
                     has_text=has_text, has_speech=has_speech)
    return Model(mc, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Shared staged-pipeline run (criteria 5, 6, 7, 10)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline():
    cfg = preset_config("desk")
    corpus = gen_corpus(ToySpec(), 32, seed=1234)
    t0 = time.monotonic()
    tts = train_standalone_tts(corpus, cfg, max_steps=2000)
    vc = train_standalone_vc(corpus, cfg, max_steps=2000)
    untrained = init_joint(tts.checkpoint, vc.checkpoint, cfg)
    joint = train_joint(init_joint(tts.checkpoint, vc.checkpoint, cfg),
                        corpus, cfg, max_steps=2000)
    wall = time.monotonic() - t0
    model, _, _ = model_from_checkpoint(joint.checkpoint)
    return SimpleNamespace(cfg=cfg, corpus=corpus, tts=tts, vc=vc,
                           joint=joint, untrained=untrained, model=model,
                           wall=wall)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_integrity(report):
    t0 = time.monotonic()
    results = run_all_checks(seed=1234, epsilon=1e-5)
    elapsed = time.monotonic() - t0
    worst = max(results.values())
    ok = worst < 1e-4 and elapsed < 120.0
    report(1, "gradient integrity", ok,
            f"max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")


def test_criterion_02_mask_invariance(report):
    model = _tiny_model(seed=4)
    rng = np.random.default_rng(17)
    checked = 0
    ok = True
    for _ in range(10):
        tokens = rng.integers(0, 10, size=int(rng.integers(2, 7)))
        src_a = rng.standard_normal((int(rng.integers(3, 9)), 8))
        src_b = rng.standard_normal((int(rng.integers(3, 9)), 8))
        out_a, _ = model.generate(tokens=tokens, src_mel=src_a,
                                  mask=MaskSelection.TEXT_ONLY, max_steps=5,
                                  prenet_dropout=False)
        out_b, _ = model.generate(tokens=tokens, src_mel=src_b,
                                  mask=MaskSelection.TEXT_ONLY, max_steps=5,
                                  prenet_dropout=False)
        ok &= np.array_equal(out_a, out_b)
        src = rng.standard_normal((6, 8))
        tok_a = rng.integers(0, 10, size=4)
        tok_b = rng.integers(0, 10, size=6)
        out_a, _ = model.generate(tokens=tok_a, src_mel=src,
                                  mask=MaskSelection.SPEECH_ONLY, max_steps=5,
                                  prenet_dropout=False)
        out_b, _ = model.generate(tokens=tok_b, src_mel=src,
                                  mask=MaskSelection.SPEECH_ONLY, max_steps=5,
                                  prenet_dropout=False)
        ok &= np.array_equal(out_a, out_b)
        checked += 2
    report(2, "mask invariance", ok,
            f"bitwise-identical outputs on {checked} random input pairs")


def test_criterion_03_masked_gradient_isolation(report):
    cfg = preset_config("desk")
    cfg.update({"d_embed": "6", "d_prenet": "4", "bank_K": "2",
                "conv_channels": "4", "highway_layers": "1", "d_gru": "4",
                "d_attn_rnn": "6", "d_dec_rnn": "6", "batch_size": "2",
                "mask.p_text": "1.0", "mask.p_speech": "0.0",
                "mask.p_both": "0.0"})
    corpus = gen_corpus(ToySpec(), 4, len_range=(3, 5), seed=3)
    model = Model(model_config(cfg), np.random.default_rng(1))
    before = {p.name: p.value.copy() for p in model.params()}
    train_joint(model, corpus, cfg, max_steps=1)
    speech = [p for p in model.params() if p.name.startswith("enc_v.")]
    unchanged = all(np.array_equal(p.value, before[p.name]) for p in speech)
    moved = any(not np.array_equal(p.value, before[p.name])
                for p in model.params() if p.name.startswith("enc_t."))
    report(3, "masked-gradient isolation", unchanged and moved,
            f"{len(speech)} speech-encoder params bitwise unchanged "
            f"after one (1,0,0) joint step; text encoder updated")


def test_criterion_04_framing(report):
    model = _tiny_model(seed=6)
    ok = True
    details = []
    for T in range(1, 10):
        target = np.random.default_rng(T).standard_normal((T, 8))
        pred, _, _ = model.forward_teacher(
            np.array([1, 2, 3]), None, target, MaskSelection.TEXT_ONLY,
            training=False)
        expect = -(-T // 2) * 2
        ok &= pred.shape[0] == expect
        details.append(f"T={T}:{pred.shape[0]}")
    gen, _ = model.generate(tokens=np.array([1, 2, 3]),
                            mask=MaskSelection.TEXT_ONLY, max_steps=7,
                            prenet_dropout=False)
    ok &= gen.shape[0] > 0 and gen.shape[0] % 2 == 0
    report(4, "framing", ok,
            f"teacher-forced rows ceil(T/2)*2 for T in 1..9; "
            f"generate rows {gen.shape[0]} (positive multiple of 2)")


def test_criterion_05_staged_pipeline_overfit(pipeline, report):
    batch = int(pipeline.cfg["batch_size"])
    epoch = max(1, len(pipeline.corpus) // batch)
    losses = [r[2] for r in pipeline.joint.report.loss_rows]
    first = float(np.mean(losses[:epoch]))
    last = float(np.mean(losses[-epoch:]))
    ratio = last / first
    ok = ratio < 0.2 and pipeline.wall < 1800.0
    report(5, "staged-pipeline overfit", ok,
            f"joint epoch-mean L1 {first:.4f} -> {last:.4f} "
            f"(ratio {ratio:.3f} < 0.2), wall {pipeline.wall:.0f}s (< 1800s)")


def test_criterion_06_mode_correctness(pipeline, report):
    sub = pipeline.corpus[:8]
    baseline = bias_baseline_l1(sub)
    tts_l1 = evaluate(pipeline.model, sub, modes=("tts",)).mode_mean_l1("tts")
    tts_ok = tts_l1 < 0.5 * baseline
    closer = []
    for utt in sub:
        steps = int(1.5 * utt.target_mel.shape[0] / 2) + 2
        pred, _ = pipeline.model.generate(
            src_mel=utt.source_mel, mask=MaskSelection.SPEECH_ONLY,
            max_steps=steps, prenet_dropout=False)
        closer.append(frame_l1(pred, utt.target_mel)
                      < frame_l1(pred, utt.source_mel))
    report(6, "mode correctness", tts_ok and all(closer),
            f"TTS mean L1 {tts_l1:.4f} < 0.5*baseline {0.5 * baseline:.4f}; "
            f"VC closer to target on {sum(closer)}/8 utterances")


def test_criterion_07_attention_health(pipeline, report):
    sub = pipeline.corpus[:8]
    post = [r.diagonality
            for r in evaluate(pipeline.model, sub, modes=("tts",)).rows]
    pre = [r.diagonality
           for r in evaluate(pipeline.untrained, sub, modes=("tts",)).rows]
    improved = [a > b for a, b in zip(post, pre)]
    margins = ", ".join(f"{a - b:+.3f}" for a, b in zip(post, pre))
    uniform = diagonality_matrix(np.full((40, 40), 1.0 / 40))
    uniform_ok = abs(uniform - 0.3) <= 0.05
    report(7, "attention health", all(improved) and uniform_ok,
            f"diagonality improved on {sum(improved)}/8 utterances "
            f"(margins {margins}); "
            f"uniform score {uniform:.3f} within 0.3 +/- 0.05")


def test_criterion_08_schedule_and_optimizer(report):
    sched = LrSchedule(peak_lr=float(preset_config("paper")["peak_lr"]),
                       warmup_steps=int(preset_config("paper")["warmup_steps"]))
    lr_ok = noam_lr(sched.warmup_steps, sched) == 0.002

    # Independent 3-step Adam oracle on a single 2-vector parameter.
    value = np.array([1.0, -2.0])
    grads = [np.array([0.5, -1.0]), np.array([-0.25, 0.75]),
             np.array([1.0, 1.0])]
    p = Param("w", value.copy())
    opt = Adam([p], beta1=0.9, beta2=0.999, epsilon=1e-8)
    for g in grads:
        p.grad[...] = g
        opt.step(0.01)
    m = np.zeros(2)
    v = np.zeros(2)
    x = value.copy()
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1.0 - 0.9 ** t)
        vhat = v / (1.0 - 0.999 ** t)
        x = x - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    diff = float(np.max(np.abs(p.value - x)))
    report(8, "schedule/optimizer", lr_ok and diff < 1e-12,
            f"noam_lr(warmup) == 0.002; 3-step Adam max diff {diff:.1e} "
            f"(< 1e-12)")


def test_criterion_09_reproducibility(tmp_path, report):
    tiny = ["--set", "d_embed=6", "--set", "d_prenet=4", "--set", "bank_K=2",
            "--set", "conv_channels=4", "--set", "highway_layers=1",
            "--set", "d_gru=4", "--set", "d_attn_rnn=6",
            "--set", "d_dec_rnn=6", "--set", "batch_size=2",
            "--set", "warmup_steps=20", "--set", "checkpoint_interval=0"]

    def run_pipeline(base):
        corpus = base / "corpus"
        out = base / "run"
        assert cli_main([*tiny, "--out", str(corpus),
                         "gendata", "--n", "4", "--len-min", "3",
                         "--len-max", "4"]) == 0
        for stage, extra in (("tts", []), ("vc", []),
                             ("joint", ["--init-tts", str(out / "tts_final.msq"),
                                        "--init-vc", str(out / "vc_final.msq")])):
            assert cli_main([*tiny, "--out", str(out),
                             "train", "--stage", stage, "--corpus",
                             str(corpus), "--steps", "20", *extra]) == 0
        assert cli_main([*tiny, "--out", str(out), "run", "--mode", "tts",
                         "--ckpt", str(out / "joint_final.msq"),
                         "--tokens", "1 2 3", "--max-steps", "6"]) == 0
        return out

    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    csv_ok = all((a / f"{s}_loss.csv").read_bytes()
                 == (b / f"{s}_loss.csv").read_bytes()
                 for s in ("tts", "vc", "joint"))
    mel_ok = (a / "tts.mel").read_bytes() == (b / "tts.mel").read_bytes()

    p1 = tmp_path / "rt1.msq"
    p2 = tmp_path / "rt2.msq"
    Checkpoint.load(a / "joint_final.msq").save(p1)
    Checkpoint.load(p1).save(p2)
    rt_ok = ((a / "joint_final.msq").read_bytes() == p1.read_bytes()
             == p2.read_bytes())
    report(9, "reproducibility", csv_ok and mel_ok and rt_ok,
            "identical loss CSVs and MEL1 bytes across seeded runs; "
            "checkpoint round-trip bitwise-stable")


def test_criterion_10_hybrid_comparison_report(pipeline, tmp_path, report):
    sub = pipeline.corpus[:4]
    joint_report = evaluate(pipeline.model, sub, modes=("tts", "vc", "hybrid"))
    tts_model, _, _ = model_from_checkpoint(pipeline.tts.checkpoint)
    vc_model, _, _ = model_from_checkpoint(pipeline.vc.checkpoint)
    tts_report = evaluate(tts_model, sub, modes=("tts",))
    vc_report = evaluate(vc_model, sub, modes=("vc",))

    path = tmp_path / "comparison.csv"
    with open(path, "w") as f:
        f.write("system,mode,utt_id,l1,diagonality\n")
        for system, rep in (("joint", joint_report),
                            ("standalone_tts", tts_report),
                            ("standalone_vc", vc_report)):
            for r in rep.rows:
                f.write(f"{system},{r.mode},{r.utt_id},"
                        f"{r.l1:.8f},{r.diagonality:.8f}\n")

    rows = path.read_text().splitlines()
    modes = {r.mode for r in joint_report.rows}
    finite = all(np.isfinite(r.l1) and np.isfinite(r.diagonality)
                 for rep in (joint_report, tts_report, vc_report)
                 for r in rep.rows)
    ok = (modes == {"tts", "vc", "hybrid"}
          and len(rows) == 1 + 3 * len(sub) + len(sub) + len(sub)
          and finite)
    summary = {m: joint_report.mode_mean_l1(m) for m in ("tts", "vc", "hybrid")}
    report(10, "hybrid comparison report", ok,
            f"3-mode table written ({len(rows) - 1} rows); joint mean L1 "
            + ", ".join(f"{m}={v:.4f}" for m, v in summary.items())
            + " (no ordering asserted)")
