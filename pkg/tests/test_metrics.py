"""Intelligibility metrics against a loop-based reference, WER, evaluation."""

import json
import shutil
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.signal import resample_poly

from lipsynth import dsp
from lipsynth import metrics as mx
from lipsynth.data import (generate_synthetic_corpus, read_manifest,
                           read_wave_file, write_manifest, write_wave_file)
from lipsynth.data import ManifestRow
from lipsynth.errors import ConfigError, DataError


def _speech_like(seed, seconds=1.0, rate=24000, f0=140.0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * rate)) / rate
    x = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
            for h in range(1, 6))
    env = 0.35 + 0.65 * np.sin(2 * np.pi * 2.5 * t + rng.uniform(0, 2)) ** 2
    x = x / np.abs(x).max() * env * 0.7
    return (x + 0.002 * rng.standard_normal(len(t))).astype(np.float64)


# ---- reference implementation (independent, explicit loops) --------------------------


def _ref_stoi(x, y, fs, extended=False):
    if fs != 10000:
        fr = Fraction(10000, fs)
        x = resample_poly(np.asarray(x, float), fr.numerator, fr.denominator)
        y = resample_poly(np.asarray(y, float), fr.numerator, fr.denominator)
    n, fft, hop = 256, 512, 128
    w = np.hanning(n + 2)[1:-1]

    xf, yf = [], []
    for s in range(0, len(x) - n + 1, hop):
        xf.append(w * x[s:s + n])
        yf.append(w * y[s:s + n])
    energies = [20 * np.log10(np.sqrt(np.sum(f * f)) + 1e-300) for f in xf]
    thr = max(energies) - 40.0
    keep = [i for i, e in enumerate(energies) if e > thr]
    xs = np.zeros((len(keep) - 1) * hop + n)
    ys = np.zeros_like(xs)
    for j, i in enumerate(keep):
        xs[j * hop:j * hop + n] += xf[i]
        ys[j * hop:j * hop + n] += yf[i]

    fbins = np.linspace(0, 10000, fft + 1)[: fft // 2 + 1]
    bands = []
    for k in range(15):
        lo = 150.0 * 2.0 ** ((2 * k - 1) / 6)
        hi = 150.0 * 2.0 ** ((2 * k + 1) / 6)
        bands.append((int(np.argmin((fbins - lo) ** 2)),
                      int(np.argmin((fbins - hi) ** 2))))

    def band_mags(sig):
        rows = []
        for s in range(0, len(sig) - n + 1, hop):
            p = np.abs(np.fft.rfft(w * sig[s:s + n], fft)) ** 2
            rows.append([np.sqrt(np.sum(p[lo:hi])) for lo, hi in bands])
        return np.array(rows).T

    X, Y = band_mags(xs), band_mags(ys)
    vals = []
    for m in range(30, X.shape[1] + 1):
        xm, ym = X[:, m - 30:m], Y[:, m - 30:m]
        if extended:
            def normalize(a):
                a = a - a.mean(axis=1, keepdims=True)
                for j in range(a.shape[0]):
                    nn = np.sqrt(np.sum(a[j] * a[j]))
                    a[j] = a[j] / nn if nn > 0 else a[j] * 0
                a = a - a.mean(axis=0, keepdims=True)
                for c in range(a.shape[1]):
                    nn = np.sqrt(np.sum(a[:, c] ** 2))
                    a[:, c] = a[:, c] / nn if nn > 0 else a[:, c] * 0
                return a
            vals.append(np.sum(normalize(xm.copy()) * normalize(ym.copy())) / 30)
        else:
            total = 0.0
            for j in range(15):
                xv, yv = xm[j], ym[j].copy()
                ny = np.sqrt(np.sum(yv * yv))
                yv = yv * np.sqrt(np.sum(xv * xv)) / ny if ny > 0 else yv * 0
                yv = np.minimum(yv, xv * (1 + 10.0 ** 0.75))
                xc, yc = xv - xv.mean(), yv - yv.mean()
                d = np.sqrt(np.sum(xc * xc)) * np.sqrt(np.sum(yc * yc))
                total += np.sum(xc * yc) / d if d > 0 else 0.0
            vals.append(total / 15)
    return float(np.mean(vals))


# ---- stoi / estoi -------------------------------------------------------------------


def test_stoi_and_estoi_self_identity():
    x = _speech_like(0)
    assert mx.stoi(x, x, 24000) == pytest.approx(1.0, abs=1e-6)
    assert mx.estoi(x, x, 24000) == pytest.approx(1.0, abs=1e-6)


def test_stoi_agrees_with_reference_on_noisy_pairs():
    for seed, snr_scale in ((1, 0.1), (2, 0.4), (3, 1.0)):
        x = _speech_like(seed)
        noise = np.random.default_rng(100 + seed).standard_normal(len(x))
        y = x + snr_scale * noise * np.std(x)
        assert mx.stoi(x, y, 24000) == pytest.approx(
            _ref_stoi(x, y, 24000), abs=0.02)
        assert mx.estoi(x, y, 24000) == pytest.approx(
            _ref_stoi(x, y, 24000, extended=True), abs=0.02)


def test_stoi_of_white_noise_is_low():
    x = _speech_like(4)
    noise = (np.random.default_rng(9).standard_normal(len(x)) * 0.3)
    assert mx.stoi(x, noise, 24000) < 0.25
    assert mx.estoi(x, noise, 24000) < 0.25


def test_stoi_invariant_to_degraded_gain():
    x = _speech_like(5)
    y = x + 0.2 * np.random.default_rng(6).standard_normal(len(x))
    assert abs(mx.stoi(x, 2.0 * y, 24000) - mx.stoi(x, y, 24000)) < 1e-6
    assert abs(mx.estoi(x, 2.0 * y, 24000) - mx.estoi(x, y, 24000)) < 1e-6


def test_stoi_rejects_bad_inputs():
    x = _speech_like(7)
    with pytest.raises(ValueError, match="mismatch"):
        mx.stoi(x, x[:-1], 24000)
    with pytest.raises(ValueError):
        mx.stoi(x[None], x[None], 24000)
    short = x[:2400]  # 0.1 s: under one 384 ms segment
    with pytest.raises(DataError, match="too short"):
        mx.stoi(short, short, 24000)


def test_third_octave_bands_are_disjoint_and_ordered():
    obm = mx.one_third_octave_bands()
    assert obm.shape == (15, 257)
    assert (obm.sum(axis=0) <= 1.0).all()
    starts = [np.argmax(row) for row in obm]
    assert starts == sorted(starts)
    assert all(row.any() for row in obm)


# ---- wer ----------------------------------------------------------------------------


def test_wer_hand_cases():
    assert mx.wer("a b c".split(), "a b c".split()) == 0.0
    assert mx.wer("a b c".split(), "a x c".split()) == pytest.approx(1 / 3)
    assert mx.wer(["a"], "a b b".split()) == 2.0
    with pytest.raises(ValueError):
        mx.wer([], ["a"])


def test_edit_distance_triangle_inequality():
    rng = np.random.default_rng(11)
    vocab = list("abcde")
    for _ in range(50):
        a, b, c = (list(rng.choice(vocab, size=rng.integers(0, 8)))
                   for _ in range(3))
        assert mx.edit_distance(a, c) <= (mx.edit_distance(a, b)
                                          + mx.edit_distance(b, c))


# ---- evaluate_manifest --------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_corpus")
    return generate_synthetic_corpus(2, 2, 1.0, 41, root / "c")


def test_evaluate_ground_truth_artifacts_scores_perfectly(eval_corpus, tmp_path):
    man = read_manifest(eval_corpus)
    outs = tmp_path / "outs"
    outs.mkdir()
    for row in man.rows:
        shutil.copy(man.resolve(row.audio_path), outs / f"{row.id}.wav")
    report = mx.evaluate_manifest(eval_corpus, outputs_dir=outs, split=None,
                                  report_path=tmp_path / "r.json")
    s = report["summary"]
    assert s["clips_evaluated"] == 4 and s["clips_skipped"] == 0
    assert s["stoi"] == pytest.approx(1.0, abs=1e-6)
    assert s["estoi"] == pytest.approx(1.0, abs=1e-6)
    assert s["mel_l1"] == 0.0
    assert s["wer"] is None and s["pesq"] is None
    assert all("wer" not in c for c in report["clips"])


def test_evaluate_report_is_deterministic(eval_corpus, tmp_path):
    man = read_manifest(eval_corpus)
    outs = tmp_path / "outs"
    outs.mkdir()
    for row in man.rows:
        shutil.copy(man.resolve(row.audio_path), outs / f"{row.id}.wav")
    mx.evaluate_manifest(eval_corpus, outputs_dir=outs, split=None,
                         report_path=tmp_path / "a.json")
    mx.evaluate_manifest(eval_corpus, outputs_dir=outs, split=None,
                         report_path=tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_evaluate_summary_means_recompute(eval_corpus, tmp_path):
    man = read_manifest(eval_corpus)
    outs = tmp_path / "outs"
    outs.mkdir()
    rng = np.random.default_rng(3)
    for row in man.rows:
        wave, rate = read_wave_file(man.resolve(row.audio_path))
        noisy = wave + 0.1 * rng.standard_normal(len(wave)).astype(np.float32)
        write_wave_file(outs / f"{row.id}.wav", noisy, rate)
    report = mx.evaluate_manifest(eval_corpus, outputs_dir=outs, split=None)
    for key in ("stoi", "estoi", "mel_l1"):
        vals = [c[key] for c in report["clips"]]
        assert report["summary"][key] == pytest.approx(float(np.mean(vals)))
    assert all(-1.0 <= c["stoi"] <= 1.0 for c in report["clips"])


def test_evaluate_mel_artifacts_are_vocoded(eval_corpus, tmp_path):
    from lipsynth.data import write_mel_file
    man = read_manifest(eval_corpus)
    outs = tmp_path / "outs"
    outs.mkdir()
    cfg = dsp.MelConfig(sample_rate=24000)
    for row in man.split("val"):
        wave, _ = read_wave_file(man.resolve(row.audio_path))
        write_mel_file(outs / f"{row.id}.mel", dsp.log_mel(wave.astype(np.float64), cfg))
    report = mx.evaluate_manifest(eval_corpus, outputs_dir=outs, split="val",
                                  vocoder_iters=20)
    s = report["summary"]
    # the stored mel equals the ground-truth mel; vocoding costs intelligibility
    assert s["mel_l1"] == 0.0
    assert 0.0 < s["stoi"] < 1.0


def test_evaluate_skips_rows_without_artifacts(eval_corpus, tmp_path):
    man = read_manifest(eval_corpus)
    outs = tmp_path / "outs"
    outs.mkdir()
    first = man.rows[0]
    shutil.copy(man.resolve(first.audio_path), outs / f"{first.id}.wav")
    report = mx.evaluate_manifest(eval_corpus, outputs_dir=outs, split=None)
    assert report["summary"]["clips_evaluated"] == 1
    assert report["summary"]["clips_skipped"] == 3
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError):
        mx.evaluate_manifest(eval_corpus, outputs_dir=empty, split=None)


def test_evaluate_requires_exactly_one_source(eval_corpus, tmp_path):
    with pytest.raises(ConfigError):
        mx.evaluate_manifest(eval_corpus)
    with pytest.raises(ConfigError):
        mx.evaluate_manifest(eval_corpus, checkpoint="x", outputs_dir="y")


def _transcribed_manifest(tmp_path, text):
    rate = 24000
    root = tmp_path / "tman"
    root.mkdir()
    rows = []
    for i in range(2):
        wave = _speech_like(50 + i).astype(np.float32)
        write_wave_file(root / f"{i}.wav", wave, rate)
        rows.append(ManifestRow(id=f"r{i}", speaker_id="s0",
                                video_path=f"{i}.wav", audio_path=f"{i}.wav",
                                split="test", transcript=text))
    write_manifest(root / "manifest.jsonl", rows)
    return root / "manifest.jsonl"


def test_evaluate_runs_transcriber_for_wer(eval_corpus, tmp_path):
    man_path = _transcribed_manifest(tmp_path, "open the door")
    man = read_manifest(man_path)
    outs = tmp_path / "outs"
    outs.mkdir()
    for row in man.rows:
        shutil.copy(man.resolve(row.audio_path), outs / f"{row.id}.wav")
    good = [sys.executable, "-c", "print('OPEN the door')"]
    report = mx.evaluate_manifest(man_path, outputs_dir=outs,
                                  transcriber=good)
    assert report["summary"]["wer"] == 0.0
    wrong = [sys.executable, "-c", "print('shut the door quickly')"]
    report = mx.evaluate_manifest(man_path, outputs_dir=outs,
                                  transcriber=wrong)
    assert report["summary"]["wer"] == pytest.approx(2 / 3)


def test_evaluate_continues_past_transcriber_failures(eval_corpus, tmp_path):
    man_path = _transcribed_manifest(tmp_path, "open the door")
    man = read_manifest(man_path)
    outs = tmp_path / "outs"
    outs.mkdir()
    for row in man.rows:
        shutil.copy(man.resolve(row.audio_path), outs / f"{row.id}.wav")
    broken = [sys.executable, "-c", "import sys; sys.exit(3)"]
    report = mx.evaluate_manifest(man_path, outputs_dir=outs,
                                  transcriber=broken)
    assert report["summary"]["clips_evaluated"] == 2
    assert report["summary"]["wer"] is None
    assert all(c["wer"] is None for c in report["clips"])


def test_evaluate_from_checkpoint(eval_corpus, tmp_path):
    import lipsynth.training as tr
    s = tr.train_v2a(eval_corpus, "mel", tmp_path / "v2a", epochs=1, seed=2,
                     preset="tiny", warmup_epochs=1)
    report = mx.evaluate_manifest(eval_corpus, checkpoint=s["final_checkpoint"],
                                  split="test", vocoder_iters=15,
                                  report_path=tmp_path / "r.json")
    assert report["summary"]["clips_evaluated"] == 1
    assert np.isfinite(report["summary"]["stoi"])
    assert json.loads((tmp_path / "r.json").read_text())["split"] == "test"
