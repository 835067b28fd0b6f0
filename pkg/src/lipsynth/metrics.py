"""Objective metrics and batch evaluation.

STOI and ESTOI follow the published short-time analysis: resample both
signals to 10 kHz, drop frames that are silent in the clean reference, pool
magnitudes into 15 one-third-octave bands, and correlate over 384 ms
segments. WER is plain word-level edit distance over the reference length.
"""

import json
import logging
import shlex
import subprocess
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from . import dsp
from .data import read_manifest, read_mel_file, read_wave_file, write_wave_file
from .errors import ConfigError, DataError
from .engine import Tensor

log = logging.getLogger("lipsynth.metrics")

FS_ANALYSIS = 10_000
FRAME_LEN = 256
FRAME_HOP = 128
FFT_SIZE = 512
NUM_BANDS = 15
BAND_MIN_FREQ = 150.0
SEGMENT_FRAMES = 30        # 384 ms of frames at 10 kHz
DYN_RANGE_DB = 40.0
CLIP_SDR_DB = -15.0


def _to_analysis_rate(x: np.ndarray, sample_rate: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if sample_rate == FS_ANALYSIS:
        return x
    frac = Fraction(FS_ANALYSIS, int(sample_rate))
    return resample_poly(x, frac.numerator, frac.denominator)


def _analysis_window() -> np.ndarray:
    # endpoint-trimmed Hann: 50% overlap-add sums to unity
    return np.hanning(FRAME_LEN + 2)[1:-1]


def _frame(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    n = (len(x) - FRAME_LEN) // FRAME_HOP + 1
    if n < 1:
        return np.zeros((0, FRAME_LEN))
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_HOP * np.arange(n)[:, None]
    return x[idx] * window


def _remove_silent_frames(clean: np.ndarray, degraded: np.ndarray):
    """Drop frames more than 40 dB below the loudest clean frame, then
    overlap-add what is left. The mask comes from the clean signal only."""
    window = _analysis_window()
    cf = _frame(clean, window)
    df = _frame(degraded, window)
    if not len(cf):
        return np.zeros(0), np.zeros(0)
    energy = 20.0 * np.log10(np.linalg.norm(cf, axis=1) + np.finfo(np.float64).tiny)
    mask = energy > energy.max() - DYN_RANGE_DB
    cf, df = cf[mask], df[mask]
    if not len(cf):
        return np.zeros(0), np.zeros(0)
    out_len = (len(cf) - 1) * FRAME_HOP + FRAME_LEN
    clean_out = np.zeros(out_len)
    degraded_out = np.zeros(out_len)
    for i in range(len(cf)):
        clean_out[i * FRAME_HOP:i * FRAME_HOP + FRAME_LEN] += cf[i]
        degraded_out[i * FRAME_HOP:i * FRAME_HOP + FRAME_LEN] += df[i]
    return clean_out, degraded_out


def one_third_octave_bands() -> np.ndarray:
    """(15, FFT bins) 0/1 matrix; band edges snap to the nearest FFT bin."""
    f = np.linspace(0, FS_ANALYSIS, FFT_SIZE + 1)[: FFT_SIZE // 2 + 1]
    obm = np.zeros((NUM_BANDS, len(f)))
    for k in range(NUM_BANDS):
        lo = BAND_MIN_FREQ * 2.0 ** ((2 * k - 1) / 6)
        hi = BAND_MIN_FREQ * 2.0 ** ((2 * k + 1) / 6)
        lo_i = int(np.argmin(np.square(f - lo)))
        hi_i = int(np.argmin(np.square(f - hi)))
        obm[k, lo_i:hi_i] = 1.0
    return obm


def _band_magnitudes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    frames = _frame(x, _analysis_window())
    spec = np.fft.rfft(frames, FFT_SIZE, axis=1)
    return np.sqrt(np.square(np.abs(spec)) @ obm.T).T  # (bands, frames)


def _safe_inv(norms: np.ndarray) -> np.ndarray:
    return np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)


def _stoi_segment(x: np.ndarray, y: np.ndarray) -> float:
    # per band: scale degraded to the clean energy, clip at -15 dB SDR,
    # then mean-removed correlation
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    y = y * (nx * _safe_inv(ny))[:, None]
    y = np.minimum(y, x * (1.0 + 10.0 ** (-CLIP_SDR_DB / 20.0)))
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1)
    corr = np.sum(xc * yc, axis=1) * _safe_inv(denom)
    return float(corr.mean())


def _estoi_segment(x: np.ndarray, y: np.ndarray) -> float:
    def row_col_normalize(a):
        a = a - a.mean(axis=1, keepdims=True)
        a = a * _safe_inv(np.linalg.norm(a, axis=1))[:, None]
        a = a - a.mean(axis=0, keepdims=True)
        return a * _safe_inv(np.linalg.norm(a, axis=0))[None, :]

    xn = row_col_normalize(x)
    yn = row_col_normalize(y)
    return float(np.sum(xn * yn) / x.shape[1])


def stoi(clean: np.ndarray, degraded: np.ndarray, sample_rate: int,
         extended: bool = False) -> float:
    """Short-time objective intelligibility; the extended variant correlates
    whole spectral segments instead of per-band rows and does not clip."""
    clean = np.asarray(clean, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    if clean.ndim != 1 or degraded.ndim != 1:
        raise ValueError("stoi expects 1-d waveforms")
    if clean.shape != degraded.shape:
        raise ValueError(
            f"length mismatch: clean {clean.shape[0]} vs degraded {degraded.shape[0]}")
    clean = _to_analysis_rate(clean, sample_rate)
    degraded = _to_analysis_rate(degraded, sample_rate)
    clean, degraded = _remove_silent_frames(clean, degraded)

    obm = one_third_octave_bands()
    xb = _band_magnitudes(clean, obm)
    yb = _band_magnitudes(degraded, obm)
    n_frames = xb.shape[1]
    if n_frames < SEGMENT_FRAMES:
        raise DataError(
            f"clip too short: {n_frames} analysis frames after silence removal, "
            f"need {SEGMENT_FRAMES}")
    score = _estoi_segment if extended else _stoi_segment
    vals = [score(xb[:, m - SEGMENT_FRAMES:m], yb[:, m - SEGMENT_FRAMES:m])
            for m in range(SEGMENT_FRAMES, n_frames + 1)]
    return float(np.mean(vals))


def estoi(clean: np.ndarray, degraded: np.ndarray, sample_rate: int) -> float:
    return stoi(clean, degraded, sample_rate, extended=True)


# ---- word error rate ----------------------------------------------------------------


def edit_distance(reference, hypothesis) -> int:
    """Levenshtein distance over tokens, unit costs."""
    ref = list(reference)
    hyp = list(hypothesis)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference_words, hypothesis_words) -> float:
    ref = list(reference_words)
    if not ref:
        raise ValueError("WER needs a non-empty reference")
    return edit_distance(ref, list(hypothesis_words)) / len(ref)


# ---- batch evaluation ---------------------------------------------------------------


def _transcribe(command, wav_path: Path) -> list | None:
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    try:
        proc = subprocess.run(argv + [str(wav_path)], capture_output=True,
                              text=True, timeout=300)
    except (OSError, subprocess.TimeoutExpired) as e:
        log.warning("transcriber failed on %s: %s", wav_path.name, e)
        return None
    if proc.returncode != 0:
        log.warning("transcriber exited %d on %s: %s", proc.returncode,
                    wav_path.name, proc.stderr.strip())
        return None
    return proc.stdout.lower().split()


def _artifact_for_row(outputs_dir: Path, row_id: str) -> Path | None:
    for rel in (f"{row_id}.wav", f"{row_id}.mel",
                f"synth/{row_id}.wav", f"synth/{row_id}.mel"):
        p = outputs_dir / rel
        if p.exists():
            return p
    return None


def _metrics_for_pair(gt: np.ndarray, pred: np.ndarray, rate: int,
                      gt_mel: np.ndarray, pred_mel: np.ndarray) -> dict:
    t = min(gt_mel.shape[0], pred_mel.shape[0])
    mel_l1 = float(np.mean(np.abs(
        gt_mel[:t].astype(np.float64) - pred_mel[:t].astype(np.float64))))
    n = min(len(gt), len(pred))
    return {
        "mel_l1": mel_l1,
        "stoi": stoi(gt[:n], pred[:n], rate),
        "estoi": stoi(gt[:n], pred[:n], rate, extended=True),
    }


def evaluate_manifest(manifest_path, checkpoint=None, outputs_dir=None, *,
                      split: str | None = "test", vocoder: str = "griffin_lim",
                      vocoder_command=None, transcriber=None, seed: int = 0,
                      fps: int = 25, vocoder_iters: int = 60,
                      report_path=None) -> dict:
    """Per-clip STOI/ESTOI/mel-L1 (and WER when a transcriber is configured)
    plus corpus means.

    Generated audio comes either from a checkpoint (outputs are synthesized
    here for the chosen split) or from a directory of per-row artifacts named
    <id>.wav / <id>.mel; mel artifacts are vocoded before intelligibility
    scoring. The report is deterministic for a fixed seed.
    """
    if (checkpoint is None) == (outputs_dir is None):
        raise ConfigError("pass exactly one of checkpoint or outputs_dir")
    from . import training as tr
    from .data import preprocess_frames
    from .melmodels import vocode

    if checkpoint is not None and split is None:
        raise ConfigError("checkpoint evaluation needs a named split")
    manifest = read_manifest(manifest_path)
    rows = manifest.rows if split is None else manifest.split(split)
    if not rows:
        raise DataError(f"nothing to evaluate in split {split!r}")

    generator = None
    kind = family = None
    rate = None
    mel_cfg = None
    if checkpoint is not None:
        meta = tr.load_checkpoint_meta(checkpoint)
        generator, _ = tr.build_models_from_meta(meta)
        tr.load_checkpoint(checkpoint, generator)
        generator.eval()
        kind, family, rate = meta["kind"], meta["family"], meta["sample_rate"]
        mel_cfg = tr.mel_cfg_from_dict(meta["config"]["mel"])
        se = meta["speaker_encoder"]
        encoder = tr._encoder_from_spec(se["name"], rate, se.get("weights"))
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        examples, rate = tr.load_examples(
            manifest, split, family, encoder, rng, mel_cfg,
            require_synth=(kind == "av2a"))
        by_id = {ex.row_id: ex for ex in examples}

    clips, skipped = [], 0
    for row in rows:
        gt, row_rate = read_wave_file(manifest.resolve(row.audio_path))
        if rate is None:
            rate = row_rate
        if mel_cfg is None:
            mel_cfg = dsp.MelConfig(sample_rate=rate)
        gt64 = gt.astype(np.float64)
        gt_mel = dsp.log_mel(gt64, mel_cfg)

        pred_wave = None
        pred_mel = None
        if generator is not None:
            ex = by_id[row.id]
            frames = Tensor(preprocess_frames(ex.frames, training=False)[None])
            if family == "mel":
                if kind == "av2a":
                    out = generator.forward(frames, Tensor(ex.synth_mel[None]),
                                            ex.spk[None], mode="av")
                else:
                    hop = mel_cfg.stft.hop_size
                    target = 1 + round(ex.frames.shape[0] * rate / fps) // hop
                    out = generator.forward(frames, ex.spk[None], target_len=target)
                pred_mel = np.asarray(out.data[0], dtype=np.float32)
            else:
                if kind == "av2a":
                    out = generator.forward(frames, ex.synth_audio[None],
                                            ex.spk[None], mode="av")
                else:
                    out = generator.forward(frames, ex.spk[None])
                pred_wave = np.asarray(out.data[0], dtype=np.float32)
        else:
            artifact = _artifact_for_row(Path(outputs_dir), row.id)
            if artifact is None:
                log.warning("no artifact for row %s; skipping", row.id)
                skipped += 1
                continue
            if artifact.suffix == ".mel":
                pred_mel = read_mel_file(artifact)
            else:
                pred_wave, _ = read_wave_file(artifact)

        if pred_wave is None:
            pred_wave = vocode(pred_mel, backend=vocoder, mel_cfg=mel_cfg,
                               command=vocoder_command, n_iters=vocoder_iters)
        if pred_mel is None:
            pred_mel = dsp.log_mel(pred_wave.astype(np.float64), mel_cfg)

        try:
            entry = _metrics_for_pair(gt, pred_wave, rate, gt_mel, pred_mel)
        except DataError as e:
            log.warning("row %s skipped: %s", row.id, e)
            skipped += 1
            continue
        entry["id"] = row.id
        if transcriber is not None and row.transcript:
            with tempfile.TemporaryDirectory() as td:
                wav = Path(td) / "pred.wav"
                write_wave_file(wav, pred_wave.astype(np.float32), rate)
                hyp = _transcribe(transcriber, wav)
            entry["wer"] = (None if hyp is None
                            else wer(row.transcript.lower().split(), hyp))
        clips.append(entry)

    if not clips:
        raise DataError("every row was skipped; nothing evaluated")

    def mean_of(key):
        vals = [c[key] for c in clips if c.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "split": split,
        "clips": sorted(clips, key=lambda c: c["id"]),
        "summary": {
            "clips_evaluated": len(clips),
            "clips_skipped": skipped,
            "mel_l1": mean_of("mel_l1"),
            "stoi": mean_of("stoi"),
            "estoi": mean_of("estoi"),
            "wer": mean_of("wer"),
            "pesq": None,
        },
    }
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report
