"""Data plumbing: manifests, binary clip/mel/wav codecs, preprocessing,
speaker-reference selection, and the synthetic paired corpus.

The synthetic corpus stands in for real lip-reading datasets at desk scale:
each clip couples a bright-ellipse "mouth" whose opening follows a smooth
latent trajectory with a harmonic tone whose amplitude follows the same
trajectory, so audio is predictable from video by construction.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DataError

log = logging.getLogger("lipsynth.data")

SPLITS = ("train", "val", "test")

CLIP_MAGIC = b"AVCLIP01"
MEL_MAGIC = b"MELSPEC1"


# ---- manifest ----------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    id: str
    speaker_id: str
    video_path: str
    audio_path: str
    split: str
    synth_audio_path: str | None = None
    transcript: str | None = None

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "speaker_id": self.speaker_id,
            "video_path": self.video_path,
            "audio_path": self.audio_path,
            "split": self.split,
        }
        if self.synth_audio_path is not None:
            d["synth_audio_path"] = self.synth_audio_path
        if self.transcript is not None:
            d["transcript"] = self.transcript
        return d


_ROW_REQUIRED = ("id", "speaker_id", "video_path", "audio_path", "split")
_ROW_OPTIONAL = ("synth_audio_path", "transcript")


@dataclass(frozen=True)
class Manifest:
    rows: tuple
    root: Path

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [r for r in self.rows if r.split == name]

    def row(self, row_id: str) -> ManifestRow:
        for r in self.rows:
            if r.id == row_id:
                return r
        raise DataError(f"no manifest row with id {row_id!r}")

    def speakers(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.speaker_id, []).append(r)
        return out


def parse_manifest_rows(lines, source: str = "<memory>") -> tuple:
    rows, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{source}:{lineno}: invalid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise DataError(f"{source}:{lineno}: manifest row must be an object")
        missing = [k for k in _ROW_REQUIRED if k not in obj]
        if missing:
            raise DataError(f"{source}:{lineno}: missing fields {missing}")
        unknown = [k for k in obj if k not in _ROW_REQUIRED + _ROW_OPTIONAL]
        if unknown:
            raise DataError(f"{source}:{lineno}: unknown fields {unknown}")
        if obj["split"] not in SPLITS:
            raise DataError(
                f"{source}:{lineno}: unknown split {obj['split']!r}, expected one of {SPLITS}"
            )
        if obj["id"] in seen:
            raise DataError(f"{source}:{lineno}: duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        rows.append(ManifestRow(**obj))
    if not rows:
        raise DataError(f"{source}: empty manifest")
    return tuple(rows)


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    return Manifest(parse_manifest_rows(text.splitlines(), str(path)), path.parent)


def write_manifest(path, rows) -> None:
    path = Path(path)
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---- binary codecs -----------------------------------------------------------------


def _check_payload(path, kind: str, got: int, expected: int) -> None:
    if got < expected:
        raise DataError(
            f"truncated {kind} file {path}: payload is {got} bytes, "
            f"expected {expected} ({expected - got} missing)"
        )
    if got > expected:
        raise DataError(
            f"oversized {kind} file {path}: payload is {got} bytes, "
            f"expected {expected} ({got - expected} extra)"
        )


def write_clip_file(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.dtype != np.uint8 or frames.ndim != 4 or frames.shape[0] < 1:
        raise DataError(
            f"clip frames must be uint8 (N, H, W, C) with N >= 1, "
            f"got {frames.dtype} {frames.shape}"
        )
    header = CLIP_MAGIC + struct.pack("<4I", *frames.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(frames).tobytes())


def read_clip_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:8] != CLIP_MAGIC:
        raise DataError(f"bad magic in clip file {path}")
    if len(data) < 24:
        raise DataError(
            f"truncated clip file {path}: header is {len(data)} bytes, expected 24"
        )
    n, h, w, c = struct.unpack("<4I", data[8:24])
    expected = n * h * w * c
    _check_payload(path, "clip", len(data) - 24, expected)
    return np.frombuffer(data[24:], dtype=np.uint8).reshape(n, h, w, c)


def write_mel_file(path, mel: np.ndarray) -> None:
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2:
        raise DataError(f"mel must be (T', n_mels), got shape {mel.shape}")
    header = MEL_MAGIC + struct.pack("<2I", *mel.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(mel).tobytes())


def read_mel_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:8] != MEL_MAGIC:
        raise DataError(f"bad magic in mel file {path}")
    if len(data) < 16:
        raise DataError(
            f"truncated mel file {path}: header is {len(data)} bytes, expected 16"
        )
    t, m = struct.unpack("<2I", data[8:16])
    _check_payload(path, "mel", len(data) - 16, t * m * 4)
    return np.frombuffer(data[16:], dtype="<f4").reshape(t, m).copy()


def write_wave_file(path, wave: np.ndarray, sample_rate: int) -> None:
    """IEEE float32 WAV."""
    wavfile.write(str(path), int(sample_rate), np.asarray(wave, dtype=np.float32))


def read_wave_file(path):
    """Returns (float32 mono samples in [-1, 1], sample rate); accepts
    PCM-16 and float32 WAVs, averaging channels if needed."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as e:
        raise DataError(f"unreadable WAV {path}: {e}") from e
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        pass
    else:
        raise DataError(f"unsupported WAV sample format {data.dtype} in {path}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    return np.ascontiguousarray(data, dtype=np.float32), int(rate)


# ---- preprocessing and reference selection -----------------------------------------


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # uint8 (N, H, W, C)
    fps: int = 25


def preprocess_frames(frames, training: bool, rng=None, force_flip=None) -> np.ndarray:
    """uint8 frames -> float32 in [-1, 1]; one horizontal-flip draw per clip.

    The flip decision is clip-consistent: per-frame flips would scramble the
    temporal coherence of the mouth motion.
    """
    if isinstance(frames, VideoClip):
        frames = frames.frames
    x = np.asarray(frames).astype(np.float32) / 127.5 - 1.0
    flip = force_flip
    if flip is None:
        if training:
            if rng is None:
                raise ValueError("training-mode preprocessing needs an rng for the flip draw")
            flip = bool(rng.random() < 0.5)
        else:
            flip = False
    if flip:
        x = x[..., ::-1, :]  # width axis
    return np.ascontiguousarray(x)


def pick_speaker_reference(manifest: Manifest, row: ManifestRow, rng) -> Path:
    """Uniform same-speaker different-clip audio path; singletons fall back
    to their own audio with a warning."""
    others = [r for r in manifest.rows
              if r.speaker_id == row.speaker_id and r.id != row.id]
    if not others:
        log.warning("speaker %s has a single clip; using clip %s itself as the reference",
                    row.speaker_id, row.id)
        return manifest.resolve(row.audio_path)
    pick = others[int(rng.integers(len(others)))]
    return manifest.resolve(pick.audio_path)


# ---- synthetic corpus --------------------------------------------------------------


def _latent_trajectory(rng, n: int) -> np.ndarray:
    """Low-pass filtered noise at the video frame rate, in [0.15, 0.95]."""
    kernel = np.hanning(9)
    kernel /= kernel.sum()
    smooth = np.convolve(rng.standard_normal(n + 8), kernel, mode="valid")
    span = smooth.max() - smooth.min()
    if span == 0.0:
        return np.full(n, 0.5)
    return 0.15 + 0.8 * (smooth - smooth.min()) / span


def _render_frames(traj: np.ndarray, height: int, width: int) -> np.ndarray:
    y = np.arange(height, dtype=np.float64)[:, None]
    x = np.arange(width, dtype=np.float64)[None, :]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    a = 0.38 * width
    frames = np.empty((len(traj), height, width, 3), dtype=np.uint8)
    for t, v in enumerate(traj):
        b = max(0.06, 0.38 * v) * height
        q = ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2
        val = np.clip((1.25 - q) / 0.25, 0.0, 1.0)  # soft rim
        frames[t] = (20.0 + 210.0 * val).astype(np.uint8)[:, :, None]
    return frames


def _render_audio(traj: np.ndarray, f0: float, rng, sample_rate: int, fps: int) -> np.ndarray:
    n_samples = len(traj) * sample_rate // fps
    t = np.arange(n_samples, dtype=np.float64) / sample_rate
    tone = np.zeros(n_samples)
    for h in range(1, 6):
        tone += (1.0 / h) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    tone /= np.abs(tone).max()
    # envelope: per-sample linear interpolation of the frame-rate trajectory
    frame_pos = np.arange(n_samples) * fps / sample_rate
    envelope = np.interp(frame_pos, np.arange(len(traj)), traj)
    wave = 0.8 * envelope * tone + 0.003 * rng.standard_normal(n_samples)
    return wave.astype(np.float32)


def _split_for_index(i: int, total: int) -> str:
    if total >= 10:
        r = i % 10
        return "val" if r == 8 else "test" if r == 9 else "train"
    if i == total - 2:
        return "val"
    if i == total - 1:
        return "test"
    return "train"


def generate_synthetic_corpus(n_speakers: int, clips_per_speaker: int,
                              seconds_per_clip: float, seed: int, out_dir,
                              sample_rate: int = 24000, fps: int = 25,
                              height: int = 32, width: int = 32,
                              overwrite: bool = False) -> Path:
    """Write clips, WAVs and a manifest; returns the manifest path.

    Deterministic in the seed: per-speaker pitch and per-clip streams come
    from spawned seed sequences, so clips could be generated in parallel.
    """
    if min(n_speakers, clips_per_speaker) < 1 or seconds_per_clip <= 0:
        raise ConfigError("corpus counts must be >= 1 and duration positive")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {out} is not empty (pass overwrite to replace)")
    (out / "clips").mkdir(parents=True, exist_ok=True)
    (out / "wavs").mkdir(parents=True, exist_ok=True)

    root_ss = np.random.SeedSequence(seed)
    pitch_rng = np.random.default_rng(root_ss.spawn(1)[0])
    pitches = pitch_rng.uniform(100.0, 260.0, size=n_speakers)
    n_frames = max(1, int(round(seconds_per_clip * fps)))

    rows = []
    total = n_speakers * clips_per_speaker
    clip_seeds = root_ss.spawn(total + 1)[1:]
    for si in range(n_speakers):
        for ci in range(clips_per_speaker):
            idx = si * clips_per_speaker + ci
            rng = np.random.default_rng(clip_seeds[idx])
            traj = _latent_trajectory(rng, n_frames)
            frames = _render_frames(traj, height, width)
            audio = _render_audio(traj, pitches[si], rng, sample_rate, fps)
            clip_id = f"s{si:02d}c{ci:02d}"
            write_clip_file(out / "clips" / f"{clip_id}.avc", frames)
            write_wave_file(out / "wavs" / f"{clip_id}.wav", audio, sample_rate)
            rows.append(ManifestRow(
                id=clip_id,
                speaker_id=f"spk{si:02d}",
                video_path=f"clips/{clip_id}.avc",
                audio_path=f"wavs/{clip_id}.wav",
                split=_split_for_index(idx, total),
                transcript=f"speaker {si} clip {ci}",
            ))
    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, rows)
    return manifest_path
