"""Two-step bootstrap: synthesize a parallel audio track with a trained
video-only model, then seed the audio-visual model from its weights.

The transplant copies the video encoder, the decoder, and (wave family) the
discriminator bit for bit; normalization statistics recorded under the single
video-only mode seed all three modality modes.  The audio encoder and the
temporal stack start fresh.
"""

import dataclasses
import os
import re
from pathlib import Path

import numpy as np

from .data import (preprocess_frames, pick_speaker_reference, read_clip_file,
                   read_manifest, read_wave_file, write_manifest,
                   write_mel_file, write_wave_file)
from .engine import Tensor
from .errors import ConfigError, DataError
from .training import (_encoder_from_spec, build_models_from_meta,
                       load_checkpoint, load_checkpoint_meta,
                       mel_cfg_from_dict)

TRANSPLANT_PREFIXES = ("video_encoder.", "decoder.")

_MODE_STAT = re.compile(r"(.*running_(?:mean|var)_)(av|v|a)$")


def build_av2a_from_v2a(checkpoint, rng):
    """Audio-visual generator (and discriminator for the wave family) seeded
    from a trained video-only checkpoint.

    Returns (generator, discriminator_or_None, source_meta).  Transplanted
    parameters are copied exactly; per-mode normalization statistics fan out
    from the source's single mode.
    """
    meta = load_checkpoint_meta(checkpoint)
    if meta.get("kind") != "v2a":
        raise ConfigError(
            f"transplant source must be a v2a checkpoint, got kind {meta.get('kind')!r}")
    src_gen, src_disc = build_models_from_meta(meta)
    load_checkpoint(checkpoint, src_gen, src_disc)

    gen, disc = build_models_from_meta(dict(meta, kind="av2a"), rng)
    state = gen.state_arrays()
    src = src_gen.state_arrays()
    for name in state:
        if not name.startswith(TRANSPLANT_PREFIXES):
            continue
        if name in src:
            state[name] = src[name].copy()
            continue
        m = _MODE_STAT.match(name)
        if m is None or m.group(1) + "default" not in src:
            raise DataError(f"no source tensor for transplanted {name!r}")
        state[name] = src[m.group(1) + "default"].copy()
    gen.load_state_arrays(state)
    if disc is not None:
        disc.load_state_arrays(src_disc.state_arrays())
    return gen, disc, meta


def synthesize_dataset(checkpoint, manifest_path, out_dir, seed: int = 0,
                       fps: int = 25) -> Path:
    """Run a trained video-only model over every manifest row and write the
    synthesized track next to a new manifest; returns the new manifest path.

    Wave models emit WAV files.  Mel models emit mel files whose length comes
    from the clip duration alone, so no ground-truth timing leaks in.
    """
    meta = load_checkpoint_meta(checkpoint)
    if meta.get("kind") != "v2a":
        raise ConfigError(
            f"synthesis needs a v2a checkpoint, got kind {meta.get('kind')!r}")
    gen, _ = build_models_from_meta(meta)
    load_checkpoint(checkpoint, gen)
    gen.eval()
    family, rate = meta["family"], meta["sample_rate"]
    mel_cfg = mel_cfg_from_dict(meta["config"]["mel"])
    se = meta["speaker_encoder"]
    encoder = _encoder_from_spec(se["name"], rate, se.get("weights"))

    manifest = read_manifest(manifest_path)
    out = Path(out_dir)
    (out / "synth").mkdir(parents=True, exist_ok=True)
    # one seeded stream, rows in manifest order: reruns are byte-identical
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rows, failures = [], []
    for row in manifest.rows:
        try:
            frames_u8 = read_clip_file(manifest.resolve(row.video_path))
            frames = Tensor(preprocess_frames(frames_u8, training=False)[None])
            ref, _ = read_wave_file(pick_speaker_reference(manifest, row, rng))
            spk = encoder.embed(ref)[None]
            if family == "mel":
                hop = mel_cfg.stft.hop_size
                target_len = 1 + round(frames_u8.shape[0] * rate / fps) // hop
                mel = gen.forward(frames, spk, target_len=target_len)
                rel = f"synth/{row.id}.mel"
                write_mel_file(out / rel, np.asarray(mel.data[0], dtype=np.float32))
            else:
                wave = gen.forward(frames, spk)
                rel = f"synth/{row.id}.wav"
                write_wave_file(out / rel,
                                np.asarray(wave.data[0], dtype=np.float32), rate)
            rows.append(dataclasses.replace(
                row,
                video_path=os.path.relpath(manifest.resolve(row.video_path), out),
                audio_path=os.path.relpath(manifest.resolve(row.audio_path), out),
                synth_audio_path=rel))
        except (DataError, ValueError) as exc:
            failures.append(f"{row.id}: {exc}")
    if failures:
        raise DataError("synthesis failed for " + "; ".join(failures))
    path = out / "manifest.jsonl"
    write_manifest(path, rows)
    return path
