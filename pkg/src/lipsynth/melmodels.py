"""Mel-spectrogram generators and the vocoder hook.

The base model upsamples visual features across time (video runs at 25 fps,
mel frames at 80 fps) inside its temporal module and decodes with a conformer
stack. The audio-visual variant encodes the synthesized mel with a single
linear layer, upsamples the visual features to the mel rate, and feeds the
concatenation through one bidirectional LSTM into the same decoder. Modality
masking follows the waveform family: a masked encoder is never run.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .blocks import (
    MODES_AVA,
    MODES_SINGLE,
    SPEAKER_EMBED_DIM,
    ConformerBlock,
    VideoFramesEncoder,
    as_frame_batch,
    modality,
    speaker_block,
    visual_feature_dim,
)
from .engine import LSTM, Dropout, Linear, Module, ModuleList, Tensor, concat, tanh
from .errors import ConfigError, DataError, ExternalToolError


@dataclass(frozen=True)
class MelGeneratorConfig:
    """Dimensions of the mel family; defaults are the S-size model."""

    num_conformer_blocks: int = 6
    attn_dim: int = 256
    heads: int = 4
    conv_kernel: int = 31
    ff_dim: int = 2048
    audio_enc_out: int = 64
    decoder_in: int = 768
    dropout: float = 0.1
    n_mels: int = 80
    width_divisor: int = 1

    @property
    def visual_dim(self) -> int:
        return visual_feature_dim(self.width_divisor)

    @property
    def av_concat_dim(self) -> int:
        return self.visual_dim + self.audio_enc_out + SPEAKER_EMBED_DIM

    def __post_init__(self):
        if self.num_conformer_blocks < 1:
            raise ConfigError("num_conformer_blocks must be >= 1")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        if self.decoder_in != self.visual_dim + SPEAKER_EMBED_DIM:
            raise ConfigError(
                f"decoder_in must be visual {self.visual_dim} + speaker "
                f"{SPEAKER_EMBED_DIM}, got {self.decoder_in}"
            )
        if self.decoder_in % 2:
            raise ConfigError("decoder_in must be even (bidirectional halves it)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


def mel_config_vs() -> MelGeneratorConfig:
    return MelGeneratorConfig(num_conformer_blocks=2)


def mel_config_s() -> MelGeneratorConfig:
    return MelGeneratorConfig(num_conformer_blocks=6)


def mel_config_m() -> MelGeneratorConfig:
    return MelGeneratorConfig(num_conformer_blocks=12)


def mel_config_tiny() -> MelGeneratorConfig:
    """Desk-scale preset: two narrow conformer blocks, short conv kernel."""
    return MelGeneratorConfig(
        num_conformer_blocks=2,
        attn_dim=16,
        heads=2,
        conv_kernel=7,
        ff_dim=32,
        audio_enc_out=8,
        decoder_in=visual_feature_dim(16) + SPEAKER_EMBED_DIM,
        width_divisor=16,
    )


# ---- temporal upsampling -----------------------------------------------------------


def upsample_indices(n: int, target: int) -> np.ndarray:
    """Nearest-neighbor source index for each of target steps over n frames."""
    if target < n:
        raise ValueError(f"target length {target} shorter than source length {n}")
    j = np.arange(target, dtype=np.int64)
    # floor(j*n/target + 0.5) in exact integer arithmetic, clamped to the end
    return np.minimum((2 * j * n + target) // (2 * target), n - 1)


def upsample_nearest(x: Tensor, target: int) -> Tensor:
    """(B, N, D) -> (B, target, D); repeats rows per the nearest-index map."""
    n = x.data.shape[1]
    idx = upsample_indices(n, target)
    onehot = np.zeros((target, n), dtype=x.data.dtype)
    onehot[np.arange(target), idx] = 1.0
    return Tensor(onehot) @ x


class V2AMelTemporal(Module):
    """LSTM -> nearest-neighbor upsampling to the mel rate -> LSTM."""

    def __init__(self, dim: int, rng):
        super().__init__()
        self.lstm_pre = LSTM(dim, dim // 2, rng, bidirectional=True)
        self.lstm_post = LSTM(dim, dim // 2, rng, bidirectional=True)

    def forward(self, x: Tensor, target_len: int) -> Tensor:
        h = upsample_nearest(self.lstm_pre(x), target_len)
        return self.lstm_post(h)


class MelDecoder(Module):
    """(B, T', decoder_in) -> (B, T', n_mels) mel frames in [-1, 1]."""

    def __init__(self, cfg: MelGeneratorConfig, rng, modes=MODES_SINGLE):
        super().__init__()
        self.lin_in = Linear(cfg.decoder_in, cfg.attn_dim, rng)
        self.drop = Dropout(cfg.dropout)
        self.blocks = ModuleList(
            [ConformerBlock(cfg.attn_dim, cfg.heads, cfg.ff_dim, cfg.conv_kernel,
                            rng, cfg.dropout, modes)
             for _ in range(cfg.num_conformer_blocks)]
        )
        self.lin_out = Linear(cfg.attn_dim, cfg.n_mels, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.drop(self.lin_in(x))
        for block in self.blocks:
            h = block(h)
        return tanh(self.lin_out(h))


def _as_mel(mel, n_mels: int) -> np.ndarray:
    m = np.asarray(mel.data if isinstance(mel, Tensor) else mel, dtype=np.float32)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3 or m.shape[1] == 0:
        raise DataError(f"expected non-empty (T', {n_mels}) mel frames, got shape {m.shape}")
    if m.shape[2] != n_mels:
        raise DataError(f"expected {n_mels} mel bands, got {m.shape[2]}")
    return m


class V2AMelGenerator(Module):
    """Video frames + speaker embedding -> (T', 80) log-mel in [-1, 1]."""

    def __init__(self, cfg: MelGeneratorConfig, rng, modes=MODES_SINGLE):
        super().__init__()
        self.cfg = cfg
        self.video_encoder = VideoFramesEncoder(rng, cfg.width_divisor, modes)
        self.temporal = V2AMelTemporal(cfg.decoder_in, rng)
        self.decoder = MelDecoder(cfg, rng, modes)
        self.set_rng(rng)

    def forward(self, frames, spk, target_len: int) -> Tensor:
        frames, squeeze = as_frame_batch(frames)
        b, n = frames.data.shape[:2]
        if target_len < n:
            raise ValueError(f"target length {target_len} shorter than {n} frames")
        vis = self.video_encoder(frames)
        x = concat([vis, speaker_block(spk, b, n)], axis=2)
        mel = self.decoder(self.temporal(x, target_len))
        return mel.reshape(target_len, self.cfg.n_mels) if squeeze else mel


class AV2AMelGenerator(Module):
    """Adds a linear synthesized-mel branch; modality selects which blocks run.

    The mel input sets the output length T'; visual features are upsampled to
    it. Mode "v" zeroes the audio block without running the audio encoder and
    mode "a" zeroes the visual and speaker blocks without running the video
    encoder.
    """

    def __init__(self, cfg: MelGeneratorConfig, rng, modes=MODES_AVA):
        super().__init__()
        self.cfg = cfg
        self.video_encoder = VideoFramesEncoder(rng, cfg.width_divisor, modes)
        self.audio_encoder = Linear(cfg.n_mels, cfg.audio_enc_out, rng)
        self.temporal = LSTM(cfg.av_concat_dim, cfg.decoder_in // 2, rng,
                             bidirectional=True)
        self.decoder = MelDecoder(cfg, rng, modes)
        self.set_rng(rng)

    def forward(self, frames, synth_mel, spk, mode: str = "av") -> Tensor:
        if mode not in MODES_AVA:
            raise ValueError(f"unknown modality {mode!r}, expected one of {MODES_AVA}")
        frames, squeeze = as_frame_batch(frames)
        b, n = frames.data.shape[:2]
        if synth_mel is None:
            raise ValueError("synthesized mel is required (it sets the output length)")
        mel = _as_mel(synth_mel, self.cfg.n_mels)
        if mel.shape[0] == 1 and b > 1:
            mel = np.broadcast_to(mel, (b,) + mel.shape[1:])
        if mel.shape[0] != b:
            raise ValueError(f"mel batch {mel.shape[0]} does not match frames batch {b}")
        t = mel.shape[1]
        if t < n:
            raise ValueError(f"mel length {t} shorter than {n} video frames")
        with modality(mode):
            if mode == "a":
                vis_up = Tensor(np.zeros((b, t, self.cfg.visual_dim), dtype=np.float32))
            else:
                vis_up = upsample_nearest(self.video_encoder(frames), t)
            if mode == "v":
                au = Tensor(np.zeros((b, t, self.cfg.audio_enc_out), dtype=np.float32))
            else:
                au = self.audio_encoder(Tensor(np.ascontiguousarray(mel)))
            x = concat([vis_up, au, speaker_block(spk, b, t, zero=mode == "a")], axis=2)
            out = self.decoder(self.temporal(x))
        return out.reshape(t, self.cfg.n_mels) if squeeze else out


# ---- vocoder hook ------------------------------------------------------------------


def vocode(mel: np.ndarray, backend: str = "griffin_lim",
           mel_cfg: dsp.MelConfig | None = None, command=None,
           n_iters: int = 60) -> np.ndarray:
    """Turn (T', n_mels) log-mel frames in [-1, 1] into a waveform.

    griffin_lim inverts the filterbank and reconstructs phase in-process;
    external writes the mel to a temporary file and runs the configured
    command as `cmd <mel-file> <wav-file>`.
    """
    mel = np.asarray(mel, dtype=np.float32)
    cfg = mel_cfg if mel_cfg is not None else dsp.default_mel_config()
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise DataError(f"expected non-empty (T', {cfg.n_mels}) mel frames, got shape {mel.shape}")
    if mel.shape[1] != cfg.n_mels:
        raise DataError(f"expected {cfg.n_mels} mel bands, got {mel.shape[1]}")
    if backend == "griffin_lim":
        return dsp.vocode_log_mel(mel, cfg, n_iters=n_iters)
    if backend != "external":
        raise ConfigError(f"unknown vocoder backend {backend!r}")
    if not command:
        raise ConfigError("external vocoder backend needs a command")
    from .data import read_wave_file, write_mel_file

    cmd = shlex.split(command) if isinstance(command, str) else list(command)
    with tempfile.TemporaryDirectory() as td:
        mel_path = Path(td) / "input.mel"
        wav_path = Path(td) / "output.wav"
        write_mel_file(mel_path, mel)
        proc = subprocess.run([*cmd, str(mel_path), str(wav_path)],
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise ExternalToolError(
                f"vocoder command exited {proc.returncode}: {proc.stderr.strip()}"
            )
        if not wav_path.exists():
            raise ExternalToolError("vocoder command wrote no output file")
        wave, rate = read_wave_file(wav_path)
        if rate != cfg.sample_rate:
            raise ExternalToolError(
                f"vocoder produced {rate} Hz audio, expected {cfg.sample_rate}"
            )
        return wave
