"""Raw-waveform generators and their multi-scale discriminator.

The base model maps video frames plus a speaker embedding to a waveform; the
audio-visual variant adds a waveform audio encoder fed with synthesized audio
and widens the temporal module accordingly. Both share the dilated upsampling
decoder. Feature blocks are zeroed per modality so that a branch never runs
the encoder it masks, which keeps the masked encoder's parameters and running
statistics untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import (
    MODES_AVA,
    MODES_SINGLE,
    SPEAKER_EMBED_DIM,
    DilatedResidual1d,
    ModalityBatchNorm,
    VideoFramesEncoder,
    as_frame_batch,
    modality,
    speaker_block,
    visual_feature_dim,
)
from .engine import (
    LSTM,
    AvgPool1d,
    Conv1d,
    ConvTranspose1d,
    Module,
    ModuleList,
    Tensor,
    concat,
    leaky_relu,
    tanh,
)
from .errors import ConfigError, DataError

LEAKY_SLOPE = 0.2

@dataclass(frozen=True)
class WaveGeneratorConfig:
    """Dimensions of the waveform family; defaults are the full-size model."""

    sample_rate: int = 24000
    samples_per_frame: int = 960
    upsample_factors: tuple = (4, 4, 4, 5, 3)
    temporal_hidden: int = 512
    audio_feat_dim: int = 256
    v_input_dim: int = 768
    av_input_dim: int = 1024
    width_divisor: int = 1

    @property
    def visual_dim(self) -> int:
        return visual_feature_dim(self.width_divisor)

    def __post_init__(self):
        object.__setattr__(self, "upsample_factors", tuple(self.upsample_factors))
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")
        if math.prod(self.upsample_factors) != self.samples_per_frame:
            raise ConfigError(
                f"upsample factors {self.upsample_factors} multiply to "
                f"{math.prod(self.upsample_factors)}, not {self.samples_per_frame}"
            )
        if self.temporal_hidden % 2:
            raise ConfigError("temporal_hidden must be even (bidirectional halves it)")
        if self.v_input_dim != self.visual_dim + SPEAKER_EMBED_DIM:
            raise ConfigError(
                f"v_input_dim must be visual {self.visual_dim} + speaker "
                f"{SPEAKER_EMBED_DIM}, got {self.v_input_dim}"
            )
        if self.av_input_dim != self.v_input_dim + self.audio_feat_dim:
            raise ConfigError(
                f"av_input_dim must be v_input_dim {self.v_input_dim} + audio "
                f"{self.audio_feat_dim}, got {self.av_input_dim}"
            )


def wave_config_full() -> WaveGeneratorConfig:
    return WaveGeneratorConfig()


def wave_config_tiny() -> WaveGeneratorConfig:
    """Desk-scale preset: 8 kHz, 320 samples per frame, narrow everywhere."""
    visual = visual_feature_dim(16)
    return WaveGeneratorConfig(
        sample_rate=8000,
        samples_per_frame=320,
        upsample_factors=(4, 4, 4, 5),
        temporal_hidden=64,
        audio_feat_dim=32,
        v_input_dim=visual + SPEAKER_EMBED_DIM,
        av_input_dim=visual + SPEAKER_EMBED_DIM + 32,
        width_divisor=16,
    )


def _up_kernel(factor: int) -> tuple:
    # Kernel/padding pairs that hit exactly length*factor (transposed) or
    # length/factor (strided) for the lengths this family produces.
    if factor % 2 == 0:
        return 2 * factor, factor // 2
    return 2 * factor + 1, (factor + 1) // 2


def align_synth_audio(audio, n_frames: int, samples_per_frame: int) -> np.ndarray:
    """Zero-pad or trim synthesized audio to n_frames of samples, batched.

    Tolerates a mismatch of at most one frame; anything larger means the
    caller paired the wrong clip and is an error rather than a silent fix.
    """
    a = np.asarray(audio.data if isinstance(audio, Tensor) else audio, dtype=np.float32)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DataError(f"expected (T,) or (B, T) audio, got shape {a.shape}")
    target = n_frames * samples_per_frame
    diff = a.shape[1] - target
    if abs(diff) > samples_per_frame:
        raise DataError(
            f"synthesized audio length {a.shape[1]} is more than one frame "
            f"({samples_per_frame}) away from {target}"
        )
    if diff > 0:
        return a[:, :target]
    if diff < 0:
        return np.pad(a, ((0, 0), (0, -diff)))
    return a


class TemporalModule(Module):
    """Stacked bidirectional LSTM mapping (B, N, in) to (B, N, hidden)."""

    def __init__(self, input_dim: int, hidden: int, rng, num_layers: int = 2):
        super().__init__()
        self.lstm = LSTM(input_dim, hidden // 2, rng,
                         bidirectional=True, num_layers=num_layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.lstm(x)


class _UpsampleResidualBlock(Module):
    """Transposed-conv upsampling, two dilated stacks, leaky activation."""

    def __init__(self, cin: int, cout: int, factor: int, rng):
        super().__init__()
        k, p = _up_kernel(factor)
        self.up = ConvTranspose1d(cin, cout, k, rng, stride=factor, padding=p,
                                  weight_norm=True)
        self.stacks = ModuleList(
            [DilatedResidual1d(cout, 3 ** s, rng) for s in range(2)]
        )

    def forward(self, x: Tensor) -> Tensor:
        h = self.up(x)
        for stack in self.stacks:
            h = stack(h)
        return leaky_relu(h, LEAKY_SLOPE)


class WaveDecoder(Module):
    """(B, N, hidden) temporal features -> (B, N*samples_per_frame) waveform.

    Convolution, a stride-1 transposed-conv block, then one upsampling
    residual block per factor with channel counts halving; tanh output.
    """

    def __init__(self, cfg: WaveGeneratorConfig, rng):
        super().__init__()
        self.cfg = cfg
        c = visual_feature_dim(cfg.width_divisor)
        self.conv_in = Conv1d(cfg.temporal_hidden, c, 7, rng, padding=3,
                              weight_norm=True)
        self.pre = ConvTranspose1d(c, c, 3, rng, stride=1, padding=1,
                                   weight_norm=True)
        blocks = []
        for factor in cfg.upsample_factors:
            cout = max(c // 2, 4)
            blocks.append(_UpsampleResidualBlock(c, cout, factor, rng))
            c = cout
        self.blocks = ModuleList(blocks)
        self.conv_out = Conv1d(c, 1, 7, rng, padding=3, weight_norm=True)

    def forward(self, feats: Tensor) -> Tensor:
        if feats.data.ndim != 3 or feats.data.shape[2] != self.cfg.temporal_hidden:
            raise ValueError(
                f"expected (B, N, {self.cfg.temporal_hidden}) features, "
                f"got {feats.data.shape}"
            )
        h = self.pre(self.conv_in(feats.swapaxes(1, 2)))
        for block in self.blocks:
            h = block(h)
        wave = tanh(self.conv_out(h))
        b, _, t = wave.data.shape
        return wave.reshape(b, t)


class WaveAudioEncoder(Module):
    """Waveform -> (B, N, audio_feat_dim) features at the video frame rate.

    Strided stages mirror the decoder's upsample factors in reverse; batch
    normalization is modality-conditioned, two dilated residual stacks and a
    tanh-bounded projection close the stack.
    """

    def __init__(self, cfg: WaveGeneratorConfig, rng, modes=MODES_AVA):
        super().__init__()
        self.cfg = cfg
        factors = tuple(reversed(cfg.upsample_factors))
        n_stages = len(factors)
        chans = [max(cfg.audio_feat_dim // 2 ** (n_stages - j), 4)
                 for j in range(n_stages + 1)]
        self.conv_in = Conv1d(1, chans[0], 7, rng, padding=3, weight_norm=True)
        self.bn_in = ModalityBatchNorm(chans[0], modes)
        downs, bns = [], []
        for j, factor in enumerate(factors):
            k, p = _up_kernel(factor)
            downs.append(Conv1d(chans[j], chans[j + 1], k, rng, stride=factor,
                                padding=p, weight_norm=True))
            bns.append(ModalityBatchNorm(chans[j + 1], modes))
        self.downs = ModuleList(downs)
        self.bns = ModuleList(bns)
        self.stacks = ModuleList(
            [DilatedResidual1d(chans[-1], 3 ** s, rng) for s in range(2)]
        )
        self.conv_out = Conv1d(chans[-1], cfg.audio_feat_dim, 7, rng, padding=3,
                               weight_norm=True)

    def forward(self, audio) -> Tensor:
        x = audio if isinstance(audio, Tensor) else Tensor(np.asarray(audio, dtype=np.float32))
        if x.data.ndim == 1:
            x = x.reshape(1, x.data.shape[0])
        if x.data.ndim != 2 or x.data.shape[1] == 0:
            raise DataError(f"expected non-empty (B, T) audio, got shape {x.data.shape}")
        b, t = x.data.shape
        if t % self.cfg.samples_per_frame:
            raise DataError(
                f"audio length {t} not divisible by {self.cfg.samples_per_frame}"
            )
        h = self.bn_in(self.conv_in(x.reshape(b, 1, t)))
        for down, bn in zip(self.downs, self.bns):
            h = bn(down(leaky_relu(h, LEAKY_SLOPE)))
        for stack in self.stacks:
            h = stack(h)
        h = tanh(self.conv_out(leaky_relu(h, LEAKY_SLOPE)))
        return h.swapaxes(1, 2)


class V2AWaveGenerator(Module):
    """Video frames + speaker embedding -> raw waveform in [-1, 1]."""

    def __init__(self, cfg: WaveGeneratorConfig, rng, modes=MODES_SINGLE):
        super().__init__()
        self.cfg = cfg
        self.video_encoder = VideoFramesEncoder(rng, cfg.width_divisor, modes)
        self.temporal = TemporalModule(cfg.v_input_dim, cfg.temporal_hidden, rng)
        self.decoder = WaveDecoder(cfg, rng)

    def forward(self, frames, spk) -> Tensor:
        frames, squeeze = as_frame_batch(frames)
        b, n = frames.data.shape[:2]
        vis = self.video_encoder(frames)
        x = concat([vis, speaker_block(spk, b, n)], axis=2)
        wave = self.decoder(self.temporal(x))
        return wave.reshape(wave.data.shape[1]) if squeeze else wave


class AV2AWaveGenerator(Module):
    """Adds a synthesized-audio branch; modality selects which blocks run.

    Mode "v" never runs the audio encoder (its block is zeros) and mode "a"
    never runs the video encoder and zeroes the speaker block, so the masked
    branch's parameters see no gradient and its statistics never move.
    """

    def __init__(self, cfg: WaveGeneratorConfig, rng, modes=MODES_AVA):
        super().__init__()
        self.cfg = cfg
        self.video_encoder = VideoFramesEncoder(rng, cfg.width_divisor, modes)
        self.audio_encoder = WaveAudioEncoder(cfg, rng, modes)
        self.temporal = TemporalModule(cfg.av_input_dim, cfg.temporal_hidden, rng)
        self.decoder = WaveDecoder(cfg, rng)

    def forward(self, frames, synth_audio, spk, mode: str = "av") -> Tensor:
        if mode not in MODES_AVA:
            raise ValueError(f"unknown modality {mode!r}, expected one of {MODES_AVA}")
        frames, squeeze = as_frame_batch(frames)
        b, n = frames.data.shape[:2]
        with modality(mode):
            if mode == "a":
                vis = Tensor(np.zeros((b, n, self.cfg.visual_dim), dtype=np.float32))
            else:
                vis = self.video_encoder(frames)
            if mode == "v":
                au = Tensor(np.zeros((b, n, self.cfg.audio_feat_dim), dtype=np.float32))
            else:
                if synth_audio is None:
                    raise ValueError(f"mode {mode!r} requires synthesized audio")
                aligned = align_synth_audio(synth_audio, n, self.cfg.samples_per_frame)
                if aligned.shape[0] == 1 and b > 1:
                    aligned = np.broadcast_to(aligned, (b, aligned.shape[1]))
                if aligned.shape[0] != b:
                    raise ValueError(
                        f"audio batch {aligned.shape[0]} does not match frames batch {b}"
                    )
                au = self.audio_encoder(np.ascontiguousarray(aligned))
            x = concat([vis, au, speaker_block(spk, b, n, zero=mode == "a")], axis=2)
            wave = self.decoder(self.temporal(x))
        return wave.reshape(wave.data.shape[1]) if squeeze else wave


# ---- discriminator -----------------------------------------------------------------


@dataclass(frozen=True)
class DiscriminatorConfig:
    num_scales: int = 3
    downsample_factor: int = 2
    leaky_slope: float = 0.2
    width_divisor: int = 1

    def __post_init__(self):
        if self.num_scales < 1:
            raise ConfigError("num_scales must be >= 1")
        if self.downsample_factor < 2:
            raise ConfigError("downsample_factor must be >= 2")
        if self.width_divisor < 1:
            raise ConfigError("width_divisor must be >= 1")


class _DiscriminatorBlock(Module):
    """Kernel-15 conv, four grouped stride-4 convs, kernel-5 conv, kernel-3 map."""

    def __init__(self, rng, slope: float, width_divisor: int):
        super().__init__()
        self.slope = slope
        widths = [max(c // width_divisor, 4) for c in (16, 64, 256, 1024, 1024)]
        convs = [Conv1d(1, widths[0], 15, rng, padding=7, weight_norm=True)]
        cin, groups = widths[0], 4
        for w in widths[1:]:
            g = min(groups, cin, w)  # widths are powers of two, so g divides both
            convs.append(Conv1d(cin, w, 41, rng, stride=4, padding=20, groups=g,
                                weight_norm=True))
            cin, groups = w, groups * 4
        convs.append(Conv1d(cin, cin, 5, rng, padding=2, weight_norm=True))
        self.convs = ModuleList(convs)
        self.conv_score = Conv1d(cin, 1, 3, rng, padding=1, weight_norm=True)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = leaky_relu(conv(h), self.slope)
        score = self.conv_score(h)
        return score.reshape(score.data.shape[0], score.data.shape[2])


class MultiScaleWaveDiscriminator(Module):
    """Identical blocks applied to progressively average-pooled waveforms."""

    def __init__(self, rng, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        self.blocks = ModuleList(
            [_DiscriminatorBlock(rng, cfg.leaky_slope, cfg.width_divisor)
             for _ in range(cfg.num_scales)]
        )
        df = cfg.downsample_factor
        self.pool = AvgPool1d(2 * df, df, padding=df // 2)

    def forward(self, wave) -> list:
        x = wave if isinstance(wave, Tensor) else Tensor(np.asarray(wave, dtype=np.float32))
        if x.data.ndim == 1:
            x = x.reshape(1, x.data.shape[0])
        if x.data.ndim != 2:
            raise ValueError(f"expected (B, T) waveform, got shape {x.data.shape}")
        x = x.reshape(x.data.shape[0], 1, x.data.shape[1])
        scores = []
        for i, block in enumerate(self.blocks):
            scores.append(block(x))
            if i + 1 < len(self.blocks):
                x = self.pool(x)
        return scores
