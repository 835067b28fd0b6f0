"""Shared differentiable building blocks.

Modality-conditioned batch normalization keeps one affine pair but separate
running statistics per modality; which set is active is scoped through the
``modality`` context manager rather than threaded through every forward.
Also here: the video frames encoder (3D stem + per-frame residual trunk),
the pluggable speaker encoder, dilated residual stacks, and conformer blocks.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from . import dsp
from .engine import (
    Conv1d,
    Conv2d,
    Conv3d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    PReLU,
    Tensor,
    glu,
    leaky_relu,
    ops,
    pad_constant,
    relu,
    silu,
    softmax,
)
from .errors import ConfigError, DataError

MODES_SINGLE = ("default",)
MODES_AVA = ("av", "v", "a")

_ACTIVE_MODE: contextvars.ContextVar[str] = contextvars.ContextVar(
    "modality", default="default"
)


def active_modality() -> str:
    return _ACTIVE_MODE.get()


@contextlib.contextmanager
def modality(mode: str):
    """Scope the active modality for every ModalityBatchNorm underneath."""
    token = _ACTIVE_MODE.set(mode)
    try:
        yield
    finally:
        _ACTIVE_MODE.reset(token)


class ModalityBatchNorm(Module):
    """Batch norm with shared affine and per-modality running statistics.

    Training updates only the active mode's statistics; eval normalizes with
    exactly the active mode's stored mean/variance. Variances are biased.
    """

    def __init__(self, num_features: int, modes=MODES_SINGLE,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.modes = tuple(modes)
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(num_features, dtype=np.float32))
        self.bias = Parameter(np.zeros(num_features, dtype=np.float32))
        for m in self.modes:
            self.register_buffer(f"running_mean_{m}", np.zeros(num_features, dtype=np.float32))
            self.register_buffer(f"running_var_{m}", np.ones(num_features, dtype=np.float32))

    def stats(self, mode: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"running_mean_{mode}"), getattr(self, f"running_var_{mode}")

    def forward(self, x: Tensor) -> Tensor:
        mode = active_modality()
        if mode not in self.modes:
            raise ValueError(f"modality {mode!r} not among {self.modes}")
        if x.data.shape[1] != self.num_features:
            raise ValueError(f"expected {self.num_features} channels, got {x.data.shape[1]}")
        if self.training:
            axes = (0,) + tuple(range(2, x.data.ndim))
            mean = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            rm, rv = self.stats(mode)
            mom = self.momentum
            setattr(self, f"running_mean_{mode}",
                    ((1.0 - mom) * rm + mom * mean).astype(rm.dtype))
            setattr(self, f"running_var_{mode}",
                    ((1.0 - mom) * rv + mom * var).astype(rv.dtype))
            return ops.batch_norm_train(x, self.weight, self.bias, mean, var, self.eps)
        rm, rv = self.stats(mode)
        shape = (1, self.num_features) + (1,) * (x.data.ndim - 2)
        scale = (self.weight / np.sqrt(rv + self.eps).astype(rv.dtype)).reshape(shape)
        shift = self.bias.reshape(shape)
        return (x - rm.reshape(shape)) * scale + shift


# ---- waveform-side residual stack ------------------------------------------------


class DilatedResidual1d(Module):
    """Leaky -> dilated k3 conv -> leaky -> k1 conv, with identity skip."""

    def __init__(self, channels: int, dilation: int, rng,
                 leaky: float = 0.2, weight_norm: bool = True):
        super().__init__()
        self.leaky = leaky
        self.conv_dil = Conv1d(channels, channels, 3, rng, padding=dilation,
                               dilation=dilation, weight_norm=weight_norm)
        self.conv_out = Conv1d(channels, channels, 1, rng, weight_norm=weight_norm)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_dil(leaky_relu(x, self.leaky))
        h = self.conv_out(leaky_relu(h, self.leaky))
        return x + h


# ---- video frames encoder ---------------------------------------------------------


def visual_feature_dim(width_divisor: int) -> int:
    """Output width of VideoFramesEncoder at the given divisor."""
    return max(512 // width_divisor, 4)


class _Stem3d(Module):
    """Spatiotemporal front end: temporal kernel 5 (two frames of context per
    side), spatial stride 2, then 3x3/2 max pooling. Time length is kept."""

    def __init__(self, out_channels: int, rng, modes=MODES_SINGLE):
        super().__init__()
        self.conv = Conv3d(3, out_channels, (5, 7, 7), rng, stride=(1, 2, 2),
                           padding=(2, 3, 3), bias=False)
        self.bn = ModalityBatchNorm(out_channels, modes)
        self.act = PReLU(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        """x (B, 3, N, H, W) -> (B, C, N, H', W'); pooling folds N into batch."""
        h = self.act(self.bn(self.conv(x)))
        b, c, n, hh, ww = h.data.shape
        flat = h.transpose(0, 2, 1, 3, 4).reshape(b * n, c, hh, ww)
        pooled = ops.max_pool2d(flat, (3, 3), (2, 2), (1, 1))
        ph, pw = pooled.data.shape[-2:]
        return pooled.reshape(b, n, c, ph, pw).transpose(0, 2, 1, 3, 4)


class _BasicBlock2d(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng, modes=MODES_SINGLE):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, (3, 3), rng, stride=(stride, stride),
                            padding=(1, 1), bias=False)
        self.bn1 = ModalityBatchNorm(cout, modes)
        self.conv2 = Conv2d(cout, cout, (3, 3), rng, padding=(1, 1), bias=False)
        self.bn2 = ModalityBatchNorm(cout, modes)
        self.downsample = cin != cout or stride != 1
        if self.downsample:
            self.proj = Conv2d(cin, cout, (1, 1), rng, stride=(stride, stride), bias=False)
            self.proj_bn = ModalityBatchNorm(cout, modes)

    def forward(self, x: Tensor) -> Tensor:
        h = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        skip = self.proj_bn(self.proj(x)) if self.downsample else x
        return relu(h + skip)


class VideoFramesEncoder(Module):
    """(B, N, H, W, 3) frames -> (B, N, D) features, D = 512 // width_divisor.

    The 3D stem is the only temporal mixing (5-frame receptive field); the
    residual trunk processes frames independently and an adaptive average
    pool absorbs arbitrary spatial resolution.
    """

    def __init__(self, rng, width_divisor: int = 1, modes=MODES_SINGLE):
        super().__init__()
        widths = [max(w // width_divisor, 4) for w in (64, 128, 256, 512)]
        self.out_dim = widths[-1]
        self.stem = _Stem3d(widths[0], rng, modes)
        blocks = []
        cin = widths[0]
        for stage, w in enumerate(widths):
            for i in range(2):
                stride = 2 if stage > 0 and i == 0 else 1
                blocks.append(_BasicBlock2d(cin, w, stride, rng, modes))
                cin = w
        self.trunk = ModuleList(blocks)

    def forward(self, frames: Tensor) -> Tensor:
        if frames.data.shape[-1] != 3:
            raise DataError(f"expected RGB frames, got shape {frames.data.shape}")
        squeeze = frames.data.ndim == 4
        if squeeze:
            frames = frames.reshape(1, *frames.data.shape)
        if frames.data.ndim != 5:
            raise DataError(f"expected (B, N, H, W, 3) frames, got {frames.data.shape}")
        b, n = frames.data.shape[:2]
        x = frames.transpose(0, 4, 1, 2, 3)  # (B, 3, N, H, W)
        h = self.stem(x)
        c = h.data.shape[1]
        hh, ww = h.data.shape[-2:]
        h = h.transpose(0, 2, 1, 3, 4).reshape(b * n, c, hh, ww)
        for blk in self.trunk:
            h = blk(h)
        feats = h.mean(axis=(2, 3)).reshape(b, n, self.out_dim)
        return feats.reshape(n, self.out_dim) if squeeze else feats


def as_frame_batch(frames) -> tuple[Tensor, bool]:
    """Coerce (N, H, W, 3) or (B, N, H, W, 3) frames to a batched Tensor.

    Returns the tensor and whether the batch axis was added (so callers can
    squeeze their output to match).
    """
    t = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float32))
    squeeze = t.data.ndim == 4
    if squeeze:
        t = t.reshape(1, *t.data.shape)
    if t.data.ndim != 5:
        raise DataError(f"expected (B, N, H, W, 3) frames, got {t.data.shape}")
    return t, squeeze


# ---- speaker encoder ---------------------------------------------------------------

SPEAKER_EMBED_DIM = 256
_STUB_STATS_DIM = 160  # normalized log-mel mean ++ std
_STUB_SEED = 0x5BEA4E5


class StubSpeakerEncoder:
    """Frozen stand-in for a pretrained verification network.

    Projects per-clip normalized log-mel mean/std statistics through a fixed
    seeded matrix and L2-normalizes; deterministic and parameter-free from
    the caller's point of view.
    """

    id = "stub"

    def __init__(self, sample_rate: int = 24000):
        self.sample_rate = sample_rate
        self.mel_cfg = dsp.default_mel_config(sample_rate)
        rng = np.random.default_rng(_STUB_SEED)
        self.projection = (
            rng.standard_normal((SPEAKER_EMBED_DIM, _STUB_STATS_DIM))
            / np.sqrt(_STUB_STATS_DIM)
        ).astype(np.float32)

    def embed(self, wave: np.ndarray) -> np.ndarray:
        lm = dsp.log_mel(np.asarray(wave, dtype=np.float64), self.mel_cfg)
        stats = np.concatenate([lm.mean(axis=0), lm.std(axis=0)])
        v = self.projection @ stats.astype(np.float32)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            # Only a constant spectrogram lands here; use a fixed axis
            # rather than dividing by zero.
            v = self.projection[:, 0].copy()
            norm = float(np.linalg.norm(v))
        return (v / norm).astype(np.float32)


class ExternalSpeakerEncoder(StubSpeakerEncoder):
    """Same statistics pipeline with a projection loaded from a tensor file."""

    id = "external"

    def __init__(self, path: str, sample_rate: int = 24000):
        super().__init__(sample_rate)
        from .tensorio import read_tensor

        mat = read_tensor(path)
        if mat.shape != (SPEAKER_EMBED_DIM, _STUB_STATS_DIM):
            raise ConfigError(
                f"speaker projection must be {(SPEAKER_EMBED_DIM, _STUB_STATS_DIM)}, "
                f"got {mat.shape}"
            )
        self.projection = mat.astype(np.float32)


def build_speaker_encoder(name: str, sample_rate: int = 24000,
                          weights_path: str | None = None):
    if name == "stub":
        return StubSpeakerEncoder(sample_rate)
    if name == "external":
        if weights_path is None:
            raise ConfigError("external speaker encoder needs a weights path")
        return ExternalSpeakerEncoder(weights_path, sample_rate)
    raise ConfigError(f"unknown speaker encoder {name!r}")


def speaker_block(spk, b: int, n: int, zero: bool = False) -> Tensor:
    """Speaker embedding repeated at every timestep, (B, N, 256); zeroed when
    the active branch masks the speaker."""
    if zero:
        return Tensor(np.zeros((b, n, SPEAKER_EMBED_DIM), dtype=np.float32))
    emb = np.asarray(spk, dtype=np.float32)
    if emb.ndim == 1:
        emb = np.broadcast_to(emb, (b, SPEAKER_EMBED_DIM))
    if emb.shape != (b, SPEAKER_EMBED_DIM):
        raise ValueError(
            f"speaker embedding must be ({SPEAKER_EMBED_DIM},) or "
            f"({b}, {SPEAKER_EMBED_DIM}), got {emb.shape}"
        )
    block = np.broadcast_to(emb[:, None, :], (b, n, SPEAKER_EMBED_DIM))
    return Tensor(np.ascontiguousarray(block))


# ---- conformer ---------------------------------------------------------------------


def _uniform_param(rng, shape, bound):
    return Parameter(((rng.random(shape) * 2.0 - 1.0) * bound).astype(np.float32))


def sinusoid_rel_positions(t: int, dim: int) -> np.ndarray:
    """(2T-1, dim) sinusoidal embeddings for offsets -(T-1)..(T-1), ascending."""
    offsets = np.arange(-(t - 1), t, dtype=np.float64)[:, None]
    inv = np.exp(-np.arange(0, dim, 2, dtype=np.float64) * (np.log(10000.0) / dim))
    pe = np.zeros((2 * t - 1, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(offsets * inv)
    pe[:, 1::2] = np.cos(offsets * inv)
    return pe


class RelPosSelfAttention(Module):
    """Multi-head self-attention with relative positional scoring.

    Scores are (q+u)k^T plus a shifted (q+v)p^T term over sinusoidal offset
    embeddings; u and v are the learned content/position biases.
    """

    def __init__(self, dim: int, heads: int, rng, dropout: float = 0.1):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.d_head = dim, heads, dim // heads
        self.linear_q = Linear(dim, dim, rng)
        self.linear_k = Linear(dim, dim, rng)
        self.linear_v = Linear(dim, dim, rng)
        self.linear_out = Linear(dim, dim, rng)
        self.linear_pos = Linear(dim, dim, rng, bias=False)
        bound = 1.0 / np.sqrt(self.d_head)
        self.bias_u = _uniform_param(rng, (heads, self.d_head), bound)
        self.bias_v = _uniform_param(rng, (heads, self.d_head), bound)
        self.drop = Dropout(dropout)

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        return x.reshape(b, t, self.heads, self.d_head).transpose(0, 2, 1, 3)

    @staticmethod
    def _rel_shift(x: Tensor, t: int) -> Tensor:
        """(B, H, T, 2T-1) scores by offset -> (B, H, T, T) scores by key index."""
        b, h = x.data.shape[:2]
        padded = pad_constant(x, ((0, 0), (0, 0), (0, 0), (1, 0)))
        folded = padded.reshape(b, h, 2 * t, t)
        return folded[:, :, 1:, :].reshape(b, h, t, 2 * t - 1)[:, :, :, :t]

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.data.shape
        if d != self.dim:
            raise ValueError(f"expected feature dim {self.dim}, got {d}")
        q = self._split_heads(self.linear_q(x), b, t)
        k = self._split_heads(self.linear_k(x), b, t)
        v = self._split_heads(self.linear_v(x), b, t)
        pe = Tensor(sinusoid_rel_positions(t, self.dim).astype(x.data.dtype))
        p = self.linear_pos(pe).reshape(2 * t - 1, self.heads, self.d_head).transpose(1, 0, 2)

        q_u = q + self.bias_u.reshape(1, self.heads, 1, self.d_head)
        q_v = q + self.bias_v.reshape(1, self.heads, 1, self.d_head)
        ac = q_u @ k.swapaxes(-1, -2)
        bd = self._rel_shift(q_v @ p.swapaxes(-1, -2), t)
        scores = (ac + bd) * (1.0 / float(np.sqrt(self.d_head)))
        attn = self.drop(softmax(scores, axis=-1))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.linear_out(out)


class _HalfStepFeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng, dropout: float):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.lin1 = Linear(dim, ff_dim, rng)
        self.lin2 = Linear(ff_dim, dim, rng)
        self.drop1 = Dropout(dropout)
        self.drop2 = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.drop1(silu(self.lin1(self.norm(x))))
        return self.drop2(self.lin2(h))


class _ConformerConv(Module):
    def __init__(self, dim: int, kernel: int, rng, dropout: float, modes):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("conformer conv kernel must be odd")
        self.norm = LayerNorm(dim)
        self.pointwise1 = Conv1d(dim, 2 * dim, 1, rng)
        self.depthwise = Conv1d(dim, dim, kernel, rng,
                                padding=(kernel - 1) // 2, groups=dim)
        self.bn = ModalityBatchNorm(dim, modes)
        self.pointwise2 = Conv1d(dim, dim, 1, rng)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x).swapaxes(1, 2)  # (B, D, T)
        h = glu(self.pointwise1(h), axis=1)
        h = silu(self.bn(self.depthwise(h)))
        h = self.pointwise2(h)
        return self.drop(h.swapaxes(1, 2))


class ConformerBlock(Module):
    """Macaron half-step FFNs around relative-position attention and a
    depthwise conv module; layer norm closes the block."""

    def __init__(self, dim: int, heads: int, ff_dim: int, kernel: int, rng,
                 dropout: float = 0.1, modes=MODES_SINGLE):
        super().__init__()
        self.dim = dim
        self.ff1 = _HalfStepFeedForward(dim, ff_dim, rng, dropout)
        self.attn_norm = LayerNorm(dim)
        self.attn = RelPosSelfAttention(dim, heads, rng, dropout)
        self.attn_drop = Dropout(dropout)
        self.conv = _ConformerConv(dim, kernel, rng, dropout, modes)
        self.ff2 = _HalfStepFeedForward(dim, ff_dim, rng, dropout)
        self.norm_final = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.dim:
            raise ValueError(f"expected feature dim {self.dim}, got {x.data.shape[-1]}")
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn_drop(self.attn(self.attn_norm(x)))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm_final(x)
