"""Spectral front end: STFT, log-mel, MFCC and Griffin-Lim inversion.

Conventions, fixed across the package:

* Centered STFT. The signal is reflect-padded by fft_size//2 on both sides, so
  a clip of T samples yields T' = 1 + T//hop frames.
* Periodic Hann analysis window of win_size samples, zero-padded symmetrically
  to fft_size (win_size <= fft_size).
* Mel filterbank: triangular filters on an HTK mel axis, each row scaled by
  2/(hz[m+2]-hz[m]) so filter area is constant (Slaney-style normalization).
  The filterbank is applied to magnitude spectra, not power.
* Log-mel features are natural log with floor 1e-5, clipped to [-6, 6] and
  divided by 6, landing in [-1, 1]. MFCCs are taken from the *unclipped*
  log-mel via an orthonormal DCT-II, keeping the first 25 coefficients.

All functions are plain numpy and deterministic; the autodiff engine reuses
the padding/window helpers so training losses see the exact same transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine.backend import kernels as K
from .errors import ConfigError, DataError

LOG_FLOOR = 1e-5
MEL_CLIP = 6.0
MFCC_COEFFS = 25


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 2048
    hop_size: int = 300
    win_size: int = 1200

    def __post_init__(self):
        if self.win_size > self.fft_size:
            raise ConfigError(
                f"win_size {self.win_size} exceeds fft_size {self.fft_size}"
            )
        if min(self.fft_size, self.hop_size, self.win_size) <= 0:
            raise ConfigError("STFT sizes must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_size


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 24000
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    stft: StftConfig = field(default_factory=StftConfig)

    @property
    def fmax_hz(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.stft.hop_size


def default_stft_config(sample_rate: int) -> StftConfig:
    """12.5 ms hop / 50 ms window at the given rate (300/1200 at 24 kHz)."""
    return StftConfig(
        fft_size=2048,
        hop_size=int(round(sample_rate * 0.0125)),
        win_size=int(round(sample_rate * 0.05)),
    )


def default_mel_config(sample_rate: int = 24000, n_mels: int = 80) -> MelConfig:
    return MelConfig(
        sample_rate=sample_rate, n_mels=n_mels, stft=default_stft_config(sample_rate)
    )


# ---- windows and framing ----------------------------------------------------------


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_window(cfg: StftConfig) -> np.ndarray:
    """Analysis window zero-padded to fft_size, centered."""
    w = hann_periodic(cfg.win_size)
    left = (cfg.fft_size - cfg.win_size) // 2
    full = np.zeros(cfg.fft_size)
    full[left : left + cfg.win_size] = w
    return full


def reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Reflect padding along the last axis; requires length > pad."""
    if x.shape[-1] <= pad:
        raise DataError(
            f"clip of {x.shape[-1]} samples too short for centered analysis (needs > {pad})"
        )
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, widths, mode="reflect")


def reflect_fold(g: np.ndarray, n: int, pad: int) -> np.ndarray:
    """Adjoint of reflect_pad: fold gradient of the padded signal back to length n."""
    idx = np.empty(n + 2 * pad, dtype=np.int64)
    idx[pad : pad + n] = np.arange(n)
    idx[:pad] = np.arange(pad, 0, -1)
    idx[pad + n :] = np.arange(n - 2, n - 2 - pad, -1)
    out = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
    np.add.at(out, (..., idx), g)
    return out


def frame_signal(xp: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """(..., Tp) -> (..., F, frame_len) view of hop-strided frames."""
    n = (xp.shape[-1] - frame_len) // hop + 1
    v = np.lib.stride_tricks.sliding_window_view(xp, frame_len, axis=-1)
    return v[..., : (n - 1) * hop + 1 : hop, :]


# ---- STFT ---------------------------------------------------------------------------


def stft(wave: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex spectrogram, shape (T', fft_size//2 + 1), T' = 1 + T//hop."""
    if wave.ndim != 1:
        raise DataError(f"expected mono waveform, got shape {wave.shape}")
    xp = reflect_pad(wave.astype(np.float64, copy=False), cfg.fft_size // 2)
    frames = frame_signal(xp, cfg.fft_size, cfg.hop_size) * stft_window(cfg)
    return np.fft.rfft(frames, axis=-1)


def stft_magnitude_batch(waves: np.ndarray, cfg: StftConfig):
    """(B, T) -> (complex spectra (B, T', F), magnitudes). Dtype follows input."""
    xp = reflect_pad(waves, cfg.fft_size // 2)
    win = stft_window(cfg).astype(waves.dtype)
    frames = frame_signal(xp, cfg.fft_size, cfg.hop_size) * win
    spec = np.fft.rfft(frames, axis=-1)
    return spec, np.abs(spec)


def istft(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Least-squares inverse of stft(); output length (T'-1)*hop."""
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)
    win = stft_window(cfg)
    n_frames = frames.shape[0]
    padded_len = (n_frames - 1) * cfg.hop_size + cfg.fft_size
    num = K.overlap_add((frames * win)[None], cfg.hop_size, padded_len)[0]
    wsq = K.overlap_add(
        np.broadcast_to(win * win, (1, n_frames, cfg.fft_size)).copy(),
        cfg.hop_size,
        padded_len,
    )[0]
    out = np.where(wsq > 1e-11, num / np.maximum(wsq, 1e-11), 0.0)
    pad = cfg.fft_size // 2
    t = (n_frames - 1) * cfg.hop_size
    return out[pad : pad + t]


# ---- mel / MFCC ----------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(n_mels, n_bins) area-normalized triangular filters."""
    if cfg.fmax_hz > cfg.sample_rate / 2:
        raise ConfigError(f"fmax {cfg.fmax_hz} above Nyquist {cfg.sample_rate / 2}")
    pts = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    )
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, cfg.stft.n_bins)
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / np.maximum(ctr - lo, 1e-12)
    down = (hi - freqs[None, :]) / np.maximum(hi - ctr, 1e-12)
    fb = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    if np.any(fb.sum(axis=1) == 0.0):
        raise ConfigError(
            f"{cfg.n_mels} mel bands cannot all be supported by fft_size {cfg.stft.fft_size}"
        )
    return fb


def log_mel_unclipped(wave: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """(T', n_mels) natural-log mel magnitudes, floored but not clipped."""
    mag = np.abs(stft(wave, cfg.stft))
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def log_mel(wave: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """(T', n_mels) log-mel in [-1, 1]: clip to +-6 then divide by 6."""
    lm = np.clip(log_mel_unclipped(wave, cfg), -MEL_CLIP, MEL_CLIP)
    return (lm / MEL_CLIP).astype(np.float32)


def dct2_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II matrix (n_out, n_in)."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2.0 * n_in))
    mat *= np.sqrt(2.0 / n_in)
    mat[0] *= np.sqrt(0.5)
    return mat


def mfcc(wave: np.ndarray, cfg: MelConfig, n_coeffs: int = MFCC_COEFFS) -> np.ndarray:
    """(T', n_coeffs) MFCCs from unclipped log-mel."""
    if n_coeffs > cfg.n_mels:
        raise ConfigError(f"{n_coeffs} MFCCs need at least that many mel bands")
    return log_mel_unclipped(wave, cfg) @ dct2_matrix(n_coeffs, cfg.n_mels).T


# ---- inversion -----------------------------------------------------------------------


def mel_to_linear(mel_mag: np.ndarray, cfg: MelConfig, n_iters: int = 200) -> np.ndarray:
    """Nonnegative least-squares inversion of the filterbank, (T', M) -> (T', F).

    Projected gradient descent on ||A x - b||^2 with x >= 0, vectorized over
    frames; step size from a short power iteration on A^T A. Deterministic.
    """
    fb = mel_filterbank(cfg)  # (M, F)
    ata = fb.T @ fb
    v = np.ones(fb.shape[1])
    for _ in range(30):
        v = ata @ v
        v /= np.linalg.norm(v)
    lipschitz = float(v @ (ata @ v))
    step = 1.0 / max(lipschitz, 1e-12)
    b = mel_mag.astype(np.float64).T  # (M, T')
    x = fb.T @ b  # (F, T') nonnegative start
    for _ in range(n_iters):
        x = np.maximum(0.0, x - step * (ata @ x - fb.T @ b))
    return x.T


def griffin_lim(mag: np.ndarray, cfg: StftConfig, n_iters: int = 60) -> np.ndarray:
    """Phase reconstruction from a magnitude spectrogram (T', F).

    Zero-phase initialization, then n_iters stft/istft projections. Fully
    deterministic; output length (T'-1)*hop.
    """
    mag = mag.astype(np.float64)
    spec = mag.astype(np.complex128)
    y = istft(spec, cfg)
    for _ in range(n_iters):
        x = stft(y, cfg)
        phase = x / np.maximum(np.abs(x), 1e-12)
        y = istft(mag * phase, cfg)
    return y


def vocode_log_mel(log_mel_scaled: np.ndarray, cfg: MelConfig, n_iters: int = 60) -> np.ndarray:
    """Invert [-1, 1] log-mel frames to a waveform via NNLS + Griffin-Lim."""
    mel_mag = np.exp(np.clip(log_mel_scaled, -1.0, 1.0) * MEL_CLIP)
    lin = mel_to_linear(mel_mag, cfg)
    return griffin_lim(lin, cfg.stft, n_iters=n_iters).astype(np.float32)
