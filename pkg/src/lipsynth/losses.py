"""Training objectives for the waveform and mel-spectrogram generators.

Every loss returns a scalar engine Tensor so it can sit anywhere in a
backward graph; reference signals may be plain arrays and are treated as
constants. Reductions are means (over score maps, spectrogram elements,
MFCC matrices, mel bins) so loss weights stay independent of clip length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dsp, engine
from .engine import Tensor
from .errors import DataError

# Magnitudes are floored before logs and ratios; silence in the estimate
# must not produce infinities.
MAG_FLOOR = 1e-7


@dataclass(frozen=True)
class StftResolutionSet:
    """The analysis settings averaged by the multi-resolution STFT loss."""

    configs: tuple[dsp.StftConfig, ...]

    def __post_init__(self):
        if len(self.configs) < 1:
            raise ValueError("resolution set needs at least one STFT config")
        if len(set(self.configs)) != len(self.configs):
            raise ValueError("resolution set entries must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.configs)


def default_resolution_set() -> StftResolutionSet:
    """Three resolutions: (fft, hop, win) per entry."""
    return StftResolutionSet(
        (
            dsp.StftConfig(1024, 120, 600),
            dsp.StftConfig(2048, 240, 1200),
            dsp.StftConfig(512, 50, 240),
        )
    )


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 80.0
    lambda3: float = 15.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) <= 0:
            raise ValueError("loss weights must be strictly positive")


# ---- adversarial ---------------------------------------------------------------------


def ls_gan_generator_loss(fake_scores: Sequence[Tensor]) -> Tensor:
    """Sum over scales of mean((D_k(fake) - 1)^2)."""
    if len(fake_scores) == 0:
        raise ValueError("need at least one discriminator scale")
    terms = [engine.tmean((s - 1.0) * (s - 1.0)) for s in fake_scores]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def ls_gan_discriminator_loss(
    real_scores: Sequence[Tensor], fake_scores: Sequence[Tensor]
) -> Tensor:
    """Sum over scales of mean((D_k(real) - 1)^2) + mean(D_k(fake)^2)."""
    if len(real_scores) == 0:
        raise ValueError("need at least one discriminator scale")
    if len(real_scores) != len(fake_scores):
        raise ValueError(
            f"scale count mismatch: {len(real_scores)} real vs {len(fake_scores)} fake"
        )
    total = None
    for r, f in zip(real_scores, fake_scores):
        term = engine.tmean((r - 1.0) * (r - 1.0)) + engine.tmean(f * f)
        total = term if total is None else total + term
    return total


# ---- spectral reconstruction ---------------------------------------------------------


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.data.ndim == 1:
        t = t.reshape(1, -1)
    if t.data.ndim != 2:
        raise ValueError(f"expected (T,) or (B, T) waveform, got {t.data.shape}")
    return t


def stft_loss_single(x, x_hat, cfg: dsp.StftConfig) -> tuple[Tensor, Tensor]:
    """Spectral convergence and log-magnitude terms at one resolution.

    L_SC = ||X - X_hat||_F / ||X||_F, L_MAG = mean |log X - log X_hat|,
    both on magnitude spectrograms; per-item norms, averaged over the batch.
    """
    xt, ht = _as_batch(x), _as_batch(x_hat)
    if xt.data.shape != ht.data.shape:
        raise ValueError(f"length mismatch: {xt.data.shape} vs {ht.data.shape}")
    _, ref_mag = dsp.stft_magnitude_batch(np.asarray(xt.data, dtype=np.float64), cfg)
    if np.any((ref_mag * ref_mag).sum(axis=(1, 2)) == 0.0):
        raise DataError("zero-energy reference clip in spectral loss")

    mag = engine.clamp_min(engine.ops.stft_magnitude(ht, cfg), MAG_FLOOR)
    ref = np.maximum(ref_mag, MAG_FLOOR)
    ref_norms = np.sqrt((ref * ref).sum(axis=(1, 2)))

    diff = mag - ref
    per_item = engine.sqrt(engine.tsum(diff * diff, axis=(1, 2)))
    l_sc = engine.tmean(per_item * (1.0 / ref_norms))
    l_mag = engine.tmean(engine.absolute(engine.log(mag) - np.log(ref)))
    return l_sc, l_mag


def multi_res_stft_loss(x, x_hat, resolutions: StftResolutionSet) -> Tensor:
    """Mean over resolutions of (L_SC + L_MAG)."""
    total = None
    for cfg in resolutions.configs:
        sc, mag = stft_loss_single(x, x_hat, cfg)
        term = sc + mag
        total = term if total is None else total + term
    return total * (1.0 / len(resolutions))


def _mfcc_graph(wave: Tensor, cfg: dsp.MelConfig, n_coeffs: int) -> Tensor:
    """Differentiable MFCC path: |STFT| -> mel -> log -> DCT, (B, T', n_coeffs)."""
    fb = dsp.mel_filterbank(cfg)
    dct = dsp.dct2_matrix(n_coeffs, cfg.n_mels)
    mag = engine.ops.stft_magnitude(wave, cfg.stft)
    mel = engine.clamp_min(mag @ fb.T, dsp.LOG_FLOOR)
    return engine.log(mel) @ dct.T


def mfcc_loss(x, x_hat, cfg: dsp.MelConfig | None = None) -> Tensor:
    """Mean absolute difference of 25-coefficient MFCC matrices."""
    if cfg is None:
        cfg = dsp.default_mel_config()
    xt, ht = _as_batch(x), _as_batch(x_hat)
    if xt.data.shape != ht.data.shape:
        raise ValueError(f"length mismatch: {xt.data.shape} vs {ht.data.shape}")
    ref = np.stack(
        [dsp.mfcc(row, cfg) for row in np.asarray(xt.data, dtype=np.float64)]
    )
    est = _mfcc_graph(ht, cfg, dsp.MFCC_COEFFS)
    return engine.tmean(engine.absolute(est - ref))


def combined_generator_loss(adv, mrstft, mfcc, w: LossWeights) -> Tensor:
    """lambda1 * adversarial + lambda2 * multi-res STFT + lambda3 * MFCC."""
    parts = []
    for name, v in (("adv", adv), ("mrstft", mrstft), ("mfcc", mfcc)):
        t = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"non-finite {name} term in combined loss")
        parts.append(t)
    return w.lambda1 * parts[0] + w.lambda2 * parts[1] + w.lambda3 * parts[2]


def l1_mel_loss(mel, mel_hat) -> Tensor:
    """Mean absolute elementwise difference of log-mel spectrograms."""
    a = mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel))
    b = mel_hat if isinstance(mel_hat, Tensor) else Tensor(np.asarray(mel_hat))
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return engine.tmean(engine.absolute(b - a))
