"""Optimizers, schedules, the modality-dropout training procedures, GAN step
ordering, checkpointing, and validation-based selection.

Branch masking contract: a parameter whose branch was masked receives no
gradient (grad stays None) and the optimizers skip it entirely, so its value
and its moment state are bit-identical after the step.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, losses
from .blocks import build_speaker_encoder
from .data import (
    Manifest,
    preprocess_frames,
    pick_speaker_reference,
    read_clip_file,
    read_manifest,
    read_mel_file,
    read_wave_file,
)
from .engine import Module, Tensor, pad_constant
from .errors import ConfigError, DataError
from .melmodels import (
    AV2AMelGenerator,
    MelGeneratorConfig,
    V2AMelGenerator,
    mel_config_m,
    mel_config_s,
    mel_config_tiny,
    mel_config_vs,
)
from .tensorio import read_tensor, write_tensor
from .wavemodels import (
    AV2AWaveGenerator,
    DiscriminatorConfig,
    MultiScaleWaveDiscriminator,
    V2AWaveGenerator,
    WaveGeneratorConfig,
    align_synth_audio,
    wave_config_full,
    wave_config_tiny,
)

PROCEDURES = ("baseline", "modality_dropout", "modality_dropout_gt_audio")

CHECKPOINT_VERSION = 1


# ---- optimizer configs -------------------------------------------------------------


@dataclass(frozen=True)
class WaveOptimConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 4
    disc_crop_seconds: float = 1.0
    max_clip_seconds: float = 3.0

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigError(f"waveform training uses adam, got {self.optimizer!r}")
        if min(self.lr, self.beta1, self.beta2, self.batch_size,
               self.disc_crop_seconds, self.max_clip_seconds) <= 0:
            raise ConfigError("waveform optimizer settings must all be positive")


@dataclass(frozen=True)
class MelOptimConfig:
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 1e-2
    stage1_lr_seen: float = 1e-3
    stage1_lr_unseen: float = 5e-4
    warmup_epochs: int = 20
    stage2_frontend_lr_seen: float = 1e-4
    stage2_frontend_lr_unseen: float = 1e-5

    def __post_init__(self):
        if self.optimizer != "adamw":
            raise ConfigError(f"mel training uses adamw, got {self.optimizer!r}")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1")

    def stage1_lr(self, variant: str) -> float:
        return self.stage1_lr_seen if variant == "seen" else self.stage1_lr_unseen

    def stage2_frontend_lr(self, variant: str) -> float:
        return (self.stage2_frontend_lr_seen if variant == "seen"
                else self.stage2_frontend_lr_unseen)


def check_lr_variant(variant: str) -> str:
    if variant not in ("seen", "unseen"):
        raise ConfigError(f"lr variant must be seen or unseen, got {variant!r}")
    return variant


# ---- optimizers --------------------------------------------------------------------


class Adam:
    """Adam over named parameters.

    A parameter whose grad is None is skipped outright: value, moments and
    step count stay untouched. Modality masking relies on this.
    """

    def __init__(self, named_params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        names = [n for n, _ in self.named]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        if not self.named:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.t = {n: 0 for n, _ in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def _update(self, name: str, p) -> np.ndarray:
        g = np.asarray(p.grad, dtype=p.data.dtype)
        t = self.t[name] + 1
        self.t[name] = t
        m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
        v = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
        self.m[name], self.v[name] = m, v
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is None:
                continue
            p.data = p.data - self._update(name, p)

    def state_arrays(self) -> dict:
        out = {}
        for name, _ in self.named:
            out[name + ".m"] = self.m[name]
            out[name + ".v"] = self.v[name]
        return out

    def step_counts(self) -> dict:
        return dict(self.t)

    def load_state(self, arrays: dict, steps: dict) -> None:
        own = self.state_arrays()
        if sorted(arrays) != sorted(own):
            raise DataError("optimizer state names do not match this optimizer")
        if sorted(steps) != sorted(self.t):
            raise DataError("optimizer step counts do not match this optimizer")
        for name, _ in self.named:
            for slot, store in ((".m", self.m), (".v", self.v)):
                arr = arrays[name + slot]
                if arr.shape != store[name].shape:
                    raise DataError(f"{name}{slot}: shape {arr.shape} != {store[name].shape}")
                store[name] = arr.astype(store[name].dtype).copy()
            self.t[name] = int(steps[name])


class AdamW(Adam):
    """Adam with decoupled weight decay, applied only on stepped parameters."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8, weight_decay: float = 1e-2):
        super().__init__(named_params, lr, beta1, beta2, eps)
        self.weight_decay = float(weight_decay)

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is None:
                continue
            decay = np.asarray(self.lr * self.weight_decay, dtype=p.data.dtype)
            p.data = p.data - decay * p.data - self._update(name, p)


# ---- learning-rate schedule --------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, then cosine annealing with warm restarts
    (T0 = 1, Tmult = 2: restart boundaries 1, 3, 7, 15, ... epochs past warmup)."""

    base_lr: float
    warmup_epochs: int

    def __post_init__(self):
        if self.base_lr <= 0 or self.warmup_epochs < 1:
            raise ConfigError("schedule needs base_lr > 0 and warmup_epochs >= 1")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    k = epoch - schedule.warmup_epochs
    length = 1
    while k >= length:
        k -= length
        length *= 2
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * k / length))


def select_checkpoint(val_history, warmup_epochs: int | None = None) -> int:
    """Index of the lowest validation loss, restricted to warmup epochs when
    a warmup length is given; ties go to the earliest epoch."""
    if len(val_history) == 0:
        raise ValueError("empty validation history")
    window = list(val_history)
    if warmup_epochs is not None:
        window = window[:warmup_epochs]
    best = 0
    for i, v in enumerate(window):
        if v < window[best]:
            best = i
    return best


# ---- cropping ----------------------------------------------------------------------


def _crop_last(x, start: int, stop: int):
    if isinstance(x, Tensor):
        return x[(Ellipsis, slice(start, stop))]
    return x[..., start:stop]


def _pad_last(x, extra: int):
    if isinstance(x, Tensor):
        return pad_constant(x, [(0, 0)] * (x.data.ndim - 1) + [(0, extra)])
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, extra)])


def disc_crop(real, fake, seconds: float, rng, sample_rate: int):
    """One random offset, applied to both waveforms (aligned crops); inputs
    shorter than the crop are zero-padded to it."""
    n = int(round(seconds * sample_rate))
    len_real = (real.data if isinstance(real, Tensor) else real).shape[-1]
    len_fake = (fake.data if isinstance(fake, Tensor) else fake).shape[-1]
    if len_real != len_fake:
        raise ValueError(f"length mismatch: real {len_real} vs fake {len_fake}")
    if len_real < n:
        extra = n - len_real
        return _pad_last(real, extra), _pad_last(fake, extra)
    if len_real == n:
        return real, fake
    off = int(rng.integers(0, len_real - n + 1))
    return _crop_last(real, off, off + n), _crop_last(fake, off, off + n)


# ---- batches and train states ------------------------------------------------------


@dataclass
class WaveBatch:
    frames: Tensor            # (B, N, H, W, 3) preprocessed
    audio: np.ndarray         # (B, T) ground truth
    spk: np.ndarray           # (B, 256)
    synth_audio: np.ndarray | None = None


@dataclass
class MelBatch:
    frames: Tensor
    mel: np.ndarray           # (B, T', n_mels) ground-truth log-mel
    spk: np.ndarray
    synth_mel: np.ndarray | None = None


@dataclass
class WaveTrainState:
    generator: Module
    discriminator: Module
    gen_opt: Adam
    disc_opt: Adam


@dataclass
class MelTrainState:
    generator: Module
    opt: AdamW
    frontend_opt: AdamW | None = None


def _clear_grads(*modules) -> None:
    for m in modules:
        for _, p in m.named_parameters():
            p.grad = None


def procedure_branches(procedure: str):
    """Ordered (mode, audio-source) pairs for one step of the procedure."""
    if procedure == "baseline":
        return (("av", "synth"),)
    if procedure == "modality_dropout":
        return (("av", "synth"), ("v", None), ("a", "synth"))
    if procedure == "modality_dropout_gt_audio":
        return (("av", "synth"), ("v", None), ("a", "gt"))
    raise ConfigError(f"unknown procedure {procedure!r}, expected one of {PROCEDURES}")


def _audio_hash(arr: np.ndarray | None) -> str | None:
    if arr is None:
        return None
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@dataclass(frozen=True)
class WaveLossSetup:
    weights: losses.LossWeights
    resolutions: losses.StftResolutionSet
    mfcc_cfg: dsp.MelConfig


def default_wave_loss_setup(sample_rate: int) -> WaveLossSetup:
    if sample_rate >= 16000:
        res = losses.default_resolution_set()
        mfcc_cfg = dsp.MelConfig(sample_rate=sample_rate)
    else:
        # short analysis windows so sub-second clips still give several frames
        res = losses.StftResolutionSet((
            dsp.StftConfig(512, 60, 300),
            dsp.StftConfig(1024, 120, 600),
            dsp.StftConfig(256, 30, 120),
        ))
        mfcc_cfg = dsp.MelConfig(
            sample_rate=sample_rate, stft=dsp.StftConfig(512, 128, 512)
        )
    return WaveLossSetup(losses.LossWeights(), res, mfcc_cfg)


# ---- train steps -------------------------------------------------------------------


def _gan_branch_step(fake: Tensor, real: np.ndarray, state: WaveTrainState,
                     optim_cfg: WaveOptimConfig, setup: WaveLossSetup,
                     rng, sample_rate: int, gan: bool) -> dict:
    report = {}
    if gan:
        real_c, fake_c = disc_crop(real, fake, optim_cfg.disc_crop_seconds, rng,
                                   sample_rate)
        fake_det = Tensor(np.asarray(fake_c.data if isinstance(fake_c, Tensor)
                                     else fake_c))
        _clear_grads(state.discriminator)
        d_loss = losses.ls_gan_discriminator_loss(
            state.discriminator(Tensor(np.asarray(real_c, dtype=np.float32))),
            state.discriminator(fake_det),
        )
        d_loss.backward()
        state.disc_opt.step()
        report["disc"] = float(d_loss.data)

        _clear_grads(state.generator, state.discriminator)
        adv = losses.ls_gan_generator_loss(state.discriminator(fake_c))
    else:
        _clear_grads(state.generator)
        adv = Tensor(np.zeros((), dtype=np.float32))
    mrstft = losses.multi_res_stft_loss(real, fake, setup.resolutions)
    mfcc = losses.mfcc_loss(real, fake, setup.mfcc_cfg)
    g_loss = losses.combined_generator_loss(adv, mrstft, mfcc, setup.weights)
    g_loss.backward()
    state.gen_opt.step()
    report.update(
        gen=float(g_loss.data), adv=float(adv.data),
        mrstft=float(mrstft.data), mfcc=float(mfcc.data),
    )
    return report


def train_step_wave(batch: WaveBatch, state: WaveTrainState, procedure: str,
                    optim_cfg: WaveOptimConfig, setup: WaveLossSetup, rng,
                    gan: bool = True) -> dict:
    """One Algorithm-1 step: per branch, a discriminator update on aligned
    random crops, then a generator update; reports per-branch losses plus a
    hash of the exact audio handed to the audio encoder."""
    branches = procedure_branches(procedure)
    if any(src == "synth" for _, src in branches) and batch.synth_audio is None:
        raise DataError(f"procedure {procedure!r} needs synthesized audio")
    gen = state.generator
    gen.train()
    state.discriminator.train()
    n = batch.frames.data.shape[1]
    spf = gen.cfg.samples_per_frame
    sample_rate = gen.cfg.sample_rate
    real = align_synth_audio(batch.audio, n, spf)
    synth = None
    if batch.synth_audio is not None:
        synth = align_synth_audio(batch.synth_audio, n, spf)

    report = {"procedure": procedure, "branches": []}
    for mode, source in branches:
        audio_in = {"synth": synth, "gt": real, None: None}[source]
        fake = gen.forward(batch.frames, audio_in, batch.spk, mode=mode)
        entry = _gan_branch_step(fake, real, state, optim_cfg, setup, rng,
                                 sample_rate, gan)
        entry["mode"] = mode
        entry["audio_input_sha256"] = _audio_hash(audio_in)
        report["branches"].append(entry)
    return report


def train_step_v2a_wave(batch: WaveBatch, state: WaveTrainState,
                        optim_cfg: WaveOptimConfig, setup: WaveLossSetup, rng,
                        gan: bool = True) -> dict:
    gen = state.generator
    gen.train()
    state.discriminator.train()
    n = batch.frames.data.shape[1]
    real = align_synth_audio(batch.audio, n, gen.cfg.samples_per_frame)
    fake = gen.forward(batch.frames, batch.spk)
    entry = _gan_branch_step(fake, real, state, optim_cfg, setup, rng,
                             gen.cfg.sample_rate, gan)
    entry["mode"] = "v2a"
    return {"procedure": "v2a", "branches": [entry]}


def train_step_mel(batch: MelBatch, state: MelTrainState, procedure: str,
                   stage: int) -> dict:
    """Mel-family Algorithm-1 step: plain L1 per branch, no discriminator.

    Stage 1 keeps the video encoder and decoder frozen (in eval mode, outside
    every optimizer); stage 2 additionally steps the frontend optimizer.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and state.frontend_opt is None:
        raise ConfigError("stage 2 requires a state built from a selected "
                          "stage-1 checkpoint (no frontend optimizer present)")
    branches = procedure_branches(procedure)
    if batch.synth_mel is None:
        raise DataError(f"procedure {procedure!r} needs synthesized mel input")
    gen = state.generator
    gen.train()
    if stage == 1:
        gen.video_encoder.eval()
        gen.decoder.eval()

    report = {"procedure": procedure, "stage": stage, "branches": []}
    for mode, source in branches:
        # the synthesized mel always sets the output length; only the audio
        # branch's content choice differs
        mel_in = batch.mel if source == "gt" else batch.synth_mel
        out = gen.forward(batch.frames, mel_in, batch.spk, mode=mode)
        loss = losses.l1_mel_loss(batch.mel, out)
        _clear_grads(gen)
        loss.backward()
        state.opt.step()
        if stage == 2:
            state.frontend_opt.step()
        report["branches"].append({
            "mode": mode,
            "l1": float(loss.data),
            "audio_input_sha256": _audio_hash(None if mode == "v" else mel_in),
        })
    return report


def train_step_v2a_mel(batch: MelBatch, state: MelTrainState) -> dict:
    gen = state.generator
    gen.train()
    out = gen.forward(batch.frames, batch.spk, target_len=batch.mel.shape[1])
    loss = losses.l1_mel_loss(batch.mel, out)
    _clear_grads(gen)
    loss.backward()
    state.opt.step()
    return {"procedure": "v2a", "branches": [{"mode": "v2a", "l1": float(loss.data)}]}


# ---- checkpoints -------------------------------------------------------------------


def config_digest(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def rng_state_hex(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode().hex()


def rng_from_hex(state_hex: str) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(bytes.fromhex(state_hex))
    return rng


def _tensor_file(root: Path, group: str, name: str) -> Path:
    if group == "generator":
        sub, _, rest = name.partition(".")
        if not rest:
            sub, rest = "_root", name
        return root / sub / (rest + ".f32")
    return root / group / (name + ".f32")


def save_checkpoint(path, meta: dict, generator: Module,
                    discriminator: Module | None = None,
                    optimizers: dict | None = None) -> Path:
    """Write meta.json plus one raw tensor file per parameter and buffer.

    meta must carry at least family and config; version, digest, tensor
    listings and optimizer scalars are filled in here, so re-saving a loaded
    checkpoint reproduces it byte for byte.
    """
    root = Path(path)
    meta = dict(meta)
    for managed in ("version", "config_digest", "tensors", "optim"):
        meta.pop(managed, None)
    if "family" not in meta or "config" not in meta:
        raise ConfigError("checkpoint meta needs family and config entries")
    meta["version"] = CHECKPOINT_VERSION
    meta["config_digest"] = config_digest(meta["config"])

    tensors = {"generator": sorted(generator.state_arrays())}
    if discriminator is not None:
        tensors["discriminator"] = sorted(discriminator.state_arrays())
    meta["tensors"] = tensors

    groups = {"generator": generator.state_arrays()}
    if discriminator is not None:
        groups["discriminator"] = discriminator.state_arrays()

    optim_meta = {}
    for opt_name, opt in (optimizers or {}).items():
        group = f"optim_{opt_name}"
        groups[group] = opt.state_arrays()
        tensors[group] = sorted(groups[group])
        optim_meta[opt_name] = {
            "steps": opt.step_counts(),
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        }
        if isinstance(opt, AdamW):
            optim_meta[opt_name]["weight_decay"] = opt.weight_decay
    if optim_meta:
        meta["optim"] = optim_meta

    for group, arrays in groups.items():
        for name, arr in arrays.items():
            file = _tensor_file(root, group, name)
            file.parent.mkdir(parents=True, exist_ok=True)
            write_tensor(file, arr)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return root


def load_checkpoint_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read checkpoint meta {meta_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt checkpoint meta {meta_path}: {e}") from e
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {meta.get('version')!r} in {meta_path}"
        )
    return meta


def _load_group(root: Path, group: str, names) -> dict:
    out = {}
    for name in names:
        file = _tensor_file(root, group, name)
        if not file.exists():
            raise DataError(f"checkpoint {root} is missing tensor {file.name} ({name})")
        out[name] = read_tensor(file)
    return out


def load_checkpoint(path, generator: Module | None = None,
                    discriminator: Module | None = None,
                    optimizers: dict | None = None) -> dict:
    """Load meta and, for each passed object, its full state (exact match)."""
    root = Path(path)
    meta = load_checkpoint_meta(root)
    tensors = meta.get("tensors", {})
    if generator is not None:
        generator.load_state_arrays(_load_group(root, "generator",
                                                tensors.get("generator", [])))
    if discriminator is not None:
        if "discriminator" not in tensors:
            raise DataError(f"checkpoint {root} has no discriminator state")
        discriminator.load_state_arrays(
            _load_group(root, "discriminator", tensors["discriminator"])
        )
    for opt_name, opt in (optimizers or {}).items():
        group = f"optim_{opt_name}"
        if group not in tensors:
            raise DataError(f"checkpoint {root} has no optimizer state {opt_name!r}")
        arrays = _load_group(root, group, tensors[group])
        opt.load_state(arrays, meta["optim"][opt_name]["steps"])
    return meta


def build_models_from_meta(meta: dict, rng: np.random.Generator | None = None):
    """Fresh (generator, discriminator-or-None) matching a checkpoint's meta;
    parameters are init-only until load_checkpoint fills them."""
    rng = rng if rng is not None else np.random.default_rng(0)
    family, kind = meta.get("family"), meta.get("kind")
    if family == "wave":
        cfg = WaveGeneratorConfig(**meta["config"]["model"])
        gen = (V2AWaveGenerator if kind == "v2a" else AV2AWaveGenerator)(cfg, rng)
        disc = None
        if "disc" in meta["config"]:
            disc = MultiScaleWaveDiscriminator(
                rng, DiscriminatorConfig(**meta["config"]["disc"])
            )
        return gen, disc
    if family == "mel":
        cfg = MelGeneratorConfig(**meta["config"]["model"])
        gen = (V2AMelGenerator if kind == "v2a" else AV2AMelGenerator)(cfg, rng)
        return gen, None
    raise DataError(f"checkpoint has unknown family {family!r}")


# ---- dataset assembly (desk scale: everything in memory) ---------------------------


@dataclass
class ClipExample:
    row_id: str
    frames: np.ndarray                  # uint8 (N, H, W, 3)
    audio: np.ndarray                   # (T,) float32
    spk: np.ndarray                     # (256,)
    synth_audio: np.ndarray | None = None
    mel: np.ndarray | None = None       # ground-truth log-mel, mel family
    synth_mel: np.ndarray | None = None
    transcript: str | None = None


def load_examples(manifest: Manifest, split: str, family: str, encoder, rng,
                  mel_cfg: dsp.MelConfig | None = None,
                  require_synth: bool = False):
    """Read one split into memory; returns (examples, sample_rate).

    Speaker references are drawn here, once per run, from the given rng.
    """
    rows = manifest.split(split)
    if not rows:
        raise DataError(f"manifest has no rows in split {split!r}")
    examples, rate = [], None
    for row in rows:
        frames = read_clip_file(manifest.resolve(row.video_path))
        audio, row_rate = read_wave_file(manifest.resolve(row.audio_path))
        if rate is None:
            rate = row_rate
        elif row_rate != rate:
            raise DataError(f"row {row.id}: sample rate {row_rate} != corpus rate {rate}")
        ref, _ = read_wave_file(pick_speaker_reference(manifest, row, rng))
        ex = ClipExample(row_id=row.id, frames=frames, audio=audio,
                         spk=encoder.embed(ref), transcript=row.transcript)
        if require_synth and row.synth_audio_path is None:
            raise DataError(f"row {row.id} has no synthesized audio "
                            "(run synthesis first)")
        if family == "mel":
            ex.mel = dsp.log_mel(audio.astype(np.float64), mel_cfg).astype(np.float32)
            if row.synth_audio_path is not None:
                ex.synth_mel = read_mel_file(manifest.resolve(row.synth_audio_path))
        elif row.synth_audio_path is not None:
            ex.synth_audio, _ = read_wave_file(manifest.resolve(row.synth_audio_path))
        examples.append(ex)
    return examples, rate


def _wave_batch(examples, idxs, training: bool, rng, spf: int,
                max_frames: int | None) -> WaveBatch:
    frames, audio, synth, spk = [], [], [], []
    with_synth = all(examples[i].synth_audio is not None for i in idxs)
    for i in idxs:
        ex = examples[i]
        f = preprocess_frames(ex.frames, training=training, rng=rng)
        a = ex.audio
        s = ex.synth_audio if with_synth else None
        if max_frames is not None and f.shape[0] > max_frames:
            f0 = int(rng.integers(0, f.shape[0] - max_frames + 1)) if training else 0
            f = f[f0:f0 + max_frames]
            a = a[f0 * spf:(f0 + max_frames) * spf]
            if s is not None:
                s = s[f0 * spf:(f0 + max_frames) * spf]
        frames.append(f)
        audio.append(a)
        if s is not None:
            synth.append(s)
        spk.append(ex.spk)
    return WaveBatch(
        frames=Tensor(np.stack(frames)),
        audio=np.stack(audio),
        spk=np.stack(spk),
        synth_audio=np.stack(synth) if with_synth and synth else None,
    )


def _mel_batch(examples, idxs, training: bool, rng) -> MelBatch:
    frames = [preprocess_frames(examples[i].frames, training=training, rng=rng)
              for i in idxs]
    mels = [examples[i].mel for i in idxs]
    synths = [examples[i].synth_mel for i in idxs]
    with_synth = all(s is not None for s in synths)
    t = min(m.shape[0] for m in mels)
    if with_synth:
        t = min(t, min(s.shape[0] for s in synths))
    return MelBatch(
        frames=Tensor(np.stack(frames)),
        mel=np.stack([m[:t] for m in mels]),
        spk=np.stack([examples[i].spk for i in idxs]),
        synth_mel=np.stack([s[:t] for s in synths]) if with_synth else None,
    )


# ---- validation --------------------------------------------------------------------


def validation_mel_l1(generator: Module, examples, family: str,
                      mel_cfg: dsp.MelConfig | None = None,
                      kind: str = "v2a") -> float:
    """Mean per-clip log-mel L1 against ground truth; the selection statistic
    for both families (waveforms are compared through their log-mels).

    Audio-visual models are validated on the av branch with synthesized
    inputs, the deployment condition.
    """
    generator.eval()
    total = 0.0
    rng = np.random.default_rng(0)  # unused flip path; eval never flips
    for ex in examples:
        frames = Tensor(preprocess_frames(ex.frames, training=False, rng=rng)[None])
        if family == "mel":
            target = ex.mel
            if kind == "av2a":
                t = min(target.shape[0], ex.synth_mel.shape[0])
                out = generator.forward(frames, Tensor(ex.synth_mel[None, :t]),
                                        ex.spk[None], mode="av")
                target = target[:t]
            else:
                out = generator.forward(frames, ex.spk[None],
                                        target_len=target.shape[0])
            pred = out.data[0]
        else:
            if kind == "av2a":
                out = generator.forward(frames, ex.synth_audio[None], ex.spk[None],
                                        mode="av")
            else:
                out = generator.forward(frames, ex.spk[None])
            wave = np.asarray(out.data[0], dtype=np.float64)
            target = dsp.log_mel(ex.audio.astype(np.float64), mel_cfg)
            pred = dsp.log_mel(wave, mel_cfg)
            t = min(target.shape[0], pred.shape[0])
            target, pred = target[:t], pred[:t]
        total += float(np.abs(pred - np.asarray(target, dtype=pred.dtype)).mean())
    return total / len(examples)


# ---- mel config plumbing -----------------------------------------------------------


def mel_cfg_to_dict(cfg: dsp.MelConfig) -> dict:
    return {
        "sample_rate": cfg.sample_rate, "n_mels": cfg.n_mels,
        "fmin": cfg.fmin, "fmax": cfg.fmax,
        "stft": {"fft_size": cfg.stft.fft_size, "hop_size": cfg.stft.hop_size,
                 "win_size": cfg.stft.win_size},
    }


def mel_cfg_from_dict(d: dict) -> dsp.MelConfig:
    return dsp.MelConfig(
        sample_rate=d["sample_rate"], n_mels=d["n_mels"],
        fmin=d["fmin"], fmax=d["fmax"], stft=dsp.StftConfig(**d["stft"]),
    )


# ---- training loops ----------------------------------------------------------------

WAVE_PRESETS = {"tiny": wave_config_tiny, "full": wave_config_full}
MEL_PRESETS = {"tiny": mel_config_tiny, "vs": mel_config_vs,
               "s": mel_config_s, "m": mel_config_m}


def _preset(family: str, name: str):
    table = {"wave": WAVE_PRESETS, "mel": MEL_PRESETS}.get(family)
    if table is None:
        raise ConfigError(f"unknown model family {family!r}, expected wave or mel")
    if name not in table:
        raise ConfigError(f"unknown {family} preset {name!r}, "
                          f"expected one of {tuple(table)}")
    return table[name]()


def _corpus_rate(manifest: Manifest) -> int:
    row = manifest.rows[0]
    _, rate = read_wave_file(manifest.resolve(row.audio_path))
    return rate


def _encoder_from_spec(name: str, rate: int, weights: str | None):
    return build_speaker_encoder(name, sample_rate=rate, weights_path=weights)


def _epoch_batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _write_summary(out: Path, summary: dict) -> None:
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def train_v2a(manifest_path, family: str, out_dir, *, epochs: int, seed: int = 0,
              preset: str = "tiny", gan: bool = True, batch_size: int | None = None,
              lr_variant: str = "seen", warmup_epochs: int | None = None,
              speaker_encoder: str = "stub",
              speaker_weights: str | None = None) -> dict:
    """Train a base model from scratch; one checkpoint directory per epoch,
    plus a summary naming the selected one."""
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    check_lr_variant(lr_variant)
    cfg = _preset(family, preset)
    manifest = read_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rate = _corpus_rate(manifest)
    if family == "wave" and cfg.sample_rate != rate:
        raise ConfigError(f"corpus rate {rate} does not match "
                          f"{preset} preset rate {cfg.sample_rate}")
    mel_cfg = dsp.MelConfig(sample_rate=rate)
    encoder = _encoder_from_spec(speaker_encoder, rate, speaker_weights)

    ss = np.random.SeedSequence(seed)
    init_rng, ref_rng, train_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    train_ex, _ = load_examples(manifest, "train", family, encoder, ref_rng, mel_cfg)
    val_ex, _ = load_examples(manifest, "val", family, encoder, ref_rng, mel_cfg)

    config: dict = {"model": dataclasses.asdict(cfg), "mel": mel_cfg_to_dict(mel_cfg)}
    meta_base = {
        "family": family, "kind": "v2a", "preset": preset, "sample_rate": rate,
        "gan": gan, "lr_variant": lr_variant,
        "speaker_encoder": {"name": speaker_encoder, "weights": speaker_weights},
    }
    schedule = None
    if family == "wave":
        optim_cfg = WaveOptimConfig()
        disc_cfg = DiscriminatorConfig(width_divisor=cfg.width_divisor)
        config["optim"] = dataclasses.asdict(optim_cfg)
        config["disc"] = dataclasses.asdict(disc_cfg)
        gen = V2AWaveGenerator(cfg, init_rng)
        disc = MultiScaleWaveDiscriminator(init_rng, disc_cfg)
        state = WaveTrainState(
            generator=gen, discriminator=disc,
            gen_opt=Adam(gen.named_parameters(), optim_cfg.lr,
                         optim_cfg.beta1, optim_cfg.beta2),
            disc_opt=Adam(disc.named_parameters(), optim_cfg.lr,
                          optim_cfg.beta1, optim_cfg.beta2),
        )
        optimizers = {"gen": state.gen_opt, "disc": state.disc_opt}
        setup = default_wave_loss_setup(rate)
        bs = batch_size or optim_cfg.batch_size
        max_frames = int(optim_cfg.max_clip_seconds * rate) // cfg.samples_per_frame
    else:
        optim_cfg = MelOptimConfig(**({} if warmup_epochs is None
                                      else {"warmup_epochs": warmup_epochs}))
        config["optim"] = dataclasses.asdict(optim_cfg)
        gen = V2AMelGenerator(cfg, init_rng)
        disc = None
        schedule = LrSchedule(optim_cfg.stage1_lr(lr_variant), optim_cfg.warmup_epochs)
        state = MelTrainState(
            generator=gen,
            opt=AdamW(gen.named_parameters(), lr_at(schedule, 0),
                      optim_cfg.beta1, optim_cfg.beta2,
                      weight_decay=optim_cfg.weight_decay),
        )
        optimizers = {"main": state.opt}
        bs = batch_size or 2

    history: list = []
    for epoch in range(epochs):
        if schedule is not None:
            state.opt.lr = lr_at(schedule, epoch)
        for idxs in _epoch_batches(len(train_ex), bs, train_rng):
            if family == "wave":
                batch = _wave_batch(train_ex, idxs, True, train_rng,
                                    cfg.samples_per_frame, max_frames)
                train_step_v2a_wave(batch, state, optim_cfg, setup, train_rng, gan=gan)
            else:
                batch = _mel_batch(train_ex, idxs, True, train_rng)
                train_step_v2a_mel(batch, state)
        history.append(validation_mel_l1(gen, val_ex, family, mel_cfg, kind="v2a"))
        meta = dict(meta_base, config=config, epoch=epoch,
                    schedule=(None if schedule is None
                              else dataclasses.asdict(schedule)),
                    rng_state=rng_state_hex(train_rng), val_history=list(history))
        save_checkpoint(out / f"epoch_{epoch:04d}", meta, gen, disc, optimizers)

    selected = select_checkpoint(
        history, optim_cfg.warmup_epochs if family == "mel" else None
    )
    summary = {
        "kind": "v2a", "family": family, "preset": preset, "epochs": epochs,
        "val_history": history, "selected_epoch": selected,
        "selected_checkpoint": str(out / f"epoch_{selected:04d}"),
        "final_checkpoint": str(out / f"epoch_{selected:04d}"),
    }
    _write_summary(out, summary)
    return summary


def train_av2a(manifest_path, v2a_checkpoint, procedure: str, out_dir, *,
               epochs: int, stage2_epochs: int = 0, seed: int = 0,
               gan: bool = True, batch_size: int | None = None,
               lr_variant: str = "seen",
               warmup_epochs: int | None = None) -> dict:
    """Transplant from a base checkpoint and train under one procedure.

    Mel family: stage 1 with the frontend and decoder frozen, selection over
    the warmup window, then optional stage 2 resuming the schedule from the
    selected epoch with a constant frontend learning rate.
    """
    from .bootstrap import build_av2a_from_v2a

    procedure_branches(procedure)
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    check_lr_variant(lr_variant)
    manifest = read_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ss = np.random.SeedSequence(seed)
    init_rng, ref_rng, train_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    gen, disc, src_meta = build_av2a_from_v2a(v2a_checkpoint, init_rng)
    family = src_meta["family"]
    rate = src_meta["sample_rate"]
    mel_cfg = mel_cfg_from_dict(src_meta["config"]["mel"])
    se = src_meta["speaker_encoder"]
    encoder = _encoder_from_spec(se["name"], rate, se.get("weights"))

    train_ex, _ = load_examples(manifest, "train", family, encoder, ref_rng,
                                mel_cfg, require_synth=True)
    val_ex, _ = load_examples(manifest, "val", family, encoder, ref_rng,
                              mel_cfg, require_synth=True)

    config = dict(src_meta["config"], model=src_meta["config"]["model"])
    meta_base = {
        "family": family, "kind": "av2a", "preset": src_meta.get("preset"),
        "sample_rate": rate, "gan": gan, "lr_variant": lr_variant,
        "procedure": procedure, "speaker_encoder": se,
        "source_checkpoint": str(v2a_checkpoint),
    }
    history: list = []

    if family == "wave":
        cfg = gen.cfg
        optim_cfg = WaveOptimConfig(**src_meta["config"].get(
            "optim", dataclasses.asdict(WaveOptimConfig())))
        state = WaveTrainState(
            generator=gen, discriminator=disc,
            gen_opt=Adam(gen.named_parameters(), optim_cfg.lr,
                         optim_cfg.beta1, optim_cfg.beta2),
            disc_opt=Adam(disc.named_parameters(), optim_cfg.lr,
                          optim_cfg.beta1, optim_cfg.beta2),
        )
        optimizers = {"gen": state.gen_opt, "disc": state.disc_opt}
        setup = default_wave_loss_setup(rate)
        bs = batch_size or optim_cfg.batch_size
        max_frames = int(optim_cfg.max_clip_seconds * rate) // cfg.samples_per_frame
        for epoch in range(epochs):
            for idxs in _epoch_batches(len(train_ex), bs, train_rng):
                batch = _wave_batch(train_ex, idxs, True, train_rng,
                                    cfg.samples_per_frame, max_frames)
                train_step_wave(batch, state, procedure, optim_cfg, setup,
                                train_rng, gan=gan)
            history.append(validation_mel_l1(gen, val_ex, family, mel_cfg,
                                             kind="av2a"))
            meta = dict(meta_base, config=config, epoch=epoch, schedule=None,
                        rng_state=rng_state_hex(train_rng),
                        val_history=list(history))
            save_checkpoint(out / f"epoch_{epoch:04d}", meta, gen, disc, optimizers)
        selected = select_checkpoint(history)
        selected_path = out / f"epoch_{selected:04d}"
        summary = {
            "kind": "av2a", "family": family, "procedure": procedure,
            "epochs": epochs, "val_history": history, "selected_epoch": selected,
            "selected_checkpoint": str(selected_path),
            "final_checkpoint": str(selected_path),
        }
        _write_summary(out, summary)
        return summary

    # mel family, staged
    optim_cfg = MelOptimConfig(**({} if warmup_epochs is None
                                  else {"warmup_epochs": warmup_epochs}))
    config["optim"] = dataclasses.asdict(optim_cfg)
    schedule = LrSchedule(optim_cfg.stage1_lr(lr_variant), optim_cfg.warmup_epochs)
    stage1_names = ("audio_encoder.", "temporal.")
    state = MelTrainState(
        generator=gen,
        opt=AdamW([(n, p) for n, p in gen.named_parameters()
                   if n.startswith(stage1_names)],
                  lr_at(schedule, 0), optim_cfg.beta1, optim_cfg.beta2,
                  weight_decay=optim_cfg.weight_decay),
    )
    bs = batch_size or 2
    for epoch in range(epochs):
        state.opt.lr = lr_at(schedule, epoch)
        for idxs in _epoch_batches(len(train_ex), bs, train_rng):
            batch = _mel_batch(train_ex, idxs, True, train_rng)
            train_step_mel(batch, state, procedure, stage=1)
        history.append(validation_mel_l1(gen, val_ex, family, mel_cfg, kind="av2a"))
        meta = dict(meta_base, config=config, epoch=epoch, stage=1,
                    schedule=dataclasses.asdict(schedule),
                    rng_state=rng_state_hex(train_rng), val_history=list(history))
        save_checkpoint(out / f"stage1_epoch_{epoch:04d}", meta, gen,
                        optimizers={"main": state.opt})
    selected = select_checkpoint(history, optim_cfg.warmup_epochs)
    selected_path = out / f"stage1_epoch_{selected:04d}"
    final_path = selected_path

    if stage2_epochs > 0:
        load_checkpoint(selected_path, gen)
        state = MelTrainState(
            generator=gen,
            opt=AdamW([(n, p) for n, p in gen.named_parameters()
                       if not n.startswith("video_encoder.")],
                      lr_at(schedule, selected + 1), optim_cfg.beta1,
                      optim_cfg.beta2, weight_decay=optim_cfg.weight_decay),
            frontend_opt=AdamW([(n, p) for n, p in gen.named_parameters()
                                if n.startswith("video_encoder.")],
                               optim_cfg.stage2_frontend_lr(lr_variant),
                               optim_cfg.beta1, optim_cfg.beta2,
                               weight_decay=optim_cfg.weight_decay),
        )
        for i in range(stage2_epochs):
            # the schedule's epoch counter resumes from the selected epoch
            epoch = selected + 1 + i
            state.opt.lr = lr_at(schedule, epoch)
            for idxs in _epoch_batches(len(train_ex), bs, train_rng):
                batch = _mel_batch(train_ex, idxs, True, train_rng)
                train_step_mel(batch, state, procedure, stage=2)
            history.append(validation_mel_l1(gen, val_ex, family, mel_cfg,
                                             kind="av2a"))
            meta = dict(meta_base, config=config, epoch=epoch, stage=2,
                        schedule=dataclasses.asdict(schedule),
                        rng_state=rng_state_hex(train_rng),
                        val_history=list(history))
            final_path = out / f"stage2_epoch_{i:04d}"
            save_checkpoint(final_path, meta, gen,
                            optimizers={"main": state.opt,
                                        "frontend": state.frontend_opt})

    summary = {
        "kind": "av2a", "family": family, "procedure": procedure,
        "epochs": epochs, "stage2_epochs": stage2_epochs,
        "val_history": history, "selected_epoch": selected,
        "selected_checkpoint": str(selected_path),
        "final_checkpoint": str(final_path),
    }
    _write_summary(out, summary)
    return summary
