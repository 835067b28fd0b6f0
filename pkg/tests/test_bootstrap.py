"""Synthesis pass and parameter transplant from the video-only model."""

import numpy as np
import pytest

import lipsynth.training as tr
from lipsynth.blocks import modality
from lipsynth.bootstrap import build_av2a_from_v2a, synthesize_dataset
from lipsynth.data import (generate_synthetic_corpus, read_manifest,
                           read_mel_file, read_wave_file)
from lipsynth.engine import Tensor
from lipsynth.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def corpus24k(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus24k")
    return generate_synthetic_corpus(2, 2, 1.0, 31, root / "c")


@pytest.fixture(scope="module")
def corpus8k(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus8k")
    return generate_synthetic_corpus(2, 2, 1.0, 32, root / "c", sample_rate=8000)


@pytest.fixture(scope="module")
def v2a_mel(corpus24k, tmp_path_factory):
    out = tmp_path_factory.mktemp("v2a_mel")
    s = tr.train_v2a(corpus24k, "mel", out, epochs=1, seed=2, preset="tiny",
                     warmup_epochs=1)
    return s["selected_checkpoint"]


@pytest.fixture(scope="module")
def v2a_wave(corpus8k, tmp_path_factory):
    out = tmp_path_factory.mktemp("v2a_wave")
    s = tr.train_v2a(corpus8k, "wave", out, epochs=1, seed=2, preset="tiny",
                     batch_size=2)
    return s["selected_checkpoint"]


# ---- synthesis ----------------------------------------------------------------------


def test_synthesize_mel_writes_every_row(v2a_mel, corpus24k, tmp_path):
    man = synthesize_dataset(v2a_mel, corpus24k, tmp_path / "s", seed=0)
    rows = read_manifest(man).rows
    assert len(rows) == 4
    assert all(r.synth_audio_path is not None for r in rows)
    m = read_manifest(man)
    for r in rows:
        # 25 frames of video at 24 kHz: 1 + 24000 // 300 mel frames
        mel = read_mel_file(m.resolve(r.synth_audio_path))
        assert mel.shape == (81, 80)
        assert m.resolve(r.video_path).exists()
        assert m.resolve(r.audio_path).exists()
    assert {r.split for r in rows} == {"train", "val", "test"}


def test_synthesize_is_deterministic(v2a_mel, corpus24k, tmp_path):
    def tree(p):
        return {f.relative_to(p).as_posix(): f.read_bytes()
                for f in sorted(p.rglob("*")) if f.is_file()}

    synthesize_dataset(v2a_mel, corpus24k, tmp_path / "a", seed=3)
    synthesize_dataset(v2a_mel, corpus24k, tmp_path / "b", seed=3)
    ta, tb = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert sorted(ta) == sorted(tb)
    # absolute relpaths differ between dirs; artifact payloads must not
    assert all(ta[k] == tb[k] for k in ta if not k.endswith("manifest.jsonl"))


def test_synthesize_wave_emits_playable_audio(v2a_wave, corpus8k, tmp_path):
    man = synthesize_dataset(v2a_wave, corpus8k, tmp_path / "s", seed=0)
    m = read_manifest(man)
    wave, rate = read_wave_file(m.resolve(m.rows[0].synth_audio_path))
    assert rate == 8000
    assert wave.shape == (8000,)
    assert np.all(np.abs(wave) <= 1.0)


def test_synthesize_rejects_non_base_checkpoints(v2a_mel, corpus24k, tmp_path):
    man = synthesize_dataset(v2a_mel, corpus24k, tmp_path / "s", seed=0)
    s = tr.train_av2a(man, v2a_mel, "baseline", tmp_path / "a", epochs=1,
                      warmup_epochs=1)
    with pytest.raises(ConfigError, match="v2a"):
        synthesize_dataset(s["final_checkpoint"], man, tmp_path / "t")


# ---- transplant ---------------------------------------------------------------------


def test_transplant_copies_shared_parts_bit_exactly(v2a_mel):
    src_meta = tr.load_checkpoint_meta(v2a_mel)
    src, _ = tr.build_models_from_meta(src_meta)
    tr.load_checkpoint(v2a_mel, src)
    gen, disc, meta = build_av2a_from_v2a(v2a_mel, np.random.default_rng(8))
    assert disc is None and meta["family"] == "mel"

    src_state = src.state_arrays()
    new_state = gen.state_arrays()
    copied = 0
    for name, arr in new_state.items():
        if not name.startswith(("video_encoder.", "decoder.")):
            continue
        if name in src_state:
            assert arr.tobytes() == src_state[name].tobytes(), name
            copied += 1
        else:
            stem, mode = name.rsplit("_", 1)
            assert mode in ("av", "v", "a")
            assert arr.tobytes() == src_state[stem + "_default"].tobytes(), name
            copied += 1
    assert copied > 20


def test_transplant_fans_out_normalization_stats(v2a_mel):
    gen, _, _ = build_av2a_from_v2a(v2a_mel, np.random.default_rng(8))
    state = gen.state_arrays()
    means = [n for n in state if n.endswith("running_mean_av")]
    assert means
    for name in means:
        stem = name[: -len("av")]
        np.testing.assert_array_equal(state[name], state[stem + "v"])
        np.testing.assert_array_equal(state[name], state[stem + "a"])


def test_transplanted_video_encoder_reproduces_source_activations(v2a_wave):
    src_meta = tr.load_checkpoint_meta(v2a_wave)
    src, _ = tr.build_models_from_meta(src_meta)
    tr.load_checkpoint(v2a_wave, src)
    gen, disc, _ = build_av2a_from_v2a(v2a_wave, np.random.default_rng(8))
    src.eval()
    gen.eval()
    frames = Tensor(np.random.default_rng(3)
                    .standard_normal((1, 5, 12, 12, 3)).astype(np.float32) * 0.2)
    with modality("default"):
        want = src.video_encoder(frames).data
    with modality("av"):
        got = gen.video_encoder(frames).data
    assert want.tobytes() == got.tobytes()

    # wave family also carries the discriminator across
    d_state = disc.state_arrays()
    fresh = tr.build_models_from_meta(src_meta, np.random.default_rng(8))[1]
    tr.load_checkpoint(v2a_wave, discriminator=fresh)
    for name, arr in fresh.state_arrays().items():
        assert d_state[name].tobytes() == arr.tobytes(), name


def test_transplant_initializes_audio_parts_fresh(v2a_wave):
    g1, _, _ = build_av2a_from_v2a(v2a_wave, np.random.default_rng(1))
    g2, _, _ = build_av2a_from_v2a(v2a_wave, np.random.default_rng(2))
    s1, s2 = g1.state_arrays(), g2.state_arrays()
    fresh = [n for n in s1 if n.startswith(("audio_encoder.", "temporal."))
             and s1[n].size and not np.array_equal(s1[n], s2[n])]
    assert fresh, "fresh parts should depend on the transplant rng"
    shared = [n for n in s1 if n.startswith(("video_encoder.", "decoder."))]
    assert all(np.array_equal(s1[n], s2[n]) for n in shared)


def test_transplant_widens_the_temporal_input(v2a_wave):
    src_meta = tr.load_checkpoint_meta(v2a_wave)
    src, _ = tr.build_models_from_meta(src_meta)
    gen, _, _ = build_av2a_from_v2a(v2a_wave, np.random.default_rng(0))
    src_w = dict(src.named_parameters())
    new_w = dict(gen.named_parameters())
    src_in = [p.data.shape for n, p in src_w.items()
              if n.startswith("temporal.") and p.data.ndim == 2]
    new_in = [p.data.shape for n, p in new_w.items()
              if n.startswith("temporal.") and p.data.ndim == 2]
    assert src_in != new_in


def test_transplant_rejects_av2a_sources(v2a_mel, corpus24k, tmp_path):
    man = synthesize_dataset(v2a_mel, corpus24k, tmp_path / "s", seed=0)
    s = tr.train_av2a(man, v2a_mel, "baseline", tmp_path / "a", epochs=1,
                      warmup_epochs=1)
    with pytest.raises(ConfigError, match="v2a"):
        build_av2a_from_v2a(s["final_checkpoint"], np.random.default_rng(0))
