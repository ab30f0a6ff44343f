import sys

import numpy as np
import pytest

from affectfusion.datamodel import EmiLabel, Modality, ModalityTrack, Sample, Split, Task
from affectfusion.encoders import (
    ExternalTextEmbedder,
    PrecomputedSource,
    StubTextEmbedder,
    audio_with_vad,
    merge_vad,
    stub_text_embed,
)


class TestStubEmbedding:
    def test_unit_norm_and_deterministic(self):
        a = stub_text_embed(["we", "[NOW]", "go"], 16, seed=1)
        assert a.shape == (16,)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert np.array_equal(a, stub_text_embed(["we", "[NOW]", "go"], 16, seed=1))

    def test_seed_changes_vectors(self):
        assert not np.allclose(stub_text_embed(["x"], 16, 0), stub_text_embed(["x"], 16, 1))

    def test_order_and_marker_sensitive(self):
        base = stub_text_embed(["a", "b", "[NOW]", "c"], 32)
        assert not np.allclose(base, stub_text_embed(["b", "a", "[NOW]", "c"], 32))
        assert not np.allclose(base, stub_text_embed(["a", "[NOW]", "b", "c"], 32))

    def test_marker_does_not_collide_with_literal_word(self):
        # a custom marker must not embed like the same string appearing as a word
        assert not np.allclose(
            stub_text_embed(["NOW"], 16, marker_token="NOW"), stub_text_embed(["NOW"], 16)
        )

    def test_empty_window(self):
        v = stub_text_embed([], 8)
        assert np.isfinite(v).all() and np.linalg.norm(v) == pytest.approx(1.0)

    def test_embedder_cache_returns_readonly(self):
        emb = StubTextEmbedder(dim=8)
        v = emb.embed(["a"])
        assert emb.embed(["a"]) is v
        with pytest.raises(ValueError):
            v[0] = 1.0


def test_external_adapter_matches_stub():
    emb = ExternalTextEmbedder([sys.executable, "-m", "affectfusion.cli", "adapter", "--dim", "12", "--seed", "3"], 12)
    tokens = ["hello", "[NOW]", "there"]
    got = emb.embed(tokens)
    expect = stub_text_embed(tokens, 12, seed=3).astype(np.float32).astype(np.float64)
    assert np.array_equal(got, expect)


def test_external_adapter_failure_is_reported():
    emb = ExternalTextEmbedder([sys.executable, "-c", "import sys; sys.exit(3)"], 4)
    with pytest.raises(RuntimeError, match="exit code 3"):
        emb.embed(["x"])


def _t(modality, feats, rate):
    feats = np.asarray(feats, dtype=np.float32)
    return ModalityTrack(modality, feats, rate, feats.shape[0] / rate)


class TestAudioWithVad:
    def test_nearest_center_lookup(self):
        audio = _t(Modality.AUDIO, np.zeros((4, 1)), 4.0)
        vad = _t(Modality.VAD, [[1, 1, 1], [2, 2, 2]], 2.0)
        merged = audio_with_vad(audio, vad)
        assert merged.features.shape == (4, 4)
        assert merged.features[:, 1].tolist() == [1, 1, 2, 2]

    def test_rate_mismatch_uses_nearest(self):
        audio = _t(Modality.AUDIO, np.zeros((10, 1)), 10.0)
        vad = _t(Modality.VAD, np.arange(15).reshape(5, 3), 5.0)
        assert audio_with_vad(audio, vad).features[:, 1].tolist() == [0, 0, 3, 3, 6, 6, 9, 9, 12, 12]

    def test_duration_mismatch(self):
        audio = _t(Modality.AUDIO, np.zeros((10, 1)), 10.0)
        vad = _t(Modality.VAD, np.zeros((10, 3)), 2.0)
        with pytest.raises(ValueError, match="durations disagree"):
            audio_with_vad(audio, vad)

    def test_vad_must_be_three_wide(self):
        with pytest.raises(ValueError):
            audio_with_vad(_t(Modality.AUDIO, np.zeros((2, 1)), 1.0), _t(Modality.VAD, np.zeros((2, 2)), 1.0))

    def test_merge_vad_drops_vad_track(self):
        audio = _t(Modality.AUDIO, np.zeros((4, 2)), 4.0)
        vad = _t(Modality.VAD, np.ones((2, 3)), 2.0)
        s = Sample("s", Split.TRAIN, Task.EMI, {Modality.AUDIO: audio, Modality.VAD: vad}, EmiLabel((0.1,) * 6), 1.0)
        merged = merge_vad(s)
        assert set(merged.tracks) == {Modality.AUDIO}
        assert merged.tracks[Modality.AUDIO].dim == 5
        assert merge_vad(merged) is merged


def test_precomputed_source_checks_dim():
    audio = _t(Modality.AUDIO, np.zeros((4, 2)), 4.0)
    s = Sample("s", Split.TRAIN, Task.EMI, {Modality.AUDIO: audio}, EmiLabel((0.1,) * 6), 1.0)
    assert PrecomputedSource(Modality.AUDIO, 2).load(s) is audio
    with pytest.raises(ValueError):
        PrecomputedSource(Modality.AUDIO, 3).load(s)
