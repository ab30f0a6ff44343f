import json

import numpy as np
import pytest

from affectfusion.datamodel import EMOTIONS, Modality, Task
from affectfusion.featurestore import (
    CorruptFileError,
    FeatureValidationError,
    InvalidSampleError,
    SchemaVersionError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    read_feature_matrix,
    read_manifest,
    read_transcript,
    write_feature_matrix,
    write_transcript,
)
from affectfusion.datamodel import WordToken
from affectfusion.metrics import pearson
from tests_support import pack_hash


def test_round_trip_is_bit_exact(tmp_path):
    m = np.array([[0.0, -0.0, 1.5], [np.float32(1e-30), -3.25, 7.0]], dtype=np.float32)
    path = tmp_path / "x.f32"
    write_feature_matrix(m, path, "audio", 10.0)
    back = read_feature_matrix(path)
    assert back.dtype == np.float32
    assert back.tobytes() == m.tobytes()
    assert np.signbit(back[0, 1]) and not np.signbit(back[0, 0])


def test_sidecar_fields(tmp_path):
    path = tmp_path / "audio.f32"
    write_feature_matrix(np.ones((4, 2)), path, "audio", 10.0)
    meta = json.loads((tmp_path / "audio.meta.json").read_text())
    assert meta == {"rows": 4, "cols": 2, "dtype": "f32le", "modality": "audio", "frame_rate_hz": 10.0}


def test_truncated_file_is_reported(tmp_path):
    path = tmp_path / "t.f32"
    write_feature_matrix(np.ones((5, 3)), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptFileError, match="sidecar declares 5x3"):
        read_feature_matrix(path)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected_on_write(tmp_path, bad):
    m = np.zeros((2, 2))
    m[1, 0] = bad
    with pytest.raises(FeatureValidationError):
        write_feature_matrix(m, tmp_path / "bad.f32")


def test_transcript_round_trip(tmp_path):
    words = (WordToken("hello", 0.1, 0.45), WordToken("world", 0.5, 1.0 / 3.0 + 0.5))
    write_transcript(words, tmp_path / "t.tsv")
    assert read_transcript(tmp_path / "t.tsv") == words


@pytest.mark.parametrize("task", ["emi", "bah"])
def test_generation_is_deterministic(tmp_path, task):
    spec = SyntheticSpec(task=task, n_samples={"train": 3, "val": 2}, duration_s=(3.0, 8.0), seed=9)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert pack_hash(tmp_path / "a") == pack_hash(tmp_path / "b")
    generate_synthetic(SyntheticSpec(task=task, n_samples={"train": 3, "val": 2}, duration_s=(3.0, 8.0), seed=10), tmp_path / "c")
    assert pack_hash(tmp_path / "a") != pack_hash(tmp_path / "c")


def _emi_probe(root):
    """Least-squares fit of labels on time-averaged audio+vision features."""
    ds = load_dataset(root)
    xs, ys = [], []
    for s in ds:
        feats = [s.tracks[m].features.mean(axis=0) for m in (Modality.AUDIO, Modality.VISION)]
        xs.append(np.concatenate(feats + [np.ones(1)]))
        ys.append(s.label.as_array())
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    fit = x @ coef
    return [pearson(fit[:, k], y[:, k]) for k in range(len(EMOTIONS))]


def test_planted_signal_is_linearly_recoverable(tmp_path):
    generate_synthetic(SyntheticSpec(task="emi", n_samples={"train": 64}, seed=1), tmp_path)
    rhos = _emi_probe(tmp_path)
    assert min(rhos) > 0.99


def test_zero_signal_is_not_recoverable_out_of_sample(tmp_path):
    generate_synthetic(SyntheticSpec(task="emi", n_samples={"train": 64}, seed=1, signal_strength=0.0), tmp_path)
    rhos = _emi_probe(tmp_path)
    # in-sample fit with 17 regressors on 64 points leaves only chance-level correlation
    assert max(rhos) < 0.8


def test_bah_labels_follow_planted_direction(tmp_path):
    generate_synthetic(SyntheticSpec(task="bah", n_samples={"train": 4}, duration_s=(60.0, 60.0), seed=2), tmp_path)
    for s in load_dataset(tmp_path):
        audio = s.tracks[Modality.AUDIO]
        labels = s.label.labels
        t = (np.arange(labels.shape[0]) + 0.5) / s.label.frame_rate_hz
        rows = np.minimum((t * audio.frame_rate_hz).astype(int), audio.n_frames - 1)
        feats = audio.features[rows].astype(np.float64)
        if labels.min() == labels.max():
            continue
        gap = feats[labels == 1].mean(axis=0) - feats[labels == 0].mean(axis=0)
        assert np.linalg.norm(gap) > 1.0


def test_duplicate_modality_is_byte_copy(tmp_path):
    generate_synthetic(
        SyntheticSpec(task="emi", n_samples={"train": 2}, seed=4, duplicate={"vision": "audio"}), tmp_path
    )
    for s in load_dataset(tmp_path):
        a, v = s.tracks[Modality.AUDIO], s.tracks[Modality.VISION]
        assert a.features.tobytes() == v.features.tobytes()
        assert a.frame_rate_hz == v.frame_rate_hz


class TestLoadDataset:
    def test_splits_and_counts(self, emi_pack):
        ds = load_dataset(emi_pack)
        assert ds.task is Task.EMI
        assert len(ds.records("train")) == 12 and len(ds.records("val")) == 8
        assert load_dataset(emi_pack / "manifest.json").manifest == ds.manifest

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_schema_version(self, tmp_path, emi_pack):
        data = json.loads((emi_pack / "manifest.json").read_text())
        data["version"] = "99"
        (tmp_path / "manifest.json").write_text(json.dumps(data))
        with pytest.raises(SchemaVersionError):
            read_manifest(tmp_path / "manifest.json")

    def test_corrupt_sample_is_reported(self, tmp_path):
        generate_synthetic(SyntheticSpec(task="emi", n_samples={"train": 3}, seed=6), tmp_path)
        victim = tmp_path / "train_0001" / "audio.f32"
        victim.write_bytes(victim.read_bytes()[:-8])
        ds = load_dataset(tmp_path)
        report = ds.validate()
        assert list(report) == ["train_0001"]
        assert report["train_0001"][0].startswith("io: audio")
        with pytest.raises(InvalidSampleError) as err:
            list(ds.samples("train"))
        assert err.value.sample_id == "train_0001"
