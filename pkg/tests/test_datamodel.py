import numpy as np
import pytest

from affectfusion.datamodel import (
    BahLabelTrack,
    DatasetManifest,
    EmiLabel,
    Modality,
    ModalityTrack,
    Sample,
    SampleRecord,
    Split,
    Task,
    WordToken,
    split_statistics,
    validate_sample,
)
from affectfusion.featurestore import generate_synthetic, SyntheticSpec, load_dataset


def _track(modality, n, rate, dim=4):
    feats = np.zeros((n, dim), dtype=np.float32)
    return ModalityTrack(modality, feats, rate, n / rate)


def _emi_sample(intensities=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)):
    tracks = {
        Modality.AUDIO: _track(Modality.AUDIO, 50, 10.0),
        Modality.VISION: _track(Modality.VISION, 30, 6.0),
        Modality.TEXT: (WordToken("hi", 0.5, 1.0), WordToken("there", 1.2, 1.8)),
    }
    return Sample("s0", Split.TRAIN, Task.EMI, tracks, EmiLabel(tuple(intensities)), 5.0)


def test_well_formed_emi_sample_has_no_violations():
    assert validate_sample(_emi_sample()) == []


def test_intensity_out_of_range():
    violations = validate_sample(_emi_sample((0.1, 1.3, 0.3, 0.4, 0.5, 0.6)))
    assert len(violations) == 1
    assert "intensities range" in violations[0]


def test_validate_is_pure():
    s = _emi_sample((0.1, 1.3, 0.3, 0.4, 0.5, 0.6))
    assert validate_sample(s) == validate_sample(s)


def test_bah_duration_disagreement(bah_dataset):
    sample = next(iter(bah_dataset))
    vision = sample.tracks[Modality.VISION]
    audio = sample.tracks[Modality.AUDIO]
    vision_period = 1.0 / vision.frame_rate_hz
    # drop audio frames worth three vision frame periods, keep the track self-consistent
    n_drop = int(round(3 * vision_period * audio.frame_rate_hz))
    feats = audio.features[:-n_drop]
    short = ModalityTrack(Modality.AUDIO, feats, audio.frame_rate_hz, feats.shape[0] / audio.frame_rate_hz)
    tracks = dict(sample.tracks)
    tracks[Modality.AUDIO] = short
    bad = Sample(sample.id, sample.split, sample.task, tracks, sample.label, sample.duration_s)

    recomputed = {m: t.n_frames / t.frame_rate_hz for m, t in tracks.items() if m is not Modality.TEXT}
    assert sample.duration_s - recomputed[Modality.AUDIO] == pytest.approx(3 * vision_period, abs=0.11)
    violations = validate_sample(bad)
    assert len(violations) == 1
    assert "audio.duration agreement" in violations[0]


def test_label_task_mismatch():
    s = _emi_sample()
    bad = Sample(s.id, s.split, Task.BAH, s.tracks, s.label, s.duration_s)
    assert any("BAH sample requires" in v for v in validate_sample(bad))


def test_bad_bah_labels():
    track = BahLabelTrack(np.array([0, 2, 1], dtype=np.uint8), 5.0)
    s = Sample("b", Split.TRAIN, Task.BAH, {}, track, 0.6)
    assert any("0 or 1" in v for v in validate_sample(s))


def test_vad_dim_and_non_finite():
    bad_vad = _track(Modality.VAD, 10, 5.0, dim=4)
    feats = np.zeros((50, 4), dtype=np.float32)
    feats[3, 1] = np.nan
    s = _emi_sample()
    tracks = dict(s.tracks)
    tracks[Modality.VAD] = bad_vad
    tracks[Modality.AUDIO] = ModalityTrack(Modality.AUDIO, feats, 10.0, 5.0)
    violations = validate_sample(Sample(s.id, s.split, s.task, tracks, s.label, 2.0))
    assert any("VAD track must have 3 columns" in v for v in violations)
    assert any("non-finite" in v for v in violations)


def test_unsorted_words():
    s = _emi_sample()
    tracks = dict(s.tracks)
    tracks[Modality.TEXT] = (WordToken("b", 2.0, 2.5), WordToken("a", 1.0, 1.5))
    violations = validate_sample(Sample(s.id, s.split, s.task, tracks, s.label, s.duration_s))
    assert any("not sorted" in v for v in violations)


def test_duplicate_ids_rejected():
    rec = SampleRecord("x", Split.TRAIN, 1.0, {})
    with pytest.raises(ValueError):
        DatasetManifest(Task.EMI, (rec, rec))


class TestSplitStatistics:
    def test_empty(self):
        stats = split_statistics(DatasetManifest(Task.EMI))
        assert all(v["count"] == 0 for v in stats.values())

    def test_ten_two_second_samples(self):
        recs = tuple(SampleRecord(f"s{i}", Split.TRAIN, 2.0, {}) for i in range(10))
        stats = split_statistics(DatasetManifest(Task.EMI, recs))
        assert stats["train"]["count"] == 10
        assert stats["train"]["hours"] == pytest.approx(20 / 3600)
        assert round(stats["train"]["hours"], 5) == 0.00556

    def test_challenge_sized_splits(self):
        counts = {Split.TRAIN: 8072, Split.VAL: 4588, Split.TEST: 4582}
        recs = tuple(
            SampleRecord(f"{s.value}{i}", s, 6.7, {}) for s, n in counts.items() for i in range(n)
        )
        stats = split_statistics(DatasetManifest(Task.EMI, recs))
        assert [stats[s.value]["count"] for s in counts] == [8072, 4588, 4582]
        assert stats["train"]["hours"] == pytest.approx(15.0, abs=0.1)


@pytest.mark.parametrize("task", ["emi", "bah"])
def test_generated_samples_are_valid(tmp_path, task):
    generate_synthetic(
        SyntheticSpec(task=task, n_samples={"train": 3, "val": 2}, duration_s=(3.0, 12.0), seed=11),
        tmp_path,
    )
    ds = load_dataset(tmp_path)
    assert ds.validate() == {}
    assert all(validate_sample(s) == [] for s in ds)
