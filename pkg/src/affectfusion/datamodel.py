"""Domain types shared across the pipeline, plus structural validation."""

from __future__ import annotations

import enum
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Union

import numpy as np

EMOTIONS = (
    "Admiration",
    "Amusement",
    "Determination",
    "Empathic Pain",
    "Excitement",
    "Joy",
)


class Modality(str, enum.Enum):
    AUDIO = "audio"
    TEXT = "text"
    VISION = "vision"
    VAD = "vad"


class Task(str, enum.Enum):
    EMI = "emi"
    BAH = "bah"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class TrackReadError(OSError):
    """A track or label file exists in the manifest but cannot be read."""


@dataclass(frozen=True, eq=False)
class ModalityTrack:
    modality: Modality
    features: np.ndarray  # T x D
    frame_rate_hz: float
    duration_s: float

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def frame_period_s(self) -> float:
        return 1.0 / self.frame_rate_hz


@dataclass(frozen=True)
class WordToken:
    word: str
    start_s: float
    end_s: float

    @property
    def midpoint_s(self) -> float:
        return 0.5 * (self.start_s + self.end_s)


@dataclass(frozen=True)
class EmiLabel:
    intensities: tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class BahLabelTrack:
    labels: np.ndarray  # uint8, length F
    frame_rate_hz: float

    @property
    def n_frames(self) -> int:
        return int(self.labels.shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz


Track = Union[ModalityTrack, tuple]  # tuple of WordToken for text
Label = Union[EmiLabel, BahLabelTrack]


@dataclass(frozen=True, eq=False)
class Sample:
    """One video. ``tracks`` may be a lazy mapping that reads files on access."""

    id: str
    split: Split
    task: Task
    tracks: Mapping[Modality, Track]
    label: Label
    duration_s: float

    def words(self) -> tuple[WordToken, ...] | None:
        if Modality.TEXT not in self.tracks:
            return None
        return tuple(self.tracks[Modality.TEXT])


@dataclass(frozen=True)
class SampleRecord:
    """Manifest entry: paths relative to the pack root, never payloads."""

    id: str
    split: Split
    duration_s: float
    tracks: Mapping[str, str]  # modality name -> relative .f32 path
    transcript: str | None = None
    label: tuple[float, ...] | None = None  # EMI intensities
    labels_path: str | None = None  # BAH frame labels (.u8)


@dataclass(frozen=True)
class DatasetManifest:
    task: Task
    samples: tuple[SampleRecord, ...] = ()
    feature_dims: Mapping[str, int] = field(default_factory=dict)
    version: str = "1"

    def __post_init__(self):
        seen = set()
        for rec in self.samples:
            if rec.id in seen:
                raise ValueError(f"duplicate sample id {rec.id!r}")
            seen.add(rec.id)


def _track_violations(name: str, track: ModalityTrack) -> list[str]:
    out = []
    feats = track.features
    if feats.ndim != 2:
        return [f"{name}.features: expected a 2-D matrix, got {feats.ndim}-D"]
    if not (track.frame_rate_hz > 0 and math.isfinite(track.frame_rate_hz)):
        out.append(f"{name}.frame_rate_hz: must be positive, got {track.frame_rate_hz}")
        return out
    if feats.shape[0] < 1:
        out.append(f"{name}.features: track has no frames")
    if not np.all(np.isfinite(feats)):
        out.append(f"{name}.features: non-finite values")
    if track.modality is Modality.VAD and feats.shape[1] != 3:
        out.append(f"{name}.features: VAD track must have 3 columns, got {feats.shape[1]}")
    implied = feats.shape[0] / track.frame_rate_hz
    if abs(implied - track.duration_s) > track.frame_period_s + 1e-9:
        out.append(
            f"{name}.duration_s: {feats.shape[0]} frames at {track.frame_rate_hz} Hz "
            f"imply {implied:.4f} s, declared {track.duration_s:.4f} s"
        )
    return out


def _word_violations(words, duration_s: float) -> list[str]:
    out = []
    prev = -math.inf
    for i, w in enumerate(words):
        if w.start_s < 0:
            out.append(f"text[{i}].start_s: negative start {w.start_s}")
        if w.end_s < w.start_s:
            out.append(f"text[{i}].end_s: ends before it starts")
        if w.start_s < prev:
            out.append(f"text[{i}].start_s: tokens not sorted by start time")
        if w.end_s > duration_s + 1e-6:
            out.append(f"text[{i}].end_s: extends beyond sample duration")
        prev = w.start_s
    return out


def validate_sample(sample: Sample) -> list[str]:
    """Return every invariant violation in ``sample``; empty means well-formed.

    Each entry starts with the offending field so reports can be grepped.
    Track files that fail to load produce an ``io:`` entry instead of raising.
    """
    violations: list[str] = []
    if not (sample.duration_s > 0):
        violations.append(f"duration_s: must be positive, got {sample.duration_s}")

    label = sample.label
    if sample.task is Task.EMI:
        if not isinstance(label, EmiLabel):
            violations.append("label: EMI sample requires 6 emotion intensities")
        else:
            vals = label.intensities
            if len(vals) != len(EMOTIONS):
                violations.append(f"intensities count: expected 6, got {len(vals)}")
            if any(not (0.0 <= v <= 1.0) for v in vals):
                violations.append("intensities range: every intensity must lie in [0, 1]")
    else:
        if not isinstance(label, BahLabelTrack):
            violations.append("label: BAH sample requires a frame label track")
        else:
            if label.n_frames < 1:
                violations.append("labels: label track is empty")
            if not np.all((label.labels == 0) | (label.labels == 1)):
                violations.append("labels: values must be 0 or 1")
            if not (label.frame_rate_hz > 0):
                violations.append("labels.frame_rate_hz: must be positive")

    # (name, duration, rate) for the duration-agreement check
    timed: list[tuple[str, float, float]] = []
    for modality in list(sample.tracks):
        name = modality.value
        try:
            track = sample.tracks[modality]
        except (OSError, ValueError) as exc:
            violations.append(f"io: {name}: {exc}")
            continue
        if modality is Modality.TEXT:
            violations.extend(_word_violations(track, sample.duration_s))
            continue
        problems = _track_violations(name, track)
        violations.extend(problems)
        if not problems:
            timed.append((name, track.duration_s, track.frame_rate_hz))

    if isinstance(label, BahLabelTrack) and label.frame_rate_hz > 0 and label.n_frames:
        timed.append(("labels", label.duration_s, label.frame_rate_hz))

    if timed:
        tol = 1.0 / min(rate for _, _, rate in timed) + 1e-9
        for name, dur, _ in timed:
            if abs(dur - sample.duration_s) > tol:
                violations.append(
                    f"{name}.duration agreement: {dur:.4f} s vs sample {sample.duration_s:.4f} s "
                    f"exceeds one frame period ({tol:.4f} s)"
                )
    return violations


def split_statistics(manifest: DatasetManifest) -> dict[str, dict[str, float]]:
    stats = {s.value: {"count": 0, "hours": 0.0} for s in Split}
    for rec in manifest.samples:
        entry = stats[Split(rec.split).value]
        entry["count"] += 1
        entry["hours"] += rec.duration_s / 3600.0
    return stats
