"""On-disk feature packs and the synthetic planted-signal generator.

Pack layout::

    <root>/manifest.json
    <root>/<sample_id>/<modality>.f32        raw little-endian float32, row-major T x D
    <root>/<sample_id>/<modality>.meta.json  {rows, cols, dtype, modality, frame_rate_hz}
    <root>/<sample_id>/transcript.tsv        start_s<TAB>end_s<TAB>word per line
    <root>/<sample_id>/labels.u8             BAH frame labels, one byte per frame
    <root>/<sample_id>/labels.meta.json      {length, dtype, frame_rate_hz}

EMI intensities live in the manifest itself.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    EMOTIONS,
    BahLabelTrack,
    DatasetManifest,
    EmiLabel,
    Modality,
    ModalityTrack,
    Sample,
    SampleRecord,
    Split,
    Task,
    TrackReadError,
    WordToken,
    validate_sample,
)

SCHEMA_VERSION = "1"
_F32 = np.dtype("<f4")


class CorruptFileError(TrackReadError):
    pass


class FeatureValidationError(ValueError):
    pass


class SchemaVersionError(ValueError):
    pass


class InvalidSampleError(ValueError):
    def __init__(self, sample_id: str, violations: list[str]):
        self.sample_id = sample_id
        self.violations = violations
        super().__init__(f"sample {sample_id!r} is invalid: " + "; ".join(violations))


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.rsplit(".", 1)[0] + ".meta.json")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- feature matrices -------------------------------------------------------


def write_feature_matrix(
    matrix,
    path: str | Path,
    modality: str | None = None,
    frame_rate_hz: float | None = None,
) -> None:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise FeatureValidationError(f"expected a non-empty T x D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FeatureValidationError(f"{path}: matrix contains non-finite values")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(m, dtype=_F32).tobytes())
    _dump_json(
        {
            "rows": int(m.shape[0]),
            "cols": int(m.shape[1]),
            "dtype": "f32le",
            "modality": modality,
            "frame_rate_hz": frame_rate_hz,
        },
        meta_path(path),
    )


def read_feature_meta(path: str | Path) -> dict:
    mpath = meta_path(path)
    try:
        meta = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{mpath}: unreadable sidecar ({exc})") from exc
    if meta.get("dtype") != "f32le":
        raise CorruptFileError(f"{mpath}: unsupported dtype {meta.get('dtype')!r}")
    return meta


def read_feature_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = read_feature_meta(path)
    rows, cols = int(meta["rows"]), int(meta["cols"])
    payload = path.read_bytes()
    if len(payload) != 4 * rows * cols:
        raise CorruptFileError(
            f"{path}: payload has {len(payload)} bytes, sidecar declares {rows}x{cols} f32"
        )
    return np.frombuffer(payload, dtype=_F32).reshape(rows, cols).copy()


def read_track(path: str | Path, duration_s: float | None = None) -> ModalityTrack:
    meta = read_feature_meta(path)
    feats = read_feature_matrix(path)
    rate = float(meta["frame_rate_hz"])
    return ModalityTrack(
        modality=Modality(meta["modality"]),
        features=feats,
        frame_rate_hz=rate,
        duration_s=duration_s if duration_s is not None else feats.shape[0] / rate,
    )


def write_track(track: ModalityTrack, path: str | Path) -> None:
    write_feature_matrix(track.features, path, track.modality.value, track.frame_rate_hz)


# -- transcripts and labels ---------------------------------------------------


def write_transcript(words, path: str | Path) -> None:
    lines = [f"{w.start_s!r}\t{w.end_s!r}\t{w.word}\n" for w in words]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_transcript(path: str | Path) -> tuple[WordToken, ...]:
    words = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise CorruptFileError(f"{path}:{lineno}: expected start_s<TAB>end_s<TAB>word")
        words.append(WordToken(parts[2], float(parts[0]), float(parts[1])))
    return tuple(words)


def write_labels(track: BahLabelTrack, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(np.asarray(track.labels, dtype=np.uint8).tobytes())
    _dump_json(
        {"length": track.n_frames, "dtype": "u8", "frame_rate_hz": track.frame_rate_hz},
        meta_path(path),
    )


def read_labels(path: str | Path) -> BahLabelTrack:
    path = Path(path)
    meta = json.loads(meta_path(path).read_text(encoding="utf-8"))
    payload = path.read_bytes()
    if len(payload) != int(meta["length"]):
        raise CorruptFileError(f"{path}: {len(payload)} bytes, sidecar declares {meta['length']}")
    return BahLabelTrack(np.frombuffer(payload, dtype=np.uint8).copy(), float(meta["frame_rate_hz"]))


# -- manifests ----------------------------------------------------------------


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    samples = []
    for rec in manifest.samples:
        entry = {
            "id": rec.id,
            "split": Split(rec.split).value,
            "duration_s": rec.duration_s,
            "tracks": dict(sorted(rec.tracks.items())),
        }
        if rec.transcript is not None:
            entry["transcript"] = rec.transcript
        if rec.label is not None:
            entry["label"] = list(rec.label)
        if rec.labels_path is not None:
            entry["labels"] = rec.labels_path
        samples.append(entry)
    return {
        "version": manifest.version,
        "task": manifest.task.value,
        "feature_dims": dict(sorted(manifest.feature_dims.items())),
        "samples": samples,
    }


def manifest_from_dict(data: dict) -> DatasetManifest:
    version = str(data.get("version"))
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"manifest schema version {version!r}, expected {SCHEMA_VERSION!r}")
    records = tuple(
        SampleRecord(
            id=s["id"],
            split=Split(s["split"]),
            duration_s=float(s["duration_s"]),
            tracks=dict(s.get("tracks", {})),
            transcript=s.get("transcript"),
            label=tuple(s["label"]) if "label" in s else None,
            labels_path=s.get("labels"),
        )
        for s in data.get("samples", [])
    )
    return DatasetManifest(
        task=Task(data["task"]),
        samples=records,
        feature_dims=dict(data.get("feature_dims", {})),
        version=version,
    )


def write_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    path = Path(root) / "manifest.json"
    _dump_json(manifest_to_dict(manifest), path)
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return manifest_from_dict(json.loads(path.read_text(encoding="utf-8")))


# -- lazy dataset handle ---------------------------------------------------------


class LazyTracks(Mapping):
    """Modality -> track mapping that reads each file on first access."""

    def __init__(self, root: Path, record: SampleRecord):
        self._root = root
        self._record = record
        self._sources = {Modality(k): v for k, v in record.tracks.items()}
        if record.transcript is not None:
            self._sources[Modality.TEXT] = record.transcript
        self._cache: dict = {}

    def __getitem__(self, modality):
        modality = Modality(modality)
        if modality in self._cache:
            return self._cache[modality]
        rel = self._sources[modality]
        path = self._root / rel
        try:
            if modality is Modality.TEXT:
                value = read_transcript(path)
            else:
                value = read_track(path)
        except (OSError, KeyError, ValueError) as exc:
            if isinstance(exc, TrackReadError):
                raise
            raise TrackReadError(f"{rel}: {exc}") from exc
        self._cache[modality] = value
        return value

    def __iter__(self):
        return iter(self._sources)

    def __len__(self):
        return len(self._sources)


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest

    @property
    def task(self) -> Task:
        return self.manifest.task

    def __len__(self) -> int:
        return len(self.manifest.samples)

    def records(self, split: Split | str | None = None) -> list[SampleRecord]:
        if split is None:
            return list(self.manifest.samples)
        split = Split(split)
        return [r for r in self.manifest.samples if r.split is split]

    def build(self, record: SampleRecord) -> Sample:
        """Construct a sample without validating it. Label files are read eagerly."""
        if self.task is Task.EMI:
            if record.label is None:
                raise TrackReadError(f"{record.id}: manifest entry has no EMI label")
            label = EmiLabel(tuple(float(v) for v in record.label))
        else:
            if record.labels_path is None:
                raise TrackReadError(f"{record.id}: manifest entry has no labels file")
            try:
                label = read_labels(self.root / record.labels_path)
            except (OSError, KeyError, ValueError) as exc:
                raise TrackReadError(f"{record.labels_path}: {exc}") from exc
        return Sample(
            id=record.id,
            split=record.split,
            task=self.task,
            tracks=LazyTracks(self.root, record),
            label=label,
            duration_s=record.duration_s,
        )

    def check(self, record: SampleRecord) -> tuple[Sample | None, list[str]]:
        try:
            sample = self.build(record)
        except OSError as exc:
            return None, [f"io: labels: {exc}"]
        return sample, validate_sample(sample)

    def validate(self) -> dict[str, list[str]]:
        """Violations for every sample id that has any."""
        report = {}
        for record in self.manifest.samples:
            _, problems = self.check(record)
            if problems:
                report[record.id] = problems
        return report

    def samples(self, split: Split | str | None = None) -> Iterator[Sample]:
        for record in self.records(split):
            sample, problems = self.check(record)
            if problems:
                raise InvalidSampleError(record.id, problems)
            yield sample

    def __iter__(self) -> Iterator[Sample]:
        return self.samples()


def load_dataset(manifest_path: str | Path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return Dataset(root=path.parent, manifest=read_manifest(path))


# -- synthetic planted-signal packs ---------------------------------------------

_FILLER = tuple(f"word{i}" for i in range(40))
_HESITANT = ("um", "uh", "well", "maybe", "hmm", "perhaps", "i-guess", "not-sure")
_STEADY = ("yes", "sure", "definitely", "always", "clearly", "right", "exactly", "okay")


@dataclass(frozen=True)
class SyntheticSpec:
    task: Task
    n_samples: Mapping[str, int] = field(default_factory=lambda: {"train": 64, "val": 32})
    duration_s: tuple[float, float] = (4.0, 10.0)
    feature_dims: Mapping[str, int] = field(
        default_factory=lambda: {"audio": 8, "vision": 8, "vad": 3}
    )
    frame_rates: Mapping[str, float] = field(
        default_factory=lambda: {"audio": 10.0, "vision": 6.0, "vad": 5.0}
    )
    label_rate_hz: float = 5.0
    signal_strength: float = 1.0
    seed: int = 0
    noise: Mapping[str, float] = field(default_factory=dict)
    words_per_s: float = 2.0
    with_text: bool = True
    # e.g. {"vision": "audio"}: vision becomes a byte copy of audio
    duplicate: Mapping[str, str] = field(default_factory=dict)
    latent_period_s: tuple[float, float] = (24.0, 48.0)

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if not self.n_samples or any(n < 1 for n in self.n_samples.values()):
            raise ValueError("every split must request at least one sample")
        if any(d < 1 for d in self.feature_dims.values()):
            raise ValueError("feature dims must be >= 1")
        if not (0.0 <= self.signal_strength <= 1.0):
            raise ValueError("signal_strength must lie in [0, 1]")
        lo, hi = self.duration_s
        if not (0 < lo <= hi):
            raise ValueError("duration range must satisfy 0 < min <= max")
        for target, source in self.duplicate.items():
            if source not in self.feature_dims or target not in self.feature_dims:
                raise ValueError(f"cannot duplicate {source!r} into {target!r}")

    def noise_for(self, modality: str) -> float:
        return float(self.noise.get(modality, 0.2))


def _frames(duration_s: float, rate: float) -> int:
    return max(1, int(round(duration_s * rate)))


class _SlowLatent:
    """Sum of two low-frequency sinusoids with random periods and phases."""

    def __init__(self, rng, period_range):
        self.periods = rng.uniform(*period_range, size=2)
        self.phases = rng.uniform(0, 2 * math.pi, size=2)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        waves = np.sin(2 * math.pi * t / self.periods + self.phases)
        return waves.sum(axis=-1) / math.sqrt(2)


def _emi_words(rng, duration_s: float, z: np.ndarray, words_per_s: float):
    n = max(1, int(duration_s * words_per_s))
    slot = duration_s / n
    words = []
    probs = z / z.sum()
    emo_tokens = [e.lower().replace(" ", "-") for e in EMOTIONS]
    for i in range(n):
        if rng.random() < 0.5:
            word = emo_tokens[int(rng.choice(6, p=probs))]
        else:
            word = _FILLER[int(rng.integers(len(_FILLER)))]
        start = i * slot + rng.uniform(0, 0.2 * slot)
        end = start + 0.6 * slot
        words.append(WordToken(word, round(start, 4), round(min(end, duration_s), 4)))
    return words


def _bah_words(rng, duration_s: float, state_at, words_per_s: float):
    n = max(1, int(duration_s * words_per_s))
    slot = duration_s / n
    words = []
    for i in range(n):
        start = round(i * slot + rng.uniform(0, 0.2 * slot), 4)
        end = round(min(start + 0.6 * slot, duration_s), 4)
        vocab = _HESITANT if state_at(0.5 * (start + end)) else _STEADY
        if rng.random() < 0.3:
            vocab = _FILLER
        words.append(WordToken(vocab[int(rng.integers(len(vocab)))], start, end))
    return words


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Write a deterministic planted-signal pack and return its manifest.

    EMI: a per-sample latent ``z`` in [0.05, 0.95]^6 is planted as a constant offset
    along fixed random directions in audio and vision, as smooth VAD channels, and as
    emotion-word frequencies in the transcript. Intensities are
    ``clip(s * z + (1 - s) * u, 0, 1)`` with ``u`` independent uniform noise.

    BAH: a slow latent curve is planted per frame; frame labels threshold
    ``s * latent + (1 - s) * independent_latent`` at zero.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    dims = dict(spec.feature_dims)
    rates = {m: float(spec.frame_rates[m]) for m in dims}
    for target, source in spec.duplicate.items():
        rates[target] = rates[source]
        dims[target] = dims[source]
    seq_mods = [m for m in ("audio", "vision", "vad") if m in dims]
    n_latent = 6 if spec.task is Task.EMI else 1
    directions = {}
    for m in seq_mods:
        d = rng.standard_normal((n_latent, dims[m]))
        directions[m] = d / np.linalg.norm(d, axis=1, keepdims=True)

    records = []
    for split in ("train", "val", "test"):
        for idx in range(spec.n_samples.get(split, 0)):
            sid = f"{split}_{idx:04d}"
            sdir = out / sid
            sdir.mkdir(exist_ok=True)
            duration = round(float(rng.uniform(*spec.duration_s)), 3)
            tracks = {}
            label = labels_path = transcript = None

            if spec.task is Task.EMI:
                z = rng.uniform(0.05, 0.95, size=6)
                u = rng.uniform(0.0, 1.0, size=6)
                s = spec.signal_strength
                label = tuple(float(v) for v in np.clip(s * z + (1 - s) * u, 0.0, 1.0))
                def planted(m, n):
                    return np.broadcast_to(2.0 * (z - 0.5) @ directions[m], (n, dims[m]))
            else:
                label_frames = _frames(duration, spec.label_rate_hz)
                latent_at = _SlowLatent(rng, spec.latent_period_s)
                distractor = _SlowLatent(rng, spec.latent_period_s)
                t_label = (np.arange(label_frames) + 0.5) / spec.label_rate_hz
                s = spec.signal_strength
                mixed = s * latent_at(t_label) + (1 - s) * distractor(t_label)
                frame_labels = (mixed > 0).astype(np.uint8)
                label_track = BahLabelTrack(frame_labels, spec.label_rate_hz)
                labels_path = f"{sid}/labels.u8"
                write_labels(label_track, out / labels_path)

                def planted(m, n):
                    t = (np.arange(n) + 0.5) / rates[m]
                    level = np.tanh(3.0 * latent_at(t))
                    return level[:, None] * directions[m][0][None, :] * 1.5

            for m in seq_mods:
                if m in spec.duplicate:
                    continue
                n = _frames(duration, rates[m])
                if m == "vad":
                    base = np.tanh(planted(m, n))
                    t = np.arange(n) / rates[m]
                    base = base + 0.05 * np.sin(2 * math.pi * t / 7.0)[:, None]
                    feats = base + spec.noise_for(m) * 0.25 * rng.standard_normal((n, dims[m]))
                else:
                    feats = planted(m, n) + spec.noise_for(m) * rng.standard_normal((n, dims[m]))
                tracks[m] = feats.astype(np.float32)
            for target, source in spec.duplicate.items():
                tracks[target] = tracks[source]

            rel_tracks = {}
            for m, feats in tracks.items():
                rel = f"{sid}/{m}.f32"
                write_feature_matrix(feats, out / rel, m, rates[m])
                rel_tracks[m] = rel

            if spec.with_text:
                if spec.task is Task.EMI:
                    words = _emi_words(rng, duration, z, spec.words_per_s)
                else:
                    words = _bah_words(
                        rng, duration, lambda t: bool(latent_at(t) > 0),
                        spec.words_per_s,
                    )
                transcript = f"{sid}/transcript.tsv"
                write_transcript(words, out / transcript)

            records.append(
                SampleRecord(
                    id=sid,
                    split=Split(split),
                    duration_s=duration,
                    tracks=rel_tracks,
                    transcript=transcript,
                    label=label,
                    labels_path=labels_path,
                )
            )

    manifest = DatasetManifest(
        task=spec.task,
        samples=tuple(records),
        feature_dims={m: dims[m] for m in sorted(dims)},
        version=SCHEMA_VERSION,
    )
    write_manifest(manifest, out)
    return manifest
