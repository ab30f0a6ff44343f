"""Fixed-length EMI inputs and centered per-modality BAH windows.

Frame ``i`` of a track sampled at ``r`` Hz covers ``[i / r, (i + 1) / r)``. A centered
window of ``w`` seconds around time ``c`` holds ``K = round(w * r)`` rows: the frame
containing ``c`` sits at row ``K // 2`` and rows falling outside the track are zero
with mask 0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import Modality, ModalityTrack, Sample, Task, WordToken

# instrumentation: how often batch assembly went through each entry point
CALL_COUNTS: Counter = Counter()

_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class ChunkView:
    values: np.ndarray  # K x D, padding rows are exactly zero
    mask: np.ndarray  # K, uint8
    center_index: int

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChunkView):
            return NotImplemented
        return (
            self.center_index == other.center_index
            and self.values.shape == other.values.shape
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.mask, other.mask)
            # byte comparison so -0.0 and 0.0 rows are told apart
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class WindowConfig:
    audio_window_s: float = 12.0
    text_window_s: float = 20.0
    vision_window_s: float = 20.0
    vision_frames: int = 400
    text_max_tokens: int = 128
    marker_token: str = "[NOW]"

    def __post_init__(self):
        if min(self.audio_window_s, self.text_window_s, self.vision_window_s) <= 0:
            raise ValueError("window lengths must be positive")
        if self.vision_frames < 2:
            raise ValueError("vision_frames must be at least 2")
        if self.text_max_tokens < 1:
            raise ValueError("text_max_tokens must be at least 1")


def n_window_rows(window_s: float, frame_rate_hz: float) -> int:
    return max(1, int(round(window_s * frame_rate_hz)))


def frame_at(time_s: float, frame_rate_hz: float) -> int:
    return int(math.floor(time_s * frame_rate_hz + _EPS))


def centered_window(track: ModalityTrack, center_time_s: float, window_s: float) -> ChunkView:
    if center_time_s < 0:
        raise ValueError(f"center_time_s must be non-negative, got {center_time_s}")
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    feats = track.features
    n = feats.shape[0]
    k = n_window_rows(window_s, track.frame_rate_hz)
    half = k // 2
    center_frame = min(frame_at(center_time_s, track.frame_rate_hz), n - 1)
    first = center_frame - half
    lo, hi = max(first, 0), min(first + k, n)
    values = np.zeros((k, feats.shape[1]), dtype=feats.dtype)
    mask = np.zeros(k, dtype=np.uint8)
    if hi > lo:
        values[lo - first : hi - first] = feats[lo:hi]
        mask[lo - first : hi - first] = 1
    return ChunkView(values, mask, half)


def equidistant_indices(n_available: int, n_target: int) -> list[int]:
    if n_available < 1 or n_target < 1:
        raise ValueError("n_available and n_target must both be >= 1")
    if n_target == 1:
        return [(n_available - 1) // 2]
    span = n_available - 1
    # round half up; exact integer arithmetic avoids float drift
    return [(2 * i * span + (n_target - 1)) // (2 * (n_target - 1)) for i in range(n_target)]


def subsample_chunk(chunk: ChunkView, n_target: int) -> ChunkView:
    idx = equidistant_indices(chunk.values.shape[0], n_target)
    arr = np.asarray(idx)
    center = int(np.argmin(np.abs(arr - chunk.center_index)))
    return ChunkView(chunk.values[arr], chunk.mask[arr], center)


def text_window(
    words: Sequence[WordToken],
    center_time_s: float,
    window_s: float,
    marker_token: str = "[NOW]",
) -> list[str]:
    lo = center_time_s - window_s / 2
    hi = center_time_s + window_s / 2
    before, after = [], []
    for w in words:
        if not (lo <= w.midpoint_s < hi):
            continue
        (before if w.start_s <= center_time_s else after).append(w.word)
    return before + [marker_token] + after


def prefix_chunk(track: ModalityTrack, n_rows: int) -> ChunkView:
    feats = track.features
    keep = min(n_rows, feats.shape[0])
    values = np.zeros((n_rows, feats.shape[1]), dtype=feats.dtype)
    values[:keep] = feats[:keep]
    mask = np.zeros(n_rows, dtype=np.uint8)
    mask[:keep] = 1
    return ChunkView(values, mask, 0)


def emi_fixed_inputs(sample: Sample, config: WindowConfig) -> dict[Modality, object]:
    """Fixed-shape EMI inputs: keys are audio, vad, vision, text.

    A missing modality maps to ``None`` so callers can tell absence from padding.
    Text is the token prefix (no marker); sequence tracks keep their temporal prefix.
    """
    CALL_COUNTS["emi_fixed_inputs"] += 1
    out: dict[Modality, object] = {}
    for modality in (Modality.AUDIO, Modality.VAD):
        track = sample.tracks.get(modality)
        out[modality] = (
            None
            if track is None
            else prefix_chunk(track, n_window_rows(config.audio_window_s, track.frame_rate_hz))
        )
    vision = sample.tracks.get(Modality.VISION)
    out[Modality.VISION] = None if vision is None else prefix_chunk(vision, config.vision_frames)
    words = sample.words()
    out[Modality.TEXT] = None if words is None else [w.word for w in words[: config.text_max_tokens]]
    return out


@dataclass(frozen=True)
class FrameEntry:
    """Descriptor for one sequence-to-point prediction; ``materialize`` builds the chunks."""

    frame_index: int
    center_time_s: float
    config: WindowConfig

    def materialize(self, sample: Sample) -> dict[Modality, object]:
        cfg = self.config
        out: dict[Modality, object] = {}
        for modality in (Modality.AUDIO, Modality.VAD):
            track = sample.tracks.get(modality)
            out[modality] = (
                None if track is None else centered_window(track, self.center_time_s, cfg.audio_window_s)
            )
        vision = sample.tracks.get(Modality.VISION)
        out[Modality.VISION] = (
            None
            if vision is None
            else subsample_chunk(
                centered_window(vision, self.center_time_s, cfg.vision_window_s), cfg.vision_frames
            )
        )
        words = sample.words()
        out[Modality.TEXT] = (
            None
            if words is None
            else text_window(words, self.center_time_s, cfg.text_window_s, cfg.marker_token)
        )
        return out


def bah_frame_plan(sample: Sample, config: WindowConfig, stride_frames: int = 1) -> list[FrameEntry]:
    if sample.task is not Task.BAH:
        raise ValueError("bah_frame_plan needs a BAH sample")
    if stride_frames < 1:
        raise ValueError("stride_frames must be >= 1")
    CALL_COUNTS["bah_frame_plan"] += 1
    rate = sample.label.frame_rate_hz
    return [
        FrameEntry(f, f / rate, config) for f in range(0, sample.label.n_frames, stride_frames)
    ]
