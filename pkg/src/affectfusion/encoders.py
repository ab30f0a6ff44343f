"""Encoder adapters standing in for the pretrained text/audio/vision models."""

from __future__ import annotations

import hashlib
import math
import subprocess
import tempfile
from dataclasses import replace
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .datamodel import Modality, ModalityTrack, Sample

MARKER_TOKEN = "[NOW]"
# weight of the order-aware component relative to the bag-of-words component
_POSITION_WEIGHT = 0.5
_MAX_OFFSET = 8


class TextEmbedder(Protocol):
    dim: int

    def embed(self, tokens: Sequence[str]) -> np.ndarray: ...


class SequenceFeatureSource(Protocol):
    modality: Modality
    dim: int

    def load(self, sample: Sample) -> ModalityTrack: ...


@lru_cache(maxsize=65536)
def _hashed_vector(key: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x1f{key}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


def _token_offsets(tokens: Sequence[str], marker: str) -> list[int]:
    try:
        anchor = tokens.index(marker)
    except ValueError:
        anchor = 0
    return [max(-_MAX_OFFSET, min(_MAX_OFFSET, i - anchor)) for i in range(len(tokens))]


def stub_text_embed(
    tokens: Sequence[str], dim: int, seed: int = 0, marker_token: str = MARKER_TOKEN
) -> np.ndarray:
    """Deterministic unit-norm embedding of a token sequence.

    Each token contributes a hashed word vector plus a smaller hashed vector keyed on
    its offset from the marker (or from the first token when there is no marker), so
    reordering words or moving the marker changes the result.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    tokens = list(tokens)
    if not tokens:
        return _unit(_hashed_vector("\x00<empty>", dim, seed).copy())
    acc = np.zeros(dim)
    for token, offset in zip(tokens, _token_offsets(tokens, marker_token)):
        key = "reserved:marker" if token == marker_token else f"w:{token}"
        acc += _hashed_vector(key, dim, seed)
        acc += _POSITION_WEIGHT * _hashed_vector(f"p:{offset}:{token}", dim, seed)
    return _unit(acc)


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not math.isfinite(norm):
        out = np.zeros_like(vec)
        out[0] = 1.0
        return out
    return vec / norm


class StubTextEmbedder:
    def __init__(self, dim: int = 32, seed: int = 0, marker_token: str = MARKER_TOKEN):
        self.dim = dim
        self.seed = seed
        self.marker_token = marker_token
        self._cache: dict[tuple, np.ndarray] = {}

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        vec = self._cache.get(key)
        if vec is None:
            vec = stub_text_embed(key, self.dim, self.seed, self.marker_token)
            vec.setflags(write=False)
            if len(self._cache) < 200_000:
                self._cache[key] = vec
        return vec


class ExternalTextEmbedder:
    """Runs ``<command> --in <window-file> --out <vector.f32>`` once per window.

    The window file holds one token per line; the output is a feature-pack ``.f32``
    file with a single row of ``dim`` values.
    """

    def __init__(self, command: Sequence[str], dim: int):
        self.command = list(command)
        self.dim = dim

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        from .featurestore import read_feature_matrix

        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "window.txt"
            dst = Path(tmp) / "vector.f32"
            src.write_text("".join(t + "\n" for t in tokens), encoding="utf-8")
            proc = subprocess.run(
                [*self.command, "--in", str(src), "--out", str(dst)],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise RuntimeError(
                    f"adapter {self.command[0]!r} failed with exit code {proc.returncode}: "
                    f"{proc.stderr.strip()}"
                )
            vec = read_feature_matrix(dst).reshape(-1).astype(np.float64)
        if vec.shape[0] != self.dim:
            raise ValueError(f"adapter returned {vec.shape[0]} values, expected {self.dim}")
        return vec


def read_window_file(path: str | Path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


class PrecomputedSource:
    """Passthrough for features that were extracted ahead of time."""

    def __init__(self, modality: Modality, dim: int):
        self.modality = Modality(modality)
        self.dim = dim

    def load(self, sample: Sample) -> ModalityTrack:
        track = sample.tracks[self.modality]
        if track.dim != self.dim:
            raise ValueError(f"{sample.id}: {self.modality.value} has {track.dim} dims, expected {self.dim}")
        return track


def audio_with_vad(audio: ModalityTrack, vad: ModalityTrack) -> ModalityTrack:
    """Concatenate VAD columns onto the audio frame grid.

    Each audio frame takes the VAD frame whose center is nearest its own center.
    """
    if vad.features.shape[1] != 3:
        raise ValueError(f"VAD track must have 3 columns, got {vad.features.shape[1]}")
    tol = max(audio.frame_period_s, vad.frame_period_s) + 1e-9
    if abs(audio.duration_s - vad.duration_s) > tol:
        raise ValueError(
            f"audio ({audio.duration_s:.3f} s) and VAD ({vad.duration_s:.3f} s) durations disagree"
        )
    n_audio, n_vad = audio.features.shape[0], vad.features.shape[0]
    centers = (np.arange(n_audio) + 0.5) / audio.frame_rate_hz
    idx = np.minimum(np.floor(centers * vad.frame_rate_hz).astype(np.int64), n_vad - 1)
    vad_rows = vad.features[idx].astype(audio.features.dtype, copy=False)
    merged = np.concatenate([audio.features, vad_rows], axis=1)
    return ModalityTrack(Modality.AUDIO, merged, audio.frame_rate_hz, audio.duration_s)


def merge_vad(sample: Sample) -> Sample:
    """Return a view of ``sample`` whose audio track already carries the VAD columns."""
    tracks = sample.tracks
    if Modality.VAD not in tracks or Modality.AUDIO not in tracks:
        return sample
    merged = dict(tracks)
    merged[Modality.AUDIO] = audio_with_vad(tracks[Modality.AUDIO], tracks[Modality.VAD])
    del merged[Modality.VAD]
    return replace(sample, tracks=merged)
