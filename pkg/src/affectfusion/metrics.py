"""Challenge metrics, prediction-track smoothing and report/prediction file I/O."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import EMOTIONS


@dataclass(frozen=True)
class EmiEvalReport:
    rho_per_emotion: tuple[float, ...]
    rho_mean: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "rho_per_emotion": dict(zip(EMOTIONS, self.rho_per_emotion)),
            "rho_mean": self.rho_mean,
            "n_samples": self.n_samples,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["emotion", "rho"])
        for name, rho in zip(EMOTIONS, self.rho_per_emotion):
            w.writerow([name, repr(rho)])
        w.writerow(["mean", repr(self.rho_mean)])
        return buf.getvalue()


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int
    support: int
    f1: float


@dataclass(frozen=True)
class BahEvalReport:
    f1_0: float
    f1_1: float
    f1_weighted: float
    n_0: int
    n_1: int
    class_0: ClassCounts
    class_1: ClassCounts

    def to_dict(self) -> dict:
        return {
            "f1_per_class": {"0": self.f1_0, "1": self.f1_1},
            "f1_weighted": self.f1_weighted,
            "support": {"0": self.n_0, "1": self.n_1},
            "confusion": {"0": asdict(self.class_0), "1": asdict(self.class_1)},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "f1", "support", "tp", "fp", "fn"])
        for k, c in (("0", self.class_0), ("1", self.class_1)):
            w.writerow([k, repr(c.f1), c.support, c.tp, c.fp, c.fn])
        w.writerow(["weighted", repr(self.f1_weighted), self.n_0 + self.n_1, "", "", ""])
        return buf.getvalue()


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; 0.0 when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two equal-length 1-D sequences, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        return 0.0
    r = float(np.dot(dx, dy)) / (math.sqrt(vx) * math.sqrt(vy))
    return max(-1.0, min(1.0, r))


def emi_score(preds, labels) -> EmiEvalReport:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 2 or preds.shape[1] != len(EMOTIONS):
        raise ValueError(f"expected matching N x 6 arrays, got {preds.shape} and {labels.shape}")
    if preds.shape[0] < 2:
        raise ValueError("EMI scoring needs at least two samples")
    rhos = tuple(pearson(preds[:, k], labels[:, k]) for k in range(len(EMOTIONS)))
    return EmiEvalReport(rhos, sum(rhos) / len(rhos), int(preds.shape[0]))


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D sequence")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def _class_counts(preds: np.ndarray, labels: np.ndarray, cls: int) -> ClassCounts:
    p = preds == cls
    t = labels == cls
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    denom = 2 * tp + fp + fn
    return ClassCounts(tp, fp, fn, int(t.sum()), (2 * tp / denom) if denom else 0.0)


def bah_score(preds, labels) -> BahEvalReport:
    """Support-weighted frame F1 over both classes (support taken from the labels)."""
    preds = _binary(preds, "preds")
    labels = _binary(labels, "labels")
    if preds.shape != labels.shape or preds.shape[0] < 1:
        raise ValueError(f"need equal, non-empty tracks, got {preds.shape} and {labels.shape}")
    c0 = _class_counts(preds, labels, 0)
    c1 = _class_counts(preds, labels, 1)
    n = c0.support + c1.support
    weighted = (c0.support * c0.f1 + c1.support * c1.f1) / n
    return BahEvalReport(c0.f1, c1.f1, weighted, c0.support, c1.support, c0, c1)


def threshold(probabilities, tau: float = 0.5) -> np.ndarray:
    return (np.asarray(probabilities, dtype=np.float64) >= tau).astype(np.uint8)


def _median_pass(track: np.ndarray, half: int) -> np.ndarray:
    n = track.shape[0]
    csum = np.concatenate([[0], np.cumsum(track)])
    idx = np.arange(n)
    reach = np.minimum(np.minimum(idx, n - 1 - idx), half)
    ones = csum[idx + reach + 1] - csum[idx - reach]
    return (2 * ones > 2 * reach + 1).astype(track.dtype)


def median_smooth(track, width: int) -> np.ndarray:
    """Majority filter over a centered odd window, repeated until nothing changes.

    Near the ends the window shrinks symmetrically (so it stays odd). A single
    pass is not idempotent on alternating patterns, so the filter is iterated to its
    root signal; the first pass already removes isolated frames.
    """
    if width < 1 or width % 2 == 0:
        raise ValueError(f"median width must be a positive odd integer, got {width}")
    arr = _binary(track, "track").astype(np.uint8)
    if width == 1 or arr.shape[0] == 0:
        return arr.copy()
    half = width // 2
    for _ in range(arr.shape[0] + 1):
        nxt = _median_pass(arr, half)
        if np.array_equal(nxt, arr):
            return nxt
        arr = nxt
    raise RuntimeError("median filter did not converge")


def _runs(arr: np.ndarray) -> list[tuple[int, int, int]]:
    """(value, start, length) for each maximal run."""
    runs = []
    n = arr.shape[0]
    start = 0
    for i in range(1, n + 1):
        if i == n or arr[i] != arr[start]:
            runs.append((int(arr[start]), start, i - start))
            start = i
    return runs


def min_duration_filter(track, min_len: int) -> np.ndarray:
    """Drop positive runs shorter than ``min_len``, then fill short interior gaps."""
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    out = _binary(track, "track").astype(np.uint8)
    if min_len == 1 or out.shape[0] == 0:
        return out.copy()
    out = out.copy()
    for value, start, length in _runs(out):
        if value == 1 and length < min_len:
            out[start : start + length] = 0
    runs = _runs(out)
    for k, (value, start, length) in enumerate(runs):
        if value == 0 and 0 < k < len(runs) - 1 and length < min_len:
            out[start : start + length] = 1
    return out


def parse_smoothing(spec: str | None):
    """``median:W`` or ``minrun:L`` -> callable on binary tracks (None -> identity)."""
    if not spec:
        return None
    kind, _, arg = spec.partition(":")
    try:
        value = int(arg)
    except ValueError:
        raise ValueError(f"bad smoothing spec {spec!r}; use median:W or minrun:L") from None
    if kind == "median":
        if value < 1 or value % 2 == 0:
            raise ValueError("median width must be a positive odd integer")
        return lambda t: median_smooth(t, value)
    if kind == "minrun":
        if value < 1:
            raise ValueError("minrun length must be >= 1")
        return lambda t: min_duration_filter(t, value)
    raise ValueError(f"unknown smoothing {kind!r}; use median:W or minrun:L")


# -- files ----------------------------------------------------------------------


def _data_lines(path: str | Path):
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        yield [p.strip() for p in line.split(",")]


def _is_header(fields: list[str]) -> bool:
    try:
        float(fields[-1])
    except ValueError:
        return True
    return False


def write_bah_predictions(frame_indices, probabilities, path: str | Path) -> None:
    lines = [f"{int(f)},{float(p)!r}\n" for f, p in zip(frame_indices, probabilities)]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_bah_track(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """``frame_index,value`` lines (prediction probabilities or 0/1 labels)."""
    frames, values = [], []
    for fields in _data_lines(path):
        if _is_header(fields):
            continue
        if len(fields) != 2:
            raise ValueError(f"{path}: expected frame_index,value lines")
        frames.append(int(fields[0]))
        values.append(float(fields[1]))
    return np.asarray(frames, dtype=np.int64), np.asarray(values, dtype=np.float64)


def write_emi_predictions(sample_ids, intensities, path: str | Path) -> None:
    lines = []
    for sid, row in zip(sample_ids, np.asarray(intensities, dtype=np.float64)):
        lines.append(",".join([sid] + [repr(float(v)) for v in row]) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_emi_file(path: str | Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    for fields in _data_lines(path):
        if _is_header(fields):
            continue
        if len(fields) != 1 + len(EMOTIONS):
            raise ValueError(f"{path}: expected sample_id plus 6 intensities per line")
        ids.append(fields[0])
        rows.append([float(v) for v in fields[1:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(-1, len(EMOTIONS))


def write_report(report, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / f"{stem}.json"
    cpath = out / f"{stem}.csv"
    jpath.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    cpath.write_text(report.to_csv(), encoding="utf-8")
    return jpath, cpath
