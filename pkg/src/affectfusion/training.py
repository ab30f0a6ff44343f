"""Training loops for EMI regression and BAH frame classification."""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .datamodel import Modality, Sample, Split, Task
from .encoders import StubTextEmbedder, TextEmbedder, merge_vad
from .featurestore import Dataset
from .losses import bce_logit_loss, mse_loss  # noqa: F401  (public re-export)
from .metrics import bah_score, emi_score, threshold
from .model import (
    SEQUENCE_MODALITIES,
    Batch,
    FusionModel,
    ModelDims,
    canonical_modalities,
    init_parameters,
)
from .mtl import MtlModel, TaskUncertainty
from .windowing import WindowConfig, bah_frame_plan, emi_fixed_inputs

DEFAULT_LR = {Task.EMI: 1e-4, Task.BAH: 7.5e-6}
DEFAULT_EPOCHS = {Task.EMI: 30, Task.BAH: 10}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(frozen=True)
class TrainConfig:
    task: Task
    modalities: tuple[str, ...] = ("audio", "vision", "text")
    lr0: float | None = None
    epochs: int | None = None
    batch_size: int = 32
    seed: int = 0
    patience: int = 5
    stride_frames: int = 1
    frames_per_video: int = 16
    mtl: bool = False
    mtl_init: Mapping[str, float] | None = None
    window: WindowConfig = field(default_factory=WindowConfig)
    hidden_dim: int = 128
    fusion_dim: int = 256
    text_dim: int = 32
    eval_batch_size: int = 256

    def __post_init__(self):
        task = Task(self.task)
        object.__setattr__(self, "task", task)
        mods = canonical_modalities(self.modalities)
        object.__setattr__(self, "modalities", tuple(m.value for m in mods))
        if self.lr0 is None:
            object.__setattr__(self, "lr0", DEFAULT_LR[task])
        if self.epochs is None:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[task])
        if isinstance(self.window, Mapping):
            object.__setattr__(self, "window", WindowConfig(**self.window))
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.patience < 0 or self.stride_frames < 1 or self.frames_per_video < 1:
            raise ValueError("patience >= 0, stride_frames >= 1 and frames_per_video >= 1 required")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["task"] = self.task.value
        data["modalities"] = list(self.modalities)
        data["mtl_init"] = dict(self.mtl_init) if self.mtl_init else None
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        data = dict(data)
        if "modalities" in data and isinstance(data["modalities"], str):
            data["modalities"] = tuple(p.strip() for p in data["modalities"].split(",") if p.strip())
        if "modalities" in data:
            data["modalities"] = tuple(data["modalities"])
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    lr: float
    weights: dict[Modality, float] | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    initial_weights: dict[Modality, float] | None = None
    modalities: tuple[Modality, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best_val_metric(self) -> float:
        return self.records[self.best_epoch - 1].val_metric

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        weighted = self.initial_weights is not None
        header = ["epoch", "train_loss", "val_metric", "lr"]
        if weighted:
            header += [f"w_{m.value}" for m in self.modalities]
        w.writerow(header)
        for r in self.records:
            row = [r.epoch, repr(r.train_loss), repr(r.val_metric), repr(r.lr)]
            if weighted:
                row += [repr(r.weights[m]) for m in self.modalities]
            w.writerow(row)
        return buf.getvalue()


class EarlyStopping:
    """Tracks the best epoch; ``update`` returns True once training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float = -math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale > self.patience


# -- batch assembly ---------------------------------------------------------------


@dataclass
class Item:
    sample_id: str
    sequences: dict[Modality, tuple[np.ndarray, np.ndarray] | None]
    text: np.ndarray | None
    target: np.ndarray


def model_input_dims(dataset: Dataset, text_dim: int) -> dict[Modality, int]:
    fd = dataset.manifest.feature_dims
    dims = {}
    audio = fd.get("audio")
    if audio:
        dims[Modality.AUDIO] = int(audio) + (int(fd["vad"]) if "vad" in fd else 0)
    if fd.get("vision"):
        dims[Modality.VISION] = int(fd["vision"])
    dims[Modality.TEXT] = text_dim
    return dims


class InputAssembler:
    """Turns samples (EMI) or frame plan entries (BAH) into collated ``Batch``es."""

    def __init__(
        self,
        task: Task,
        modalities: Sequence[Modality],
        window: WindowConfig,
        embedder: TextEmbedder,
        input_dims: Mapping[Modality, int],
    ):
        self.task = task
        self.modalities = canonical_modalities(modalities)
        self.window = window
        self.embedder = embedder
        self.input_dims = dict(input_dims)
        self._prepared: dict[str, Sample] = {}

    def prepare(self, sample: Sample) -> Sample:
        cached = self._prepared.get(sample.id)
        if cached is None:
            cached = merge_vad(sample)
            cached = replace(cached, tracks={m: cached.tracks[m] for m in cached.tracks})
            self._prepared[sample.id] = cached
        return cached

    def _item(self, sample: Sample, inputs: Mapping, target) -> Item:
        seqs = {}
        for m in self.modalities:
            if m in SEQUENCE_MODALITIES:
                chunk = inputs.get(m)
                seqs[m] = None if chunk is None else (chunk.values, chunk.mask)
        text = None
        if Modality.TEXT in self.modalities and inputs.get(Modality.TEXT) is not None:
            text = np.asarray(self.embedder.embed(inputs[Modality.TEXT]), dtype=np.float32)
        return Item(sample.id, seqs, text, np.asarray(target, dtype=np.float32))

    def emi_item(self, sample: Sample) -> Item:
        prepared = self.prepare(sample)
        inputs = emi_fixed_inputs(prepared, self.window)
        return self._item(sample, inputs, sample.label.as_array())

    def bah_item(self, sample: Sample, entry) -> Item:
        prepared = self.prepare(sample)
        inputs = entry.materialize(prepared)
        return self._item(sample, inputs, float(sample.label.labels[entry.frame_index]))

    def collate(self, items: Sequence[Item], dtype=torch.float32) -> Batch:
        n = len(items)
        batch = Batch(sample_ids=[it.sample_id for it in items])
        for m in self.modalities:
            if m in SEQUENCE_MODALITIES:
                chunks = [it.sequences.get(m) for it in items]
                dim = self.input_dims[m]
                k = max((c[0].shape[0] for c in chunks if c is not None), default=1)
                values = np.zeros((n, k, dim), dtype=np.float32)
                mask = np.zeros((n, k), dtype=np.uint8)
                flags = np.zeros(n, dtype=np.float32)
                for i, c in enumerate(chunks):
                    if c is None:
                        continue
                    vals, msk = c
                    if vals.shape[1] != dim:
                        raise ValueError(
                            f"{items[i].sample_id}: {m.value} chunk has {vals.shape[1]} dims, expected {dim}"
                        )
                    values[i, : vals.shape[0]] = vals
                    mask[i, : msk.shape[0]] = msk
                    flags[i] = 1.0
                batch.sequences[m] = (torch.from_numpy(values).to(dtype), torch.from_numpy(mask))
                batch.present[m] = torch.from_numpy(flags).to(dtype)
            else:
                dim = self.input_dims[m]
                text = np.zeros((n, dim), dtype=np.float32)
                flags = np.zeros(n, dtype=np.float32)
                for i, it in enumerate(items):
                    if it.text is not None:
                        text[i] = it.text
                        flags[i] = 1.0
                batch.text = torch.from_numpy(text).to(dtype)
                batch.present[m] = torch.from_numpy(flags).to(dtype)
        targets = np.stack([it.target for it in items])
        batch.targets = torch.from_numpy(targets).to(dtype)
        return batch


# -- prediction and evaluation ----------------------------------------------------------


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


@torch.no_grad()
def predict_items(model, assembler: InputAssembler, items: Sequence[Item], batch_size: int) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    outs = []
    for part in _chunks(list(items), batch_size):
        outs.append(model.predict(assembler.collate(part, dtype)).detach().cpu().numpy())
    if not outs:
        return np.zeros((0,))
    return np.concatenate(outs, axis=0).astype(np.float64)


def emi_items(assembler: InputAssembler, samples: Sequence[Sample]) -> list[Item]:
    return [assembler.emi_item(s) for s in samples]


def bah_items(assembler: InputAssembler, sample: Sample, stride: int) -> tuple[list[int], list[Item]]:
    plan = bah_frame_plan(sample, assembler.window, stride)
    return [e.frame_index for e in plan], [assembler.bah_item(sample, e) for e in plan]


def predict_emi(model, assembler, samples, batch_size=256) -> np.ndarray:
    return predict_items(model, assembler, emi_items(assembler, samples), batch_size).reshape(-1, 6)


def predict_bah(model, assembler, sample, stride=1, batch_size=256) -> tuple[np.ndarray, np.ndarray]:
    frames, items = bah_items(assembler, sample, stride)
    probs = predict_items(model, assembler, items, batch_size).reshape(-1)
    return np.asarray(frames, dtype=np.int64), probs


class Evaluator:
    """Caches assembled inputs per split so each epoch only re-runs the model."""

    def __init__(self, assembler: InputAssembler, samples: Sequence[Sample], stride: int, batch_size: int):
        self.assembler = assembler
        self.samples = list(samples)
        self.stride = stride
        self.batch_size = batch_size
        self._items: list[Item] | None = None
        self._labels: np.ndarray | None = None

    def _build(self):
        if self._items is not None:
            return
        if self.assembler.task is Task.EMI:
            self._items = emi_items(self.assembler, self.samples)
            self._labels = np.stack([s.label.as_array() for s in self.samples]) if self.samples else None
        else:
            items, labels = [], []
            for s in self.samples:
                frames, its = bah_items(self.assembler, s, self.stride)
                items.extend(its)
                labels.append(s.label.labels[np.asarray(frames)])
            self._items = items
            self._labels = np.concatenate(labels) if labels else None

    def predictions(self, model) -> np.ndarray:
        self._build()
        return predict_items(model, self.assembler, self._items, self.batch_size)

    def score(self, model):
        self._build()
        preds = self.predictions(model)
        if self.assembler.task is Task.EMI:
            return emi_score(preds.reshape(-1, 6), self._labels)
        return bah_score(threshold(preds.reshape(-1)), self._labels)

    def metric(self, model) -> float:
        report = self.score(model)
        return report.rho_mean if self.assembler.task is Task.EMI else report.f1_weighted


def metric_value(report) -> float:
    return report.rho_mean if hasattr(report, "rho_mean") else report.f1_weighted


# -- the loop ------------------------------------------------------------------------------


def make_assembler(config: TrainConfig, dataset: Dataset, embedder: TextEmbedder | None = None):
    embedder = embedder or StubTextEmbedder(dim=config.text_dim, seed=config.seed)
    dims = model_input_dims(dataset, embedder.dim)
    mods = canonical_modalities(config.modalities)
    missing = [m.value for m in mods if m not in dims]
    if missing:
        raise ValueError(f"pack has no features for modalities {missing}")
    return InputAssembler(config.task, mods, config.window, embedder, dims)


def build_model(config: TrainConfig, assembler: InputAssembler) -> FusionModel:
    dims = ModelDims(
        config.task,
        assembler.modalities,
        {m: assembler.input_dims[m] for m in assembler.modalities},
        config.hidden_dim,
        config.fusion_dim,
    )
    return init_parameters(config.seed, dims)


def build_mtl_model(config: TrainConfig, assembler: InputAssembler) -> MtlModel:
    mods = assembler.modalities
    if len(mods) < 2:
        raise ValueError("multi-task training needs at least two modalities")
    if config.mtl_init:
        u = TaskUncertainty({m: float(config.mtl_init.get(m.value, 0.0)) for m in mods})
    else:
        u = TaskUncertainty.uniform(mods)
    return MtlModel.build(
        config.task, assembler.input_dims, mods, config.seed, config.hidden_dim, config.fusion_dim, u
    )


class _TrainStream:
    """Deterministic per-epoch ordering of training units."""

    def __init__(self, config: TrainConfig, assembler: InputAssembler, samples: Sequence[Sample]):
        self.config = config
        self.assembler = assembler
        self.samples = list(samples)
        self.rng = np.random.default_rng(config.seed)
        self._cache: dict = {}
        self._plans: dict[str, list] = {}
        if config.task is Task.EMI:
            self.units_per_epoch = len(self.samples)
        else:
            self.units_per_epoch = sum(
                min(config.frames_per_video, s.label.n_frames) for s in self.samples
            )

    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.units_per_epoch / self.config.batch_size))

    def _get(self, key) -> Item:
        item = self._cache.get(key)
        if item is None:
            idx, frame = key
            sample = self.samples[idx]
            if frame is None:
                item = self.assembler.emi_item(sample)
            else:
                item = self.assembler.bah_item(sample, self._plans[sample.id][frame])
            self._cache[key] = item
        return item

    def epoch(self):
        if self.config.task is Task.EMI:
            keys = [(i, None) for i in range(len(self.samples))]
        else:
            keys = []
            for i, s in enumerate(self.samples):
                plan = self._plans.get(s.id)
                if plan is None:
                    plan = self._plans[s.id] = bah_frame_plan(s, self.config.window, 1)
                k = min(self.config.frames_per_video, len(plan))
                chosen = np.sort(self.rng.choice(len(plan), size=k, replace=False))
                keys.extend((i, int(f)) for f in chosen)
        order = self.rng.permutation(len(keys))
        keys = [keys[j] for j in order]
        for part in _chunks(keys, self.config.batch_size):
            yield [self._get(k) for k in part]


def _weights_of(model) -> dict[Modality, float] | None:
    return model.weights() if isinstance(model, MtlModel) else None


def _fit(config: TrainConfig, dataset: Dataset, model, assembler: InputAssembler, evaluate_hook=None):
    train_samples = list(dataset.samples(Split.TRAIN))
    val_samples = list(dataset.samples(Split.VAL))
    if not train_samples or not val_samples:
        raise ValueError("training needs non-empty train and val splits")
    stream = _TrainStream(config, assembler, train_samples)
    evaluator = Evaluator(assembler, val_samples, config.stride_frames, config.eval_batch_size)
    evaluate = evaluate_hook or evaluator.metric

    params = [p for p in model.parameters()]
    opt = torch.optim.Adam(params, lr=config.lr0, betas=ADAM_BETAS, eps=ADAM_EPS)
    total_steps = config.epochs * stream.steps_per_epoch()
    dtype = next(model.parameters()).dtype

    history = TrainHistory(
        modalities=getattr(model, "modalities", assembler.modalities),
        initial_weights=_weights_of(model),
    )
    stopper = EarlyStopping(config.patience)
    best_state = copy.deepcopy(model.state_dict())
    step = 0
    lr = config.lr0
    for epoch in range(1, config.epochs + 1):
        model.train()
        loss_sum, count = 0.0, 0
        for items in stream.epoch():
            batch = assembler.collate(items, dtype)
            lr = cosine_lr(step, total_steps, config.lr0)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss = model.batch_loss(batch)
            loss.backward()
            opt.step()
            step += 1
            loss_sum += float(loss.detach()) * len(batch)
            count += len(batch)
        model.eval()
        val = float(evaluate(model))
        history.records.append(
            EpochRecord(epoch, loss_sum / max(count, 1), val, lr, _weights_of(model))
        )
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def train(config: TrainConfig, dataset: Dataset, model: FusionModel | None = None, embedder=None):
    """Train a fused model; returns the best-validation model and the history."""
    if dataset.task is not config.task:
        raise ValueError(f"config task {config.task.value} does not match pack task {dataset.task.value}")
    assembler = make_assembler(config, dataset, embedder)
    if model is None:
        model = build_mtl_model(config, assembler) if config.mtl else build_model(config, assembler)
    return _fit(config, dataset, model, assembler)


def train_mtl(
    config: TrainConfig,
    dataset: Dataset,
    models: Mapping[Modality, FusionModel] | None = None,
    uncertainty: TaskUncertainty | None = None,
    embedder=None,
):
    if len(canonical_modalities(config.modalities)) < 2:
        raise ValueError("multi-task training needs at least two modalities")
    assembler = make_assembler(config, dataset, embedder)
    if models is None:
        model = build_mtl_model(config, assembler)
        if uncertainty is not None:
            with torch.no_grad():
                model.log_var.copy_(
                    torch.tensor([uncertainty.s[m] for m in model.modalities], dtype=torch.float32)
                )
    else:
        model = MtlModel(models, uncertainty or TaskUncertainty.uniform(models))
    return _fit(config, dataset, model, assembler)


def write_history_csv(history: TrainHistory, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(history.to_csv(), encoding="utf-8")
    return path
