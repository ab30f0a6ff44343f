"""Uncertainty-weighted multi-task fusion: one unimodal model per modality.

Each modality ``i`` carries a learned log-variance ``s_i``. Training minimises
``sum_i exp(-s_i) * L_i + s_i`` and predictions are fused with the convex weights
``softmax(-s)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .datamodel import Modality, Task
from .model import Batch, FusionModel, ModelDims, canonical_modalities, check_finite, fill_parameters
from .losses import bce_logit_loss, mse_loss


@dataclass(frozen=True)
class TaskUncertainty:
    s: Mapping[Modality, float]

    def __post_init__(self):
        s = {Modality(k): float(v) for k, v in self.s.items()}
        if not all(math.isfinite(v) for v in s.values()):
            raise ValueError("log-variance parameters must be finite")
        object.__setattr__(self, "s", s)

    @classmethod
    def uniform(cls, modalities) -> "TaskUncertainty":
        return cls({m: 0.0 for m in canonical_modalities(modalities)})

    @classmethod
    def skewed(cls, modalities, favoured: str = "text", ratio: float = 3.0) -> "TaskUncertainty":
        """Initial weights ``ratio`` times larger for ``favoured`` than for the rest."""
        mods = canonical_modalities(modalities)
        fav = Modality(favoured)
        return cls({m: (-math.log(ratio) if m is fav else 0.0) for m in mods})


def _as_map(u) -> Mapping:
    if isinstance(u, TaskUncertainty):
        return u.s
    return {Modality(k): v for k, v in u.items()}


def mtl_loss(per_modality_losses: Mapping, u) -> torch.Tensor | float:
    """``sum_i exp(-s_i) * L_i + s_i``; tensors in, tensor out (floats give a float)."""
    s = _as_map(u)
    total = 0.0
    for m, loss in per_modality_losses.items():
        si = s[Modality(m)]
        if isinstance(si, torch.Tensor) or isinstance(loss, torch.Tensor):
            si = torch.as_tensor(si, dtype=torch.float64) if not isinstance(si, torch.Tensor) else si
            total = total + torch.exp(-si) * loss + si
        else:
            total = total + math.exp(-si) * loss + si
    return total


def fusion_weights(u) -> dict[Modality, float]:
    s = _as_map(u)
    mods = list(s)
    vals = np.array([float(s[m]) for m in mods])
    neg = -vals
    e = np.exp(neg - neg.max())
    w = e / e.sum()
    return {m: float(x) for m, x in zip(mods, w)}


def mtl_fused_prediction(per_modality_predictions: Mapping, weights: Mapping):
    arrays = {Modality(m): p for m, p in per_modality_predictions.items()}
    if not arrays:
        raise ValueError("no predictions to fuse")
    shapes = {tuple(np.shape(p)) for p in arrays.values()}
    if len(shapes) != 1:
        raise ValueError(f"prediction shapes differ: {sorted(shapes)}")
    w = {Modality(m): v for m, v in weights.items()}
    if set(w) != set(arrays):
        raise ValueError("weights and predictions cover different modalities")
    if any(isinstance(p, torch.Tensor) for p in arrays.values()):
        return sum(w[m] * arrays[m] for m in arrays)
    out = np.zeros(next(iter(shapes)))
    for m in arrays:
        out = out + float(w[m]) * np.asarray(arrays[m], dtype=np.float64)
    return out


class MtlModel(nn.Module):
    """Unimodal fusion branches plus learned per-modality log-variances."""

    def __init__(self, branches: Mapping[Modality, FusionModel], uncertainty: TaskUncertainty):
        super().__init__()
        mods = canonical_modalities(m.value if isinstance(m, Modality) else m for m in branches)
        if len(mods) < 2:
            raise ValueError("multi-task fusion needs at least two modalities")
        tasks = {b.task for b in branches.values()}
        if len(tasks) != 1:
            raise ValueError("all branches must share one task")
        self.modalities = mods
        self._task = tasks.pop()
        self.branches = nn.ModuleDict({m.value: branches[m] for m in mods})
        init = _as_map(uncertainty)
        self.log_var = nn.Parameter(torch.tensor([float(init[m]) for m in mods], dtype=torch.float32))

    @property
    def task(self) -> Task:
        return self._task

    @classmethod
    def build(
        cls,
        task: Task,
        input_dims: Mapping[Modality, int],
        modalities,
        seed: int,
        hidden_dim: int = 128,
        fusion_dim: int = 256,
        uncertainty: TaskUncertainty | None = None,
    ) -> "MtlModel":
        mods = canonical_modalities(modalities)
        branches = {}
        for k, m in enumerate(mods):
            dims = ModelDims(task, (m,), {m: input_dims[m]}, hidden_dim, fusion_dim)
            branch = FusionModel(dims, seed=seed + k)
            fill_parameters(branch, seed + k)
            branches[m] = branch
        return cls(branches, uncertainty or TaskUncertainty.uniform(mods))

    def metadata(self) -> dict:
        first = next(iter(self.branches.values()))
        return {
            "task": self.task.value,
            "modalities": [m.value for m in self.modalities],
            "branches": {
                name: {"dims": b.dims.to_dict(), "seed": b.seed} for name, b in self.branches.items()
            },
            "hidden_dim": first.dims.hidden_dim,
        }

    @classmethod
    def from_metadata(cls, meta: Mapping) -> "MtlModel":
        branches = {
            Modality(name): FusionModel(ModelDims.from_dict(info["dims"]), seed=int(info["seed"]))
            for name, info in meta["branches"].items()
        }
        return cls(branches, TaskUncertainty.uniform(branches))

    def uncertainty(self) -> TaskUncertainty:
        return TaskUncertainty({m: float(v) for m, v in zip(self.modalities, self.log_var.detach())})

    def weights(self) -> dict[Modality, float]:
        return fusion_weights(self.uncertainty())

    def branch_outputs(self, batch: Batch) -> dict[Modality, torch.Tensor]:
        return {m: self.branches[m.value](batch) for m in self.modalities}

    def _probabilities(self, outputs):
        if self.task is Task.EMI:
            return outputs
        return {m: torch.sigmoid(v) for m, v in outputs.items()}

    def predict(self, batch: Batch) -> torch.Tensor:
        probs = self._probabilities(self.branch_outputs(batch))
        w = torch.softmax(-self.log_var, dim=0).to(next(iter(probs.values())).dtype)
        return mtl_fused_prediction(probs, {m: w[k] for k, m in enumerate(self.modalities)})

    def modality_losses(self, batch: Batch) -> dict[Modality, torch.Tensor]:
        """Per-sample loss of each unimodal branch."""
        out = {}
        for m, pred in self.branch_outputs(batch).items():
            if self.task is Task.EMI:
                out[m] = mse_loss(pred, batch.targets)
            else:
                out[m] = bce_logit_loss(pred, batch.targets)
        return out

    def per_sample_loss(self, batch: Batch) -> torch.Tensor:
        losses = self.modality_losses(batch)
        return torch.stack(list(losses.values())).sum(dim=0)

    def batch_loss(self, batch: Batch, reduction: str = "mean") -> torch.Tensor:
        losses = self.modality_losses(batch)
        check_finite(torch.stack(list(losses.values())).sum(dim=0), batch)
        reduce = (lambda t: t.sum()) if reduction == "sum" else (lambda t: t.mean())
        s = {m: self.log_var[k] for k, m in enumerate(self.modalities)}
        return mtl_loss({m: reduce(v) for m, v in losses.items()}, s)
