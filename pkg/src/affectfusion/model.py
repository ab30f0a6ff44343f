"""Recurrent temporal heads, the Tanh fusion MLP and the task heads."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .datamodel import Modality, Task
from .losses import bce_logit_loss, mse_loss

SEQUENCE_MODALITIES = (Modality.AUDIO, Modality.VISION)
FUSABLE = (Modality.AUDIO, Modality.VISION, Modality.TEXT)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"non-finite loss for sample {sample_id!r}")


def canonical_modalities(names) -> tuple[Modality, ...]:
    mods = {Modality(n) for n in names}
    unknown = mods - set(FUSABLE)
    if unknown:
        raise ValueError(f"cannot fuse modalities {sorted(m.value for m in unknown)}")
    return tuple(m for m in FUSABLE if m in mods)


@dataclass(frozen=True)
class ModelDims:
    task: Task
    modalities: tuple[Modality, ...]
    input_dims: Mapping[Modality, int]
    hidden_dim: int = 128
    fusion_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "modalities", canonical_modalities(self.modalities))
        if not self.modalities:
            raise ValueError("a model needs at least one modality")
        dims = {Modality(k): int(v) for k, v in self.input_dims.items()}
        for m in self.modalities:
            if dims.get(m, 0) < 1:
                raise ValueError(f"input dim for {m.value} must be positive")
        object.__setattr__(self, "input_dims", {m: dims[m] for m in self.modalities})
        if self.hidden_dim < 1 or self.fusion_dim < 1:
            raise ValueError("hidden and fusion widths must be positive")

    @property
    def n_outputs(self) -> int:
        return 6 if self.task is Task.EMI else 1

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "modalities": [m.value for m in self.modalities],
            "input_dims": {m.value: self.input_dims[m] for m in self.modalities},
            "hidden_dim": self.hidden_dim,
            "fusion_dim": self.fusion_dim,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelDims":
        return cls(
            task=Task(data["task"]),
            modalities=tuple(data["modalities"]),
            input_dims={Modality(k): v for k, v in data["input_dims"].items()},
            hidden_dim=int(data["hidden_dim"]),
            fusion_dim=int(data["fusion_dim"]),
        )


@dataclass
class Batch:
    """Collated model inputs. ``present`` holds 0/1 per sample and modality."""

    sample_ids: list[str]
    sequences: dict[Modality, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    text: torch.Tensor | None = None
    present: dict[Modality, torch.Tensor] = field(default_factory=dict)
    targets: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.sample_ids)

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(
            sample_ids=list(self.sample_ids),
            sequences={m: (v.to(dtype), mask) for m, (v, mask) in self.sequences.items()},
            text=None if self.text is None else self.text.to(dtype),
            present={m: p.to(dtype) for m, p in self.present.items()},
            targets=None if self.targets is None else self.targets.to(dtype),
        )


class RecurrentHead(nn.Module):
    """Two stacked LSTM layers; masked steps leave both layers' state untouched."""

    def __init__(self, input_dim: int, hidden_dim: int, layers: int = 2):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.layers = layers
        for layer in range(layers):
            in_dim = input_dim if layer == 0 else hidden_dim
            self.register_parameter(f"w_ih{layer}", nn.Parameter(torch.zeros(4 * hidden_dim, in_dim)))
            self.register_parameter(f"w_hh{layer}", nn.Parameter(torch.zeros(4 * hidden_dim, hidden_dim)))
            self.register_parameter(f"b{layer}", nn.Parameter(torch.zeros(4 * hidden_dim)))

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if values.ndim != 3 or values.shape[-1] != self.input_dim:
            raise ValueError(
                f"expected (batch, steps, {self.input_dim}) inputs, got {tuple(values.shape)}"
            )
        valid = mask.to(torch.bool)
        batch, steps, _ = values.shape
        w_ih0 = getattr(self, "w_ih0")
        # padded rows never reach the arithmetic
        x = torch.where(valid[..., None], values, torch.zeros((), dtype=values.dtype))
        hidden = self.hidden_dim
        h = [values.new_zeros(batch, hidden) for _ in range(self.layers)]
        c = [values.new_zeros(batch, hidden) for _ in range(self.layers)]
        any_valid = valid.any(dim=0).nonzero()
        if any_valid.numel() == 0:
            return h[-1]
        last = int(any_valid.max())
        proj0 = x[:, : last + 1] @ w_ih0.T
        for t in range(last + 1):
            m = valid[:, t, None]
            inp = None
            for layer in range(self.layers):
                b = getattr(self, f"b{layer}")
                w_hh = getattr(self, f"w_hh{layer}")
                if layer == 0:
                    gates = proj0[:, t] + h[0] @ w_hh.T + b
                else:
                    gates = inp @ getattr(self, f"w_ih{layer}").T + h[layer] @ w_hh.T + b
                i, f, g, o = gates.split(hidden, dim=1)
                c_new = torch.sigmoid(f) * c[layer] + torch.sigmoid(i) * torch.tanh(g)
                h_new = torch.sigmoid(o) * torch.tanh(c_new)
                c[layer] = torch.where(m, c_new, c[layer])
                h[layer] = torch.where(m, h_new, h[layer])
                inp = h[layer]
        return h[-1]


class FusionModel(nn.Module):
    """Per-modality summaries -> two-layer Tanh MLP -> EMI sigmoid or BAH logit.

    Each modality contributes its vector (zeros when absent) followed by a 0/1
    presence flag whose fusion weights are learned like any other input.
    """

    def __init__(self, dims: ModelDims, seed: int = 0):
        super().__init__()
        self.dims = dims
        self.seed = seed
        self.heads = nn.ModuleDict(
            {
                m.value: RecurrentHead(dims.input_dims[m], dims.hidden_dim)
                for m in dims.modalities
                if m in SEQUENCE_MODALITIES
            }
        )
        width = sum(self.summary_dim(m) + 1 for m in dims.modalities)
        self.fusion_in = width
        self.w1 = nn.Parameter(torch.zeros(dims.fusion_dim, width))
        self.b1 = nn.Parameter(torch.zeros(dims.fusion_dim))
        self.w2 = nn.Parameter(torch.zeros(dims.n_outputs, dims.fusion_dim))
        self.b2 = nn.Parameter(torch.zeros(dims.n_outputs))

    @property
    def task(self) -> Task:
        return self.dims.task

    def summary_dim(self, modality: Modality) -> int:
        if modality in SEQUENCE_MODALITIES:
            return self.dims.hidden_dim
        return self.dims.input_dims[modality]

    def summaries(self, batch: Batch) -> dict[Modality, torch.Tensor]:
        out = {}
        for m in self.dims.modalities:
            if m is Modality.TEXT:
                if batch.text is not None:
                    out[m] = batch.text
            elif m in batch.sequences:
                values, mask = batch.sequences[m]
                out[m] = self.heads[m.value](values, mask)
        return out

    def fusion_forward(self, vectors: Mapping[Modality, torch.Tensor], present=None) -> torch.Tensor:
        """Raw fusion output: sigmoid intensities (EMI, B x 6) or logits (BAH, B)."""
        present = present or {}
        ref = next((v for v in vectors.values() if v is not None), None)
        if ref is None:
            raise ValueError("every modality is absent")
        n = ref.shape[0]
        blocks = []
        flags_total = ref.new_zeros(n)
        for m in self.dims.modalities:
            vec = vectors.get(m)
            if vec is None:
                flag = ref.new_zeros(n)
                vec = ref.new_zeros(n, self.summary_dim(m))
            else:
                flag = present.get(m)
                flag = ref.new_ones(n) if flag is None else flag.to(ref.dtype)
                vec = vec * flag[:, None]
            if vec.shape[1] != self.summary_dim(m):
                raise ValueError(f"{m.value} vector has {vec.shape[1]} dims, expected {self.summary_dim(m)}")
            blocks.append(vec)
            blocks.append(flag[:, None])
            flags_total = flags_total + flag
        if bool((flags_total == 0).any()):
            raise ValueError("every modality is absent for at least one sample")
        hidden = torch.tanh(torch.cat(blocks, dim=1) @ self.w1.T + self.b1)
        out = hidden @ self.w2.T + self.b2
        if self.task is Task.EMI:
            return torch.sigmoid(out)
        return out[:, 0]

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.fusion_forward(self.summaries(batch), batch.present)

    def predict(self, batch: Batch) -> torch.Tensor:
        out = self(batch)
        return out if self.task is Task.EMI else torch.sigmoid(out)

    def per_sample_loss(self, batch: Batch) -> torch.Tensor:
        out = self(batch)
        if self.task is Task.EMI:
            return mse_loss(out, batch.targets)
        return bce_logit_loss(out, batch.targets)

    def batch_loss(self, batch: Batch, reduction: str = "mean") -> torch.Tensor:
        losses = self.per_sample_loss(batch)
        check_finite(losses, batch)
        return losses.sum() if reduction == "sum" else losses.mean()


def check_finite(per_sample: torch.Tensor, batch: Batch) -> None:
    bad = (~torch.isfinite(per_sample.detach())).nonzero()
    if bad.numel():
        raise NonFiniteLossError(batch.sample_ids[int(bad[0])])


def recurrent_forward(head: RecurrentHead, chunk) -> torch.Tensor:
    """Run one ChunkView through ``head``; returns the top-layer hidden state (H,)."""
    dtype = head.w_ih0.dtype
    values = torch.as_tensor(np.asarray(chunk.values), dtype=dtype)[None]
    mask = torch.as_tensor(np.asarray(chunk.mask, dtype=np.uint8))[None]
    if values.shape[-1] != head.input_dim:
        raise ValueError(f"chunk has {values.shape[-1]} columns, head expects {head.input_dim}")
    return head(values, mask)[0]


def fusion_forward(model: FusionModel, modality_vectors: Mapping) -> torch.Tensor:
    dtype = model.w1.dtype
    vectors = {
        Modality(m): None if v is None else torch.as_tensor(np.asarray(v), dtype=dtype).reshape(1, -1)
        for m, v in modality_vectors.items()
    }
    return model.fusion_forward(vectors)[0]


def model_gradients(model: nn.Module, batch: Batch, loss_kind: str | None = None) -> dict[str, np.ndarray]:
    """Gradients of the summed per-sample loss with respect to every parameter."""
    if loss_kind is not None:
        expected = "mse" if model.task is Task.EMI else "bce"
        if loss_kind != expected:
            raise ValueError(f"{model.task.value} models train with {expected}, got {loss_kind!r}")
    names, params = zip(*model.named_parameters())
    total = model.batch_loss(batch, reduction="sum")
    grads = torch.autograd.grad(total, params, allow_unused=True)
    return {
        n: (np.zeros(tuple(p.shape)) if g is None else g.detach().cpu().numpy())
        for n, p, g in zip(names, params, grads)
    }


def init_parameters(seed: int, dims: ModelDims) -> FusionModel:
    model = FusionModel(dims, seed=seed)
    fill_parameters(model, seed)
    return model


def fill_parameters(module: nn.Module, seed: int) -> None:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _, param in module.named_parameters():
            if param.ndim == 2:
                bound = 1.0 / math.sqrt(param.shape[1])
                vals = rng.uniform(-bound, bound, size=tuple(param.shape))
            else:
                vals = np.zeros(tuple(param.shape))
            param.copy_(torch.as_tensor(vals, dtype=param.dtype))
        for sub in module.modules():
            if isinstance(sub, RecurrentHead):
                hidden = sub.hidden_dim
                for layer in range(sub.layers):
                    getattr(sub, f"b{layer}")[hidden : 2 * hidden] = 1.0


# -- checkpoints ----------------------------------------------------------------


def _flat_parameters(module: nn.Module) -> tuple[list, np.ndarray]:
    layout, chunks = [], []
    for name, param in module.state_dict().items():
        layout.append([name, list(param.shape)])
        chunks.append(param.detach().cpu().numpy().astype("<f4").reshape(-1))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    return layout, blob


def save_checkpoint(module: nn.Module, path: str | Path, extra: Mapping | None = None) -> Path:
    """Write ``<path>.f32`` (all parameters, declared order) and ``<path>.meta.json``."""
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_name(path.name + ".f32")
    layout, blob = _flat_parameters(module)
    path.write_bytes(blob.tobytes())
    meta = {
        "rows": 1,
        "cols": int(blob.shape[0]),
        "dtype": "f32le",
        "kind": type(module).__name__,
        "params": layout,
    }
    meta.update(module_metadata(module))
    if extra:
        meta.update(extra)
    meta_file = path.with_name(path.stem + ".meta.json")
    meta_file.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def module_metadata(module: nn.Module) -> dict:
    if isinstance(module, FusionModel):
        return {"dims": module.dims.to_dict(), "seed": module.seed, "task": module.task.value}
    meta = getattr(module, "metadata", None)
    return meta() if callable(meta) else {}


def load_parameters(module: nn.Module, path: str | Path) -> nn.Module:
    path = Path(path)
    meta = json.loads(path.with_name(path.stem + ".meta.json").read_text(encoding="utf-8"))
    blob = np.frombuffer(path.read_bytes(), dtype="<f4")
    state = module.state_dict()
    offset = 0
    new_state = {}
    for name, shape in meta["params"]:
        size = int(np.prod(shape)) if shape else 1
        if name not in state or list(state[name].shape) != list(shape):
            raise ValueError(f"checkpoint parameter {name} {shape} does not match the model")
        arr = blob[offset : offset + size].reshape(shape)
        new_state[name] = torch.as_tensor(arr.copy(), dtype=state[name].dtype)
        offset += size
    if offset != blob.shape[0]:
        raise ValueError(f"{path}: {blob.shape[0] - offset} trailing values in checkpoint")
    module.load_state_dict(new_state)
    return module


def load_checkpoint(path: str | Path) -> nn.Module:
    path = Path(path)
    meta = json.loads(path.with_name(path.stem + ".meta.json").read_text(encoding="utf-8"))
    if meta.get("kind") == "MtlModel":
        from .mtl import MtlModel

        module = MtlModel.from_metadata(meta)
    else:
        module = FusionModel(ModelDims.from_dict(meta["dims"]), seed=int(meta.get("seed", 0)))
    return load_parameters(module, path)


def config_hash(config) -> str:
    data = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    blob = json.dumps(data, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
