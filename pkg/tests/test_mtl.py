import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from affectfusion.datamodel import Modality, Split, Task
from affectfusion.featurestore import SyntheticSpec, generate_synthetic, load_dataset
from affectfusion.mtl import MtlModel, TaskUncertainty, fusion_weights, mtl_fused_prediction, mtl_loss
from affectfusion.training import TrainConfig, emi_items, make_assembler, train_mtl

A, V, T = Modality.AUDIO, Modality.VISION, Modality.TEXT


class TestLoss:
    def test_hand_value(self):
        assert mtl_loss({A: 1.0}, {A: math.log(2)}) == pytest.approx(1.19315, abs=1e-5)

    def test_zero_s_is_plain_sum(self):
        assert mtl_loss({A: 0.3, V: 0.2}, TaskUncertainty.uniform(["audio", "vision"])) == pytest.approx(0.5)

    def test_stationary_at_unit_loss(self):
        s = torch.zeros((), dtype=torch.float64, requires_grad=True)
        mtl_loss({A: torch.tensor(1.0, dtype=torch.float64)}, {A: s}).backward()
        assert float(s.grad) == 0.0

    def test_differentiable_in_loss(self):
        loss = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
        mtl_loss({A: loss}, {A: math.log(2)}).backward()
        assert float(loss.grad) == pytest.approx(0.5)


class TestWeights:
    def test_uniform(self):
        w = fusion_weights(TaskUncertainty.uniform(["audio", "vision", "text"]))
        assert all(v == pytest.approx(1 / 3) for v in w.values())
        # a typical near-uniform trimodal weight row
        assert np.allclose([0.333, 0.331, 0.336], list(w.values()), atol=3e-3)

    def test_hand_value(self):
        w = fusion_weights({A: 0.0, V: math.log(2)})
        assert w[A] == pytest.approx(2 / 3) and w[V] == pytest.approx(1 / 3)

    def test_skewed_init(self):
        w = fusion_weights(TaskUncertainty.skewed(["audio", "vision", "text"], "text", 3.0))
        assert w[T] == pytest.approx(3 * w[A]) and w[A] == pytest.approx(w[V])

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=3), st.floats(-10, 10))
    def test_convex_and_shift_invariant(self, s, c):
        mods = [A, V, T][: len(s)]
        w = fusion_weights(dict(zip(mods, s)))
        assert all(v > 0 for v in w.values())
        assert abs(sum(w.values()) - 1) < 1e-9
        shifted = fusion_weights({m: v + c for m, v in zip(mods, s)})
        assert np.allclose(list(w.values()), list(shifted.values()), atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            TaskUncertainty({A: float("inf")})


class TestFusedPrediction:
    def test_hand_value(self):
        assert mtl_fused_prediction({A: 0.2, V: 0.8}, {A: 0.25, V: 0.75}) == pytest.approx(0.65)

    def test_one_hot_weights(self):
        p = np.array([0.1, 0.9])
        assert np.array_equal(mtl_fused_prediction({A: p, V: 1 - p}, {A: 1.0, V: 0.0}), p)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mtl_fused_prediction({A: np.zeros(2), V: np.zeros(3)}, {A: 0.5, V: 0.5})

    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_inside_convex_hull(self, preds, s):
        w = fusion_weights(dict(zip([A, V, T], s)))
        fused = float(mtl_fused_prediction(dict(zip([A, V, T], preds)), w))
        assert min(preds) - 1e-12 <= fused <= max(preds) + 1e-12


def test_model_needs_two_modalities():
    with pytest.raises(ValueError):
        MtlModel.build(Task.EMI, {A: 4}, ["audio"], seed=0, hidden_dim=4, fusion_dim=4)


def test_persistently_higher_loss_raises_its_log_variance():
    # losses held fixed; optimise only s
    for seed in range(5):
        rng = np.random.default_rng(seed)
        base = rng.uniform(0.05, 0.3, size=3)
        losses = {A: float(base.max() * 2), V: float(base[1]), T: float(base[2])}
        s = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        opt = torch.optim.Adam([s], lr=0.05)
        for _ in range(600):
            opt.zero_grad()
            mtl_loss(losses, {A: s[0], V: s[1], T: s[2]}).backward()
            opt.step()
        sa, sv, st_ = s.detach().tolist()
        w = fusion_weights({A: sa, V: sv, T: st_})
        assert sa > max(sv, st_)
        assert w[A] < min(w[V], w[T])
        # the optimum is s_i = ln L_i
        assert sa == pytest.approx(math.log(losses[A]), abs=1e-3)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noisy_modality_gets_pushed_up(tmp_path, seed):
    generate_synthetic(
        SyntheticSpec(task="emi", n_samples={"train": 24, "val": 8}, seed=seed, noise={"audio": 30.0}), tmp_path
    )
    ds = load_dataset(tmp_path)
    cfg = TrainConfig(
        task="emi", modalities=("audio", "vision"), lr0=3e-3, epochs=12, batch_size=8,
        patience=30, hidden_dim=16, fusion_dim=32, mtl=True, seed=seed,
    )
    model, history = train_mtl(cfg, ds)
    asm = make_assembler(cfg, ds)
    batch = asm.collate(emi_items(asm, list(ds.samples(Split.TRAIN))))
    losses = {m: float(v.detach().mean()) for m, v in model.modality_losses(batch).items()}
    assert losses[A] > losses[V]
    model.zero_grad()
    model.batch_loss(batch).backward()
    grad = dict(zip(model.modalities, model.log_var.grad.tolist()))
    # descent moves s_audio up relative to s_vision
    assert grad[A] < grad[V]
    for record in history.records:
        assert all(w > 0 for w in record.weights.values())
        assert abs(sum(record.weights.values()) - 1) <= 1e-6
