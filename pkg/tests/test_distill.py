"""Distillation losses, adapters, and freezing."""

import math

import numpy as np
import pytest

from sskd import ops
from sskd.distill import (
    Adapter,
    KDSpec,
    MimicPair,
    joint_kd_objective,
    kd_loss,
    make_adapter,
    mimic_loss,
    set_frozen,
)
from sskd.errors import ConfigError, DimensionError, UsageError
from sskd.models import build_model
from sskd.tensor import Parameter, Tape, Tensor, backward

from test_models import batch, tiny_config


class TestMakeAdapter:
    def test_identical_shapes_need_no_adapter(self):
        assert make_adapter((2, 8, 4, 4), (2, 8, 4, 4), seed=1) is None

    def test_channel_mismatch_gets_1x1_kernel_only(self):
        a = make_adapter((2, 16, 8, 8), (2, 8, 8, 8), seed=1, stage=2)
        assert a.conv1x1.value.shape == (16, 8, 1, 1)
        assert a.resize_to is None
        assert a.owner_stage == 2

    def test_spatial_mismatch_gets_resize_only(self):
        a = make_adapter((2, 16, 8, 8), (2, 16, 4, 4), seed=1)
        assert a.conv1x1 is None
        assert a.resize_to == (8, 8)

    def test_batch_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            make_adapter((2, 8, 4, 4), (3, 8, 4, 4), seed=1)

    def test_deterministic_init(self):
        a = make_adapter((2, 16, 8, 8), (2, 8, 8, 8), seed=5)
        b = make_adapter((2, 16, 8, 8), (2, 8, 8, 8), seed=5)
        np.testing.assert_array_equal(a.conv1x1.value.data, b.conv1x1.value.data)


class TestMimicLoss:
    def test_zero_for_identical_features(self):
        f = Tensor(np.random.default_rng(0).normal(size=(2, 4, 3, 3)).astype(np.float32))
        pair = MimicPair(1, f, Tensor(f.data.copy()))
        assert mimic_loss(pair).item() == 0.0

    def test_channel_adapter_makes_loss_finite_and_differentiable(self):
        rng = np.random.default_rng(1)
        t = Tensor(rng.normal(size=(2, 16, 4, 4)).astype(np.float32))
        s = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32), requires_grad=True)
        adapter = make_adapter(t.shape, s.shape, seed=3, stage=1)
        with Tape() as tape:
            loss = mimic_loss(MimicPair(1, t, s, adapter))
        assert math.isfinite(loss.item())
        backward(tape, loss)
        assert s.grad is not None
        assert adapter.conv1x1.grad is not None

    def test_identity_embedding_kernel_equals_plain_l2(self):
        rng = np.random.default_rng(2)
        t = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
        s = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
        eye = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        adapter = Adapter(owner_stage=1, conv1x1=Parameter("a", Tensor(eye)))
        with_adapter = mimic_loss(MimicPair(1, t, s, adapter)).item()
        plain = mimic_loss(MimicPair(1, t, s)).item()
        assert with_adapter == pytest.approx(plain, rel=1e-6)

    def test_batch_mismatch_rejected(self):
        t = Tensor(np.zeros((2, 4, 3, 3), dtype=np.float32))
        s = Tensor(np.zeros((3, 4, 3, 3), dtype=np.float32))
        with pytest.raises(DimensionError):
            mimic_loss(MimicPair(1, t, s))

    def test_teacher_side_never_receives_gradient(self):
        rng = np.random.default_rng(3)
        t = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32), requires_grad=True)
        s = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = mimic_loss(MimicPair(1, t, s))
        backward(tape, loss)
        assert t.grad is None
        assert s.grad is not None


class TestKDLoss:
    def test_zero_for_identical_logits(self):
        z = Tensor(np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32))
        assert kd_loss(z, Tensor(z.data.copy()), KDSpec()).item() == pytest.approx(0.0, abs=1e-7)

    def test_two_class_closed_form(self):
        # KL([e,1]/(e+1) || [1,e]/(e+1)) = (e-1)/(e+1), log-ratio 1 per class
        t = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
        s = Tensor(np.array([[0.0, 1.0]], dtype=np.float32))
        spec = KDSpec(temperature=1.0, t2_rescale=False)
        want = (math.e - 1.0) / (math.e + 1.0)
        assert kd_loss(t, s, spec).item() == pytest.approx(want, rel=1e-5)
        assert kd_loss(t, s, spec).item() == pytest.approx(0.462117, abs=1e-5)

    def test_non_negative_and_gradient_into_student_only(self):
        rng = np.random.default_rng(4)
        for trial in range(10):
            t = Tensor(rng.normal(size=(4, 6)).astype(np.float32), requires_grad=True)
            s = Tensor(rng.normal(size=(4, 6)).astype(np.float32), requires_grad=True)
            with Tape() as tape:
                loss = kd_loss(t, s, KDSpec(temperature=2.0))
            assert loss.item() >= 0.0
            backward(tape, loss)
            assert t.grad is None
            assert s.grad is not None

    def test_temperature_limit_monotone_to_zero(self):
        rng = np.random.default_rng(5)
        t = Tensor(rng.normal(size=(4, 6)).astype(np.float64))
        s = Tensor(rng.normal(size=(4, 6)).astype(np.float64))
        values = [
            kd_loss(t, s, KDSpec(temperature=temp, t2_rescale=False)).item()
            for temp in (1.0, 4.0, 16.0, 256.0)
        ]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(0.0, abs=1e-4)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ConfigError):
            KDSpec(temperature=0.0)
        with pytest.raises(ConfigError):
            KDSpec(loss_weight=-1.0)


class TestJointObjective:
    def test_zero_weight_reduces_to_task_loss(self):
        task = Tensor(np.asarray(1.25, dtype=np.float32))
        kd = Tensor(np.asarray(7.0, dtype=np.float32))
        assert joint_kd_objective(task, kd, 0.0).item() == pytest.approx(1.25)

    def test_arithmetic(self):
        task = Tensor(np.asarray(1.0, dtype=np.float32))
        kd = Tensor(np.asarray(2.0, dtype=np.float32))
        assert joint_kd_objective(task, kd, 10.0).item() == pytest.approx(21.0)

    def test_gradient_is_sum_of_scaled_gradients(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=(3, 4))
        lam = 2.5

        def grad_of(fn):
            x = Tensor(base, dtype=np.float64, requires_grad=True)
            with Tape() as tape:
                loss = fn(x)
            backward(tape, loss)
            return x.grad

        target = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        labels = [0, 1, 2]
        g_task = grad_of(lambda x: ops.softmax_cross_entropy(x, labels))
        g_kd = grad_of(lambda x: ops.l2_distance(target, x))
        g_joint = grad_of(
            lambda x: joint_kd_objective(
                ops.softmax_cross_entropy(x, labels), ops.l2_distance(target, x), lam
            )
        )
        np.testing.assert_allclose(g_joint, g_task + lam * g_kd, rtol=1e-12)


class TestSetFrozen:
    def test_frozen_owners_keep_bytes_through_training_flags(self):
        model = build_model(tiny_config(widths=(4, 8, 8), blocks=(1, 1, 1)), seed=1)
        set_frozen(model, ["stage1", "stage2"], True)
        for owner in ("stage1", "stage2"):
            assert all(not p.trainable for p in model.params_of(owner))
            assert all(not bn.training for bn in model.bn_layers_of(owner))
        assert all(p.trainable for p in model.params_of("stage3"))

    def test_round_trip_restores_mask(self):
        model = build_model(tiny_config(), seed=1)
        before = [(p.name, p.trainable) for p in model.parameters()]
        set_frozen(model, model.owner_ids(), True)
        set_frozen(model, model.owner_ids(), False)
        after = [(p.name, p.trainable) for p in model.parameters()]
        assert before == after

    def test_unknown_owner_rejected_before_mutation(self):
        model = build_model(tiny_config(), seed=1)
        with pytest.raises(UsageError, match="unknown owner"):
            set_frozen(model, ["stage1", "stage9"], True)
        assert all(p.trainable for p in model.parameters())

    def test_frozen_stage_runs_batchnorm_in_inference_mode(self):
        model = build_model(tiny_config(), seed=1)
        x = batch(model)
        set_frozen(model, ["stage1"], True)
        bn = model.bn_layers_of("stage1")[0]
        rm_before = bn.running_mean.copy()
        model.forward_stages(x, upto=1)
        np.testing.assert_array_equal(bn.running_mean, rm_before)
        set_frozen(model, ["stage1"], False)
        model.forward_stages(x, upto=1)
        assert not np.array_equal(bn.running_mean, rm_before)
