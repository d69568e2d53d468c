"""Knowledge-transfer losses and the shape-reconciling adapter machinery.

The teacher side of every loss here is a constant: gradients flow into
student tensors (and adapter weights) only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Parameter, Tensor
from .utils import seeded_rng


@dataclass(frozen=True)
class KDSpec:
    """Soft-target settings for joint KD: temperature, loss weight, T^2 rescale."""

    temperature: float = 4.0
    loss_weight: float = 1.0
    t2_rescale: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.loss_weight < 0:
            raise ConfigError(f"loss_weight must be non-negative, got {self.loss_weight}")


class Adapter:
    """Training-only bridge mapping a student stage feature onto the
    teacher's shape: optional 1x1 convolution (channels), then optional
    corner-aligned resize (spatial). Never part of the inference model."""

    def __init__(self, owner_stage, conv1x1=None, resize_to=None):
        self.owner_stage = owner_stage
        self.conv1x1 = conv1x1
        self.resize_to = resize_to

    def apply(self, feature):
        out = feature
        if self.conv1x1 is not None:
            out = ops.conv2d(out, self.conv1x1.value)
        if self.resize_to is not None:
            out = ops.resize_bilinear(out, self.resize_to)
        return out

    def params(self):
        return [] if self.conv1x1 is None else [self.conv1x1]

    def __repr__(self):
        ch = None if self.conv1x1 is None else tuple(self.conv1x1.value.shape[:2])
        return f"Adapter(stage={self.owner_stage}, channels={ch}, resize_to={self.resize_to})"


def make_adapter(teacher_shape, student_shape, seed, stage=0):
    """An adapter reconciling student -> teacher feature shapes, or None.

    The 1x1 kernel appears only when channel counts differ; the resize only
    when spatial extents differ. Initialization is deterministic in seed.
    """
    t, s = tuple(teacher_shape), tuple(student_shape)
    if len(t) != 4 or len(s) != 4:
        raise DimensionError(f"make_adapter: expected NCHW shapes, got {t} and {s}")
    if t[0] != s[0]:
        raise DimensionError.mismatch("make_adapter: batch", t, s)
    conv = None
    if t[1] != s[1]:
        rng = seeded_rng(seed, "adapter", stage)
        std = 1.0 / np.sqrt(s[1])
        w = rng.normal(0.0, std, size=(t[1], s[1], 1, 1)).astype(np.float32)
        conv = Parameter(f"adapter.stage{stage}.weight", Tensor(w))
    resize_to = (t[2], t[3]) if t[2:] != s[2:] else None
    if conv is None and resize_to is None:
        return None
    return Adapter(owner_stage=stage, conv1x1=conv, resize_to=resize_to)


@dataclass
class MimicPair:
    """Teacher and student features of one stage, bound through an adapter."""

    stage_index: int
    teacher_feature: Tensor
    student_feature: Tensor
    adapter: Adapter = None


def mimic_loss(pair):
    """Squared l2 distance between the teacher feature and the (adapted)
    student feature, averaged over the batch. The teacher side is constant."""
    target = pair.teacher_feature.detach()
    pred = pair.student_feature
    if pair.adapter is not None:
        pred = pair.adapter.apply(pred)
    if pred.shape != target.shape:
        raise DimensionError.mismatch(
            f"mimic_loss stage {pair.stage_index}", target.shape, pred.shape
        )
    return ops.l2_distance(target, pred)


def kd_loss(teacher_logits, student_logits, spec):
    """Temperature-softened KL divergence from teacher to student logits."""
    return ops.kl_soft_targets(
        teacher_logits.detach(),
        student_logits,
        temperature=spec.temperature,
        t2_rescale=spec.t2_rescale,
    )


def joint_kd_objective(task, kd, loss_weight):
    """task + loss_weight * kd, on one tape."""
    return ops.add(task, ops.scale(kd, loss_weight))


def set_frozen(model, owners, frozen):
    """Flip trainability of whole owners (stages or head).

    Freezing an owner also switches its batch-norm layers to
    running-statistics inference mode; unfreezing restores batch-statistics
    mode. Unknown owners are rejected before any change is applied.
    """
    owners = list(owners)
    known = set(model.owner_ids())
    for owner in owners:
        if owner not in known:
            raise UsageError(f"unknown owner {owner!r}; known: {sorted(known)}")
    for owner in owners:
        for p in model.params_of(owner):
            p.trainable = not frozen
        for bn in model.bn_layers_of(owner):
            bn.training = not frozen
