"""End-to-end training procedures: from-scratch, joint KD, multi-loss
distillation, and stage-by-stage distillation.

Every procedure is a pure function of (configs, dataset, plan): all
randomness flows from named streams derived from the plan seed, and batch
order depends only on (seed, phase index, epoch). Stage phases freeze
earlier stages outright, so stage-i training consumes features produced by
the already-trained prefix.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .data import batches
from .distill import KDSpec, MimicPair, make_adapter, mimic_loss, set_frozen, kd_loss, joint_kd_objective
from .errors import ConfigError, RunAbort
from .models import build_model
from .optim import MilestonePolicy, PlateauPolicy, SGDState, plateau_update, sgd_step
from .tensor import Tape, Tensor, backward
from .utils import derive_seed, seeded_rng

METHODS = ("scratch", "kd_joint", "multiloss", "sskd")


@dataclass(frozen=True)
class TrainPlan:
    """Schedule shared by all methods; per-method phases derive from it.

    An sskd plan runs exactly K stage phases then one head phase; scratch
    and kd_joint run a single phase with the matching total budget
    (K*stage_epochs + head_epochs), multiloss one backbone phase of
    K*stage_epochs plus the same head phase. That keeps optimizer-step
    counts comparable across methods.
    """

    method: str = "sskd"
    stage_epochs: int = 10
    head_epochs: int = 10
    batch_size: int = 64
    initial_lr: float = 0.01
    momentum: float = 0.9
    policy: str = "milestone"
    milestone_fractions: tuple = (0.3, 0.6, 0.9)
    milestone_factor: float = 0.1
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_min_lr: float = 1e-5
    seed: int = 1
    kd: KDSpec = field(default_factory=KDSpec)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.policy not in ("milestone", "plateau"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.stage_epochs < 0 or self.head_epochs < 0:
            raise ConfigError("epoch budgets must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def total_epochs(self, num_stages):
        return num_stages * self.stage_epochs + self.head_epochs


@dataclass
class PhaseReport:
    phase: str
    index: int
    epochs_run: int
    steps: int
    final_lr: float
    loss_trace: list
    lr_trace: list
    seconds: float
    extra: dict = field(default_factory=dict)


def _digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def _run_phase(
    *,
    phase_name,
    phase_index,
    plan,
    params,
    dataset,
    loss_fn,
    max_epochs,
    lr_scale=1.0,
    metrics_cb=None,
    first_batch_probe=None,
):
    """The shared epoch/step loop for one phase.

    ``loss_fn(x, y)`` builds the scalar loss on the active tape.
    ``first_batch_probe(x)`` may record instrumentation from the first batch.
    Schedules run on the nominal rate; ``lr_scale`` converts it to the
    effective step size (mimic phases scale by 1/feature-elements, which is
    exactly MSE-mean behavior under the batch-normalized l2 convention).
    Returns a PhaseReport; the phase's epoch metric is the mean step loss.
    """
    t0 = time.perf_counter()
    for p in params:
        p.clear_grad()
    state = SGDState(params, lr=plan.initial_lr * lr_scale, momentum=plan.momentum)
    milestone = None
    plateau = None
    if plan.policy == "milestone":
        milestone = MilestonePolicy.for_budget(
            max_epochs, plan.milestone_fractions, plan.milestone_factor
        ) if max_epochs > 0 else None
    else:
        plateau = PlateauPolicy(
            initial_lr=plan.initial_lr,
            factor=plan.plateau_factor,
            patience=plan.plateau_patience,
            min_lr=plan.plateau_min_lr,
        ).start()

    loss_trace = []
    lr_trace = []
    steps = 0
    epochs_run = 0
    probe_out = {}
    for epoch in range(max_epochs):
        if milestone is not None:
            state.lr = milestone.lr_at(plan.initial_lr, epoch) * lr_scale
        shuffle_seed = derive_seed(plan.seed, "shuffle", phase_index)
        epoch_sum = 0.0
        n_batches = 0
        for step, (imgs, labels) in enumerate(batches(dataset, plan.batch_size, shuffle_seed, epoch)):
            x = Tensor(imgs)
            if epoch == 0 and step == 0 and first_batch_probe is not None:
                probe_out.update(first_batch_probe(x))
            with Tape() as tape:
                loss = loss_fn(x, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise RunAbort(
                    f"non-finite loss in phase {phase_name!r} epoch {epoch} step {step}"
                )
            backward(tape, loss)
            sgd_step(state, params)
            epoch_sum += value
            steps += 1
            n_batches += 1
        metric = epoch_sum / max(n_batches, 1)
        loss_trace.append(metric)
        lr_trace.append(state.lr)
        epochs_run = epoch + 1
        if metrics_cb is not None:
            metrics_cb(phase_name, epoch, {"loss": metric, "lr": state.lr})
        if plateau is not None:
            nominal, done = plateau_update(plateau, metric)
            state.lr = nominal * lr_scale
            if done:
                break
    return PhaseReport(
        phase=phase_name,
        index=phase_index,
        epochs_run=epochs_run,
        steps=steps,
        final_lr=state.lr,
        loss_trace=loss_trace,
        lr_trace=lr_trace,
        seconds=time.perf_counter() - t0,
        extra=probe_out,
    )


def _freeze_model(model):
    set_frozen(model, model.owner_ids(), True)


def _check_pair(teacher, student):
    if teacher.num_stages != student.num_stages:
        raise ConfigError(
            f"teacher has {teacher.num_stages} stages but student has {student.num_stages}"
        )


def _stage_adapter(teacher, student, stage_index, seed):
    """Adapter for stage ``stage_index`` (1-based), from static geometry."""
    tc = teacher.stage_channels()[stage_index - 1]
    sc = student.stage_channels()[stage_index - 1]
    tr = teacher.stage_resolutions()[stage_index - 1]
    sr = student.stage_resolutions()[stage_index - 1]
    return make_adapter((1, tc) + tr, (1, sc) + sr, seed=derive_seed(seed, "adapter"),
                        stage=stage_index)


def _stage_elements(teacher, stage_index):
    """Per-sample element count of the stage-i mimic target."""
    c = teacher.stage_channels()[stage_index - 1]
    h, w = teacher.stage_resolutions()[stage_index - 1]
    return c * h * w


def train_scratch(model_config, dataset, plan, *, namespace="student", num_stages=None,
                  epochs=None, metrics_cb=None, model=None):
    """Plain task training of all parameters in one phase.

    The default budget matches an sskd run over the model's own stage count
    (K*stage_epochs + head_epochs); ``epochs`` overrides it outright.
    """
    if model is None:
        model = build_model(model_config, derive_seed(plan.seed, namespace, "init"))
    set_frozen(model, model.owner_ids(), False)
    k = num_stages if num_stages is not None else model.num_stages
    params = model.parameters()

    def loss_fn(x, labels):
        return ops.softmax_cross_entropy(model.forward_full(x), labels)

    report = _run_phase(
        phase_name="scratch",
        phase_index=0,
        plan=plan,
        params=params,
        dataset=dataset,
        loss_fn=loss_fn,
        max_epochs=plan.total_epochs(k) if epochs is None else epochs,
        metrics_cb=metrics_cb,
    )
    model.set_inference()
    return model, [report]


def train_kd_joint(teacher, student_config, dataset, plan, *, metrics_cb=None, student=None):
    """Single-phase joint objective: task loss + loss_weight * soft-target KL."""
    if student is None:
        student = build_model(student_config, derive_seed(plan.seed, "student", "init"))
    _freeze_model(teacher)
    set_frozen(student, student.owner_ids(), False)
    params = student.parameters()
    spec = plan.kd

    def loss_fn(x, labels):
        teacher_logits = teacher.forward_full(x)
        student_logits = student.forward_full(x)
        task = ops.softmax_cross_entropy(student_logits, labels)
        soft = kd_loss(teacher_logits, student_logits, spec)
        return joint_kd_objective(task, soft, spec.loss_weight)

    report = _run_phase(
        phase_name="kd_joint",
        phase_index=0,
        plan=plan,
        params=params,
        dataset=dataset,
        loss_fn=loss_fn,
        max_epochs=plan.total_epochs(student.num_stages),
        metrics_cb=metrics_cb,
    )
    student.set_inference()
    return student, [report]


def train_stage_sskd(student, teacher, dataset, stage_index, plan, *, phase_index=None,
                     metrics_cb=None):
    """Minimize the stage-``stage_index`` mimic loss; everything else frozen
    or excluded from the loss path."""
    _check_pair(teacher, student)
    if not 1 <= stage_index <= student.num_stages:
        raise ConfigError(f"stage_index {stage_index} outside [1, {student.num_stages}]")
    phase_index = stage_index - 1 if phase_index is None else phase_index
    # The teacher arrives trained and frozen (the procedure entry points
    # enforce it); its state is not touched here.
    earlier = [f"stage{j}" for j in range(1, stage_index)]
    if earlier:
        set_frozen(student, earlier, True)
    set_frozen(student, [f"stage{stage_index}"], False)
    adapter = _stage_adapter(teacher, student, stage_index, derive_seed(plan.seed, "stage", stage_index))
    params = student.params_of(f"stage{stage_index}") + (adapter.params() if adapter else [])

    def loss_fn(x, labels):
        t_feat = teacher.forward_stages(x, upto=stage_index).final
        s_feat = student.forward_stages(x, upto=stage_index).final
        return mimic_loss(MimicPair(stage_index, t_feat, s_feat, adapter))

    def probe(x):
        # Digest of the feature entering the active stage: shows the phase
        # consumed the trained prefix, not the initialization.
        if stage_index == 1:
            return {"input_digest": _digest(x.data)}
        prefix = student.forward_stages(x, upto=stage_index - 1).final
        return {"input_digest": _digest(prefix.data)}

    return _run_phase(
        phase_name=f"stage{stage_index}",
        phase_index=phase_index,
        plan=plan,
        params=params,
        dataset=dataset,
        loss_fn=loss_fn,
        max_epochs=plan.stage_epochs,
        lr_scale=1.0 / _stage_elements(teacher, stage_index),
        metrics_cb=metrics_cb,
        first_batch_probe=probe,
    )


def train_head(student, dataset, plan, *, phase_index, metrics_cb=None):
    """Re-initialize the head, freeze the whole backbone, fit task loss.

    A zero-epoch budget is a complete no-op (no re-initialization either),
    so zero-budget plans leave the student bit-identical to initialization.
    """
    if plan.head_epochs > 0:
        student.head.reinit(seeded_rng(plan.seed, "head-reinit"))
    set_frozen(student, student.stage_owner_ids(), True)
    set_frozen(student, ["head"], False)
    params = student.params_of("head")

    def loss_fn(x, labels):
        return ops.softmax_cross_entropy(student.forward_full(x), labels)

    return _run_phase(
        phase_name="head",
        phase_index=phase_index,
        plan=plan,
        params=params,
        dataset=dataset,
        loss_fn=loss_fn,
        max_epochs=plan.head_epochs,
        metrics_cb=metrics_cb,
    )


def train_sskd(teacher, student_config, dataset, plan, *, metrics_cb=None, student=None):
    """Stage phases 1..K in order, then the head phase."""
    if student is None:
        student = build_model(student_config, derive_seed(plan.seed, "student", "init"))
    _check_pair(teacher, student)
    _freeze_model(teacher)
    reports = []
    for i in range(1, student.num_stages + 1):
        reports.append(
            train_stage_sskd(student, teacher, dataset, i, plan, phase_index=i - 1,
                             metrics_cb=metrics_cb)
        )
    reports.append(
        train_head(student, dataset, plan, phase_index=student.num_stages, metrics_cb=metrics_cb)
    )
    set_frozen(student, student.owner_ids(), False)
    student.set_inference()
    return student, reports


def train_multiloss(teacher, student_config, dataset, plan, *, metrics_cb=None, student=None):
    """Sum of all stage mimic losses in one backbone phase, then the same
    head phase as sskd. The backbone budget equals the sum of the per-stage
    budgets so comparisons stay step-matched."""
    if student is None:
        student = build_model(student_config, derive_seed(plan.seed, "student", "init"))
    _check_pair(teacher, student)
    _freeze_model(teacher)
    set_frozen(student, student.stage_owner_ids(), False)
    k = student.num_stages
    adapters = {
        i: _stage_adapter(teacher, student, i, derive_seed(plan.seed, "stage", i))
        for i in range(1, k + 1)
    }
    params = [p for o in student.stage_owner_ids() for p in student.params_of(o)]
    for a in adapters.values():
        if a is not None:
            params += a.params()

    def loss_fn(x, labels):
        t_feats = teacher.forward_stages(x, upto=k)
        s_feats = student.forward_stages(x, upto=k)
        total = None
        for i in range(1, k + 1):
            term = mimic_loss(MimicPair(i, t_feats[i - 1], s_feats[i - 1], adapters[i]))
            total = term if total is None else ops.add(total, term)
        return total

    reports = [
        _run_phase(
            phase_name="backbone",
            phase_index=0,
            plan=plan,
            params=params,
            dataset=dataset,
            loss_fn=loss_fn,
            max_epochs=k * plan.stage_epochs,
            lr_scale=1.0 / sum(_stage_elements(teacher, i) for i in range(1, k + 1)),
            metrics_cb=metrics_cb,
        )
    ]
    reports.append(train_head(student, dataset, plan, phase_index=1, metrics_cb=metrics_cb))
    set_frozen(student, student.owner_ids(), False)
    student.set_inference()
    return student, reports
