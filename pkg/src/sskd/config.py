"""Run configuration: a flat dotted-key text format with a closed schema.

One ``key = value`` pair per line; ``#`` starts a comment. Dots group keys
(dataset.*, teacher.*, student.*, plan.*, kd.*). Unknown keys are errors:
a silent typo in a loss weight or temperature would corrupt comparisons.

The full schema with defaults is ``SCHEMA`` below; ``parse_config`` returns
a RunConfig, and ``format_config`` emits canonical text (used by the sweep
to derive per-point configs).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .distill import KDSpec
from .errors import ConfigError
from .models import ModelConfig
from .training import METHODS, TrainPlan

_UNSET = object()


def _parse_bool(s):
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _parse_floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


# key -> (parser, default); _UNSET means "no default, optional"
SCHEMA = {
    "method": (str, "sskd"),
    "seed": (int, 1),
    "output_dir": (str, _UNSET),
    "dataset.kind": (str, "synthetic"),
    "dataset.num_classes": (int, 10),
    "dataset.samples_per_class": (int, 200),
    "dataset.resolution": (int, 32),
    "dataset.noise_std": (float, 0.3),
    "dataset.seed": (int, 1),
    "dataset.train_path": (str, _UNSET),
    "dataset.test_path": (str, _UNSET),
    "teacher.checkpoint": (str, _UNSET),
    "teacher.family": (str, _UNSET),
    "teacher.stage_widths": (_parse_ints, _UNSET),
    "teacher.blocks_per_stage": (_parse_ints, _UNSET),
    "teacher.epochs": (int, 30),
    "student.family": (str, "residual-cnn"),
    "student.stage_widths": (_parse_ints, (4, 8, 16, 32)),
    "student.blocks_per_stage": (_parse_ints, (1, 1, 1, 1)),
    "plan.stages": (int, _UNSET),
    "plan.stage_epochs": (int, 10),
    "plan.head_epochs": (int, 10),
    "plan.batch_size": (int, 64),
    "plan.initial_lr": (float, 0.01),
    "plan.momentum": (float, 0.9),
    "plan.policy": (str, "milestone"),
    "plan.milestone_fractions": (_parse_floats, (0.3, 0.6, 0.9)),
    "plan.milestone_factor": (float, 0.1),
    "plan.plateau_factor": (float, 0.1),
    "plan.plateau_patience": (int, 3),
    "plan.plateau_min_lr": (float, 1e-5),
    "kd.temperature": (float, 4.0),
    "kd.loss_weight": (float, 10.0),
    "kd.t2_rescale": (_parse_bool, True),
}

# Desk-scale reference teacher; applied only to distillation methods when
# no teacher source is given.
DEFAULT_TEACHER = {
    "teacher.family": "residual-cnn",
    "teacher.stage_widths": (8, 16, 32, 64),
    "teacher.blocks_per_stage": (2, 2, 2, 2),
}


@dataclass(frozen=True)
class ArchSpec:
    family: str
    stage_widths: tuple
    blocks_per_stage: tuple

    def model_config(self, input_hw, input_channels, num_classes):
        return ModelConfig(
            family=self.family,
            input_hw=input_hw,
            input_channels=input_channels,
            num_classes=num_classes,
            stage_widths=self.stage_widths,
            blocks_per_stage=self.blocks_per_stage,
        )


@dataclass(frozen=True)
class RunConfig:
    method: str
    seed: int
    output_dir: str | None
    dataset_kind: str
    synthetic: SyntheticSpec | None
    train_path: str | None
    test_path: str | None
    teacher_arch: ArchSpec | None
    teacher_checkpoint: str | None
    teacher_epochs: int
    student_arch: ArchSpec
    stages: int | None
    kd: KDSpec
    plan_fields: tuple  # canonical (key, value) pairs for TrainPlan

    def plan(self):
        fields = dict(self.plan_fields)
        return TrainPlan(method=self.method, kd=self.kd, seed=self.seed, **fields)

    def canonical_text(self):
        return format_config(self.to_values())

    def run_id(self):
        """Digest of the experiment content; where it is written does not
        change what it computes, so output_dir stays out of the hash."""
        vals = self.to_values()
        vals.pop("output_dir", None)
        return hashlib.sha256(format_config(vals).encode()).hexdigest()[:12]

    def to_values(self):
        """The explicit key -> value map (defaults resolved)."""
        vals = {
            "method": self.method,
            "seed": self.seed,
            "dataset.kind": self.dataset_kind,
            "student.family": self.student_arch.family,
            "student.stage_widths": self.student_arch.stage_widths,
            "student.blocks_per_stage": self.student_arch.blocks_per_stage,
            "teacher.epochs": self.teacher_epochs,
            "kd.temperature": self.kd.temperature,
            "kd.loss_weight": self.kd.loss_weight,
            "kd.t2_rescale": self.kd.t2_rescale,
        }
        if self.output_dir is not None:
            vals["output_dir"] = self.output_dir
        if self.synthetic is not None:
            vals["dataset.num_classes"] = self.synthetic.num_classes
            vals["dataset.samples_per_class"] = self.synthetic.samples_per_class
            vals["dataset.resolution"] = self.synthetic.resolution
            vals["dataset.noise_std"] = self.synthetic.noise_std
            vals["dataset.seed"] = self.synthetic.seed
        if self.train_path is not None:
            vals["dataset.train_path"] = self.train_path
        if self.test_path is not None:
            vals["dataset.test_path"] = self.test_path
        if self.teacher_checkpoint is not None:
            vals["teacher.checkpoint"] = self.teacher_checkpoint
        if self.teacher_arch is not None:
            vals["teacher.family"] = self.teacher_arch.family
            vals["teacher.stage_widths"] = self.teacher_arch.stage_widths
            vals["teacher.blocks_per_stage"] = self.teacher_arch.blocks_per_stage
        if self.stages is not None:
            vals["plan.stages"] = self.stages
        vals.update(dict(self.plan_fields_named()))
        return vals

    def plan_fields_named(self):
        return [(f"plan.{k}", v) for k, v in self.plan_fields]

    def with_overrides(self, values=None, drop=()):
        """A new RunConfig with flat keys replaced and/or removed.

        e.g. ``cfg.with_overrides({"kd.loss_weight": 5.0}, drop=("teacher.family",))``
        """
        vals = self.to_values()
        for key in drop:
            vals.pop(key, None)
        vals.update(values or {})
        return parse_config(format_config(vals))


def parse_config_values(text):
    """Text -> validated flat key/value map (defaults not applied)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return values


def _resolved(values):
    out = {}
    for key, (_, default) in SCHEMA.items():
        if key in values:
            out[key] = values[key]
        elif default is not _UNSET:
            out[key] = default
    return out


def parse_config(text):
    given = parse_config_values(text)
    v = _resolved(given)

    method = v["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")

    teacher_keys = [k for k in given if k.startswith("teacher.") and k != "teacher.epochs"]
    needs_teacher = method != "scratch"
    if not needs_teacher and teacher_keys:
        raise ConfigError(f"method 'scratch' takes no teacher keys, got {teacher_keys}")
    teacher_checkpoint = v.get("teacher.checkpoint")
    arch_keys = ("teacher.family", "teacher.stage_widths", "teacher.blocks_per_stage")
    has_arch = any(k in given for k in arch_keys)
    if teacher_checkpoint is not None and has_arch:
        raise ConfigError("give either teacher.checkpoint or a teacher architecture, not both")
    teacher_arch = None
    if needs_teacher and teacher_checkpoint is None:
        src = {k: given.get(k, DEFAULT_TEACHER[k]) for k in arch_keys}
        teacher_arch = ArchSpec(
            family=src["teacher.family"],
            stage_widths=tuple(src["teacher.stage_widths"]),
            blocks_per_stage=tuple(src["teacher.blocks_per_stage"]),
        )

    kind = v["dataset.kind"]
    if kind == "synthetic":
        synthetic = SyntheticSpec(
            num_classes=v["dataset.num_classes"],
            samples_per_class=v["dataset.samples_per_class"],
            resolution=v["dataset.resolution"],
            noise_std=v["dataset.noise_std"],
            seed=v["dataset.seed"],
        )
        train_path = test_path = None
    elif kind == "file":
        synthetic = None
        train_path = v.get("dataset.train_path")
        test_path = v.get("dataset.test_path")
        if not train_path or not test_path:
            raise ConfigError("dataset.kind=file requires dataset.train_path and dataset.test_path")
    else:
        raise ConfigError(f"unknown dataset.kind {kind!r}")

    plan_fields = tuple(
        (k.split(".", 1)[1], v[k])
        for k in SCHEMA
        if k.startswith("plan.") and k != "plan.stages" and k in v
    )
    cfg = RunConfig(
        method=method,
        seed=v["seed"],
        output_dir=v.get("output_dir"),
        dataset_kind=kind,
        synthetic=synthetic,
        train_path=train_path,
        test_path=test_path,
        teacher_arch=teacher_arch,
        teacher_checkpoint=teacher_checkpoint,
        teacher_epochs=v["teacher.epochs"],
        student_arch=ArchSpec(
            family=v["student.family"],
            stage_widths=tuple(v["student.stage_widths"]),
            blocks_per_stage=tuple(v["student.blocks_per_stage"]),
        ),
        stages=v.get("plan.stages"),
        kd=KDSpec(
            temperature=v["kd.temperature"],
            loss_weight=v["kd.loss_weight"],
            t2_rescale=v["kd.t2_rescale"],
        ),
        plan_fields=plan_fields,
    )
    cfg.plan()  # surface plan validation errors now
    return cfg


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(values):
    """Canonical text: schema order, one key per line."""
    unknown = [k for k in values if k not in SCHEMA]
    if unknown:
        raise ConfigError(f"unknown keys: {unknown}")
    lines = [f"{key} = {_format_value(values[key])}" for key in SCHEMA if key in values]
    return "\n".join(lines) + "\n"
