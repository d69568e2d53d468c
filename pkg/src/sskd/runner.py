"""Execute one run from a RunConfig: data, teacher, method, artifacts.

A run directory receives ``config.txt`` (the canonical config), a
``metrics.jsonl`` stream, the final ``student.ckpt`` (+ sidecar), a
trained ``teacher.ckpt`` when the teacher was trained in-run, and
``report.json``. A (config, code) pair determines every artifact except
wall-clock fields. Runs never reuse a non-empty directory.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import channel_stats, gen_synthetic, load_binary
from .errors import ConfigError, UsageError
from .metrics import MetricsWriter
from .models import build_model, repartition
from .tensor import Tensor
from .training import (
    train_kd_joint,
    train_multiloss,
    train_scratch,
    train_sskd,
)
from .utils import derive_seed

OUTPUT_ROOT_ENV = "SSKD_OUTPUT_ROOT"


def resolve_output_dir(config, output_root=None):
    if config.output_dir is None:
        raise ConfigError("config has no output_dir")
    path = Path(config.output_dir)
    if not path.is_absolute():
        root = Path(output_root or os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        path = root / path
    return path


def _prepare_dir(path):
    if path.exists() and any(path.iterdir()):
        raise UsageError(f"output directory {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)


def load_dataset(config):
    if config.dataset_kind == "synthetic":
        return gen_synthetic(config.synthetic)
    train = load_binary(config.train_path, split="train")
    test = load_binary(config.test_path, split="test")
    if train.num_classes != test.num_classes:
        raise ConfigError(
            f"train has {train.num_classes} classes but test has {test.num_classes}"
        )
    return train, test


def evaluate(model, dataset, batch_size=256):
    """(top1 %, top5 %) with k capped at the class count."""
    model.set_inference()
    k = min(5, dataset.num_classes)
    hits1 = 0
    hitsk = 0
    for at in range(0, len(dataset), batch_size):
        x = Tensor(dataset.images[at : at + batch_size])
        labels = dataset.labels[at : at + batch_size]
        logits = model.forward_full(x).data
        top1 = logits.argmax(axis=1)
        hits1 += int(np.sum(top1 == labels))
        topk = np.argpartition(-logits, kth=k - 1, axis=1)[:, :k]
        hitsk += int(np.sum(np.any(topk == labels[:, None], axis=1)))
    n = len(dataset)
    return 100.0 * hits1 / n, 100.0 * hitsk / n


def eval_checkpoint(checkpoint_path, dataset):
    model = load_checkpoint(checkpoint_path)
    if tuple(model.config.input_hw) != dataset.resolution or (
        model.config.input_channels != dataset.channels
    ):
        raise ConfigError(
            f"checkpoint expects {model.config.input_hw}x{model.config.input_channels} "
            f"input, dataset is {dataset.resolution}x{dataset.channels}"
        )
    return evaluate(model, dataset)


def _geometry(train):
    return train.resolution, train.channels, train.num_classes


def prepare_teacher(config, train, run_dir=None, metrics_cb=None):
    """Load the teacher checkpoint, or train one from scratch and save it."""
    hw, channels, classes = _geometry(train)
    if config.teacher_checkpoint is not None:
        teacher = load_checkpoint(config.teacher_checkpoint)
        if teacher.config.num_classes != classes or tuple(teacher.config.input_hw) != hw:
            raise ConfigError("teacher checkpoint does not match the dataset geometry")
        return teacher, None
    mc = config.teacher_arch.model_config(hw, channels, classes)
    plan = config.plan()
    mean, std = channel_stats(train)
    teacher = build_model(mc, derive_seed(plan.seed, "teacher", "init"))
    teacher.set_normalization(mean, std)
    teacher, reports = train_scratch(
        mc, train, plan, namespace="teacher", epochs=config.teacher_epochs,
        metrics_cb=metrics_cb, model=teacher,
    )
    if run_dir is not None:
        save_checkpoint(teacher, Path(run_dir) / "teacher.ckpt")
    return teacher, reports


def _phase_summary(report):
    return {
        "phase": report.phase,
        "epochs": report.epochs_run,
        "steps": report.steps,
        "final_lr": report.final_lr,
        "first_loss": report.loss_trace[0] if report.loss_trace else None,
        "last_loss": report.loss_trace[-1] if report.loss_trace else None,
        "seconds": round(report.seconds, 3),
        **report.extra,
    }


def run(config, output_root=None):
    """Execute the configured method end to end; returns the report dict."""
    if isinstance(config, (str, Path)):
        config = load_config(config)
    run_dir = resolve_output_dir(config, output_root)
    _prepare_dir(run_dir)
    (run_dir / "config.txt").write_text(config.canonical_text())
    run_id = config.run_id()

    t0 = time.time()
    train, test = load_dataset(config)
    hw, channels, classes = _geometry(train)
    mean, std = channel_stats(train)
    plan = config.plan()

    with MetricsWriter(run_dir / "metrics.jsonl", run_id) as writer:

        def metrics_cb(phase, epoch, scalars):
            writer.write(phase, epoch, scalars)

        teacher = None
        teacher_reports = None
        if config.method != "scratch":
            teacher, teacher_reports = prepare_teacher(
                config, train, run_dir=run_dir,
                metrics_cb=lambda ph, ep, sc: writer.write(f"teacher-{ph}", ep, sc),
            )

        student_mc = config.student_arch.model_config(hw, channels, classes)
        student = build_model(student_mc, derive_seed(plan.seed, "student", "init"))
        student.set_normalization(mean, std)
        if config.stages is not None:
            student = repartition(student, config.stages)
            if teacher is not None:
                teacher = repartition(teacher, config.stages)

        if config.method == "scratch":
            student, reports = train_scratch(
                student_mc, train, plan, metrics_cb=metrics_cb, model=student
            )
        elif config.method == "kd_joint":
            student, reports = train_kd_joint(
                teacher, student_mc, train, plan, metrics_cb=metrics_cb, student=student
            )
        elif config.method == "multiloss":
            student, reports = train_multiloss(
                teacher, student_mc, train, plan, metrics_cb=metrics_cb, student=student
            )
        else:
            student, reports = train_sskd(
                teacher, student_mc, train, plan, metrics_cb=metrics_cb, student=student
            )

    save_checkpoint(student, run_dir / "student.ckpt")
    train_top1, train_top5 = evaluate(student, train)
    test_top1, test_top5 = evaluate(student, test)

    report = {
        "run_id": run_id,
        "version": __version__,
        "method": config.method,
        "seed": config.seed,
        "stages": student.num_stages,
        "dataset": {
            "kind": config.dataset_kind,
            "classes": classes,
            "train_samples": len(train),
            "test_samples": len(test),
            "resolution": list(hw),
        },
        "normalization": {"mean": mean.tolist(), "std": std.tolist()},
        "kd": {
            "temperature": config.kd.temperature,
            "loss_weight": config.kd.loss_weight,
            "t2_rescale": config.kd.t2_rescale,
        },
        "teacher": {
            "source": config.teacher_checkpoint or "trained-in-run",
            "phases": [_phase_summary(r) for r in (teacher_reports or [])],
        }
        if config.method != "scratch"
        else None,
        "phases": [_phase_summary(r) for r in reports],
        "optimizer_steps": sum(r.steps for r in reports),
        "eval": {
            "train_top1": train_top1,
            "train_top5": train_top5,
            "test_top1": test_top1,
            "test_top5": test_top5,
        },
        "seconds": round(time.time() - t0, 3),
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
