"""Paired-run experiment recipes at desk scale.

Each recipe executes a comparison protocol over several seeds, reusing one
trained teacher where a teacher is needed, and emits ``recipe.json`` plus a
plain-text table. Results always list per-seed values and their mean.

Recipes:
  separate-head     end-to-end training vs retraining a re-initialized head
                    on the frozen backbone (near-equality claim)
  multiloss-vs-sskd summed-stage-loss baseline vs stage-by-stage training,
                    per stage count
  stage-count       stage-by-stage accuracy as the stage count grows, with
                    an explicit monotone-trend flag
  teacher-zoo       one student distilled from teachers of different sizes
"""

from __future__ import annotations

import json
import statistics
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ArchSpec, RunConfig, parse_config
from .errors import UsageError
from .runner import (
    _prepare_dir,
    evaluate,
    load_dataset,
    prepare_teacher,
    resolve_output_dir,
    run,
)
from .training import train_head

RECIPES = ("separate-head", "multiloss-vs-sskd", "stage-count", "teacher-zoo")
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
DEFAULT_STAGE_COUNTS = (1, 2, 4)
TEACHER_ARCH_KEYS = ("teacher.family", "teacher.stage_widths", "teacher.blocks_per_stage")

WIDE_TEACHER = ArchSpec(
    family="residual-cnn", stage_widths=(12, 24, 48, 96), blocks_per_stage=(2, 2, 2, 2)
)


def default_config():
    return parse_config("")


def _mean(xs):
    return statistics.fmean(xs)


def _train_shared_teacher(base, recipe_dir, arch=None):
    """Train (or load) one teacher for every run in a recipe."""
    cfg = base
    if arch is not None:
        cfg = base.with_overrides(
            {
                "teacher.family": arch.family,
                "teacher.stage_widths": arch.stage_widths,
                "teacher.blocks_per_stage": arch.blocks_per_stage,
            },
            drop=("teacher.checkpoint",),
        )
    if cfg.teacher_checkpoint is not None:
        return cfg.teacher_checkpoint
    train, _ = load_dataset(cfg)
    teacher, _ = prepare_teacher(cfg, train)
    name = "teacher.ckpt" if arch is None else f"teacher-{arch.stage_widths[0]}.ckpt"
    path = recipe_dir / name
    save_checkpoint(teacher, path)
    return str(path)


def _student_run(base, method, seed, out_dir, teacher_ckpt=None, stages=None, output_root=None):
    values = {"method": method, "seed": seed, "output_dir": str(out_dir)}
    drop = list(TEACHER_ARCH_KEYS)
    if method == "scratch":
        drop.append("teacher.checkpoint")
    elif teacher_ckpt is not None:
        values["teacher.checkpoint"] = teacher_ckpt
    if stages is not None:
        values["plan.stages"] = stages
    else:
        drop.append("plan.stages")
    cfg = base.with_overrides(values, drop=tuple(drop))
    return run(cfg, output_root=output_root)


def _write_report(recipe_dir, report, table_lines):
    (recipe_dir / "recipe.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (recipe_dir / "table.txt").write_text("\n".join(table_lines) + "\n")
    return report


def _recipe_separate_head(base, recipe_dir, seeds, output_root, **_):
    train, test = load_dataset(base)
    rows = []
    for seed in seeds:
        run_dir = recipe_dir / f"scratch-s{seed}"
        report = _student_run(base, "scratch", seed, run_dir, output_root=output_root)
        end_to_end = report["eval"]["test_top1"]
        model = load_checkpoint(run_dir / "student.ckpt")
        plan = base.with_overrides({"seed": seed}).plan()
        train_head(model, train, plan, phase_index=1)
        retrained_top1, _ = evaluate(model, test)
        rows.append(
            {
                "seed": seed,
                "end_to_end_top1": end_to_end,
                "retrained_head_top1": retrained_top1,
                "difference": retrained_top1 - end_to_end,
            }
        )
    mean_diff = _mean([r["difference"] for r in rows])
    report = {
        "recipe": "separate-head",
        "seeds": list(seeds),
        "rows": rows,
        "mean_end_to_end": _mean([r["end_to_end_top1"] for r in rows]),
        "mean_retrained": _mean([r["retrained_head_top1"] for r in rows]),
        "mean_difference": mean_diff,
        "mean_abs_difference": _mean([abs(r["difference"]) for r in rows]),
    }
    lines = ["seed  end-to-end  retrained-head  diff"]
    for r in rows:
        lines.append(
            f"{r['seed']:>4}  {r['end_to_end_top1']:>10.2f}  "
            f"{r['retrained_head_top1']:>14.2f}  {r['difference']:>+5.2f}"
        )
    lines.append(f"mean  {report['mean_end_to_end']:>10.2f}  "
                 f"{report['mean_retrained']:>14.2f}  {mean_diff:>+5.2f}")
    return _write_report(recipe_dir, report, lines)


def _recipe_multiloss_vs_sskd(base, recipe_dir, seeds, output_root, stage_counts, **_):
    teacher_ckpt = _train_shared_teacher(base, recipe_dir)
    rows = []
    for k in stage_counts:
        ml = [
            _student_run(base, "multiloss", s, recipe_dir / f"multiloss-k{k}-s{s}",
                         teacher_ckpt, stages=k, output_root=output_root)["eval"]["test_top1"]
            for s in seeds
        ]
        sk = [
            _student_run(base, "sskd", s, recipe_dir / f"sskd-k{k}-s{s}",
                         teacher_ckpt, stages=k, output_root=output_root)["eval"]["test_top1"]
            for s in seeds
        ]
        rows.append(
            {
                "stages": k,
                "multiloss_top1": ml,
                "sskd_top1": sk,
                "multiloss_mean": _mean(ml),
                "sskd_mean": _mean(sk),
                "improvement": _mean(sk) - _mean(ml),
            }
        )
    report = {
        "recipe": "multiloss-vs-sskd",
        "seeds": list(seeds),
        "teacher_checkpoint": teacher_ckpt,
        "rows": rows,
    }
    lines = ["stages  multiloss  sskd   improv"]
    for r in rows:
        lines.append(
            f"{r['stages']:>6}  {r['multiloss_mean']:>9.2f}  {r['sskd_mean']:>5.2f} "
            f"{r['improvement']:>+7.2f}"
        )
    return _write_report(recipe_dir, report, lines)


def _recipe_stage_count(base, recipe_dir, seeds, output_root, stage_counts, **_):
    teacher_ckpt = _train_shared_teacher(base, recipe_dir)
    scratch = [
        _student_run(base, "scratch", s, recipe_dir / f"scratch-s{s}",
                     output_root=output_root)["eval"]["test_top1"]
        for s in seeds
    ]
    scratch_mean = _mean(scratch)
    rows = []
    for k in sorted(stage_counts):
        vals = [
            _student_run(base, "sskd", s, recipe_dir / f"sskd-k{k}-s{s}",
                         teacher_ckpt, stages=k, output_root=output_root)["eval"]["test_top1"]
            for s in seeds
        ]
        rows.append(
            {
                "stages": k,
                "top1": vals,
                "top1_mean": _mean(vals),
                "improvement_over_scratch": _mean(vals) - scratch_mean,
            }
        )
    means = [r["top1_mean"] for r in rows]
    monotone = all(a <= b + 1e-9 for a, b in zip(means, means[1:]))
    report = {
        "recipe": "stage-count",
        "seeds": list(seeds),
        "teacher_checkpoint": teacher_ckpt,
        "scratch_top1": scratch,
        "scratch_mean": scratch_mean,
        "rows": rows,
        "monotone_nondecreasing": monotone,
    }
    lines = [f"scratch baseline: {scratch_mean:.2f}", "stages  top1-mean  improv"]
    for r in rows:
        lines.append(
            f"{r['stages']:>6}  {r['top1_mean']:>9.2f}  {r['improvement_over_scratch']:>+6.2f}"
        )
    lines.append(f"monotone nondecreasing over stages: {monotone}")
    return _write_report(recipe_dir, report, lines)


def _recipe_teacher_zoo(base, recipe_dir, seeds, output_root, teachers=None, **_):
    if teachers is None:
        teachers = [("base", base.teacher_arch or default_config().teacher_arch),
                    ("wide", WIDE_TEACHER)]
    scratch = [
        _student_run(base, "scratch", s, recipe_dir / f"scratch-s{s}",
                     output_root=output_root)["eval"]["test_top1"]
        for s in seeds
    ]
    scratch_mean = _mean(scratch)
    _, test = load_dataset(base)
    rows = []
    for name, arch in teachers:
        ckpt = _train_shared_teacher(base, recipe_dir, arch=arch)
        teacher_top1, _ = evaluate(load_checkpoint(ckpt), test)
        vals = [
            _student_run(base, "sskd", s, recipe_dir / f"sskd-{name}-s{s}",
                         ckpt, output_root=output_root)["eval"]["test_top1"]
            for s in seeds
        ]
        rows.append(
            {
                "teacher": name,
                "teacher_arch": repr(arch.stage_widths),
                "teacher_top1": teacher_top1,
                "student_top1": vals,
                "student_mean": _mean(vals),
                "improvement": _mean(vals) - scratch_mean,
            }
        )
    report = {
        "recipe": "teacher-zoo",
        "seeds": list(seeds),
        "scratch_mean": scratch_mean,
        "rows": rows,
    }
    lines = [f"scratch baseline: {scratch_mean:.2f}",
             "teacher  teacher-top1  student-mean  improv"]
    for r in rows:
        lines.append(
            f"{r['teacher']:>7}  {r['teacher_top1']:>12.2f}  {r['student_mean']:>12.2f} "
            f"{r['improvement']:>+7.2f}"
        )
    return _write_report(recipe_dir, report, lines)


_RUNNERS = {
    "separate-head": _recipe_separate_head,
    "multiloss-vs-sskd": _recipe_multiloss_vs_sskd,
    "stage-count": _recipe_stage_count,
    "teacher-zoo": _recipe_teacher_zoo,
}


def recipe(name, base=None, output_dir=None, seeds=DEFAULT_SEEDS,
           stage_counts=DEFAULT_STAGE_COUNTS, teachers=None, output_root=None):
    """Execute one named recipe; returns its report dict."""
    if name not in RECIPES:
        raise UsageError(f"unknown recipe {name!r}; choose from {RECIPES}")
    base = base if base is not None else default_config()
    if output_dir is not None:
        base = base.with_overrides({"output_dir": str(output_dir)})
    recipe_dir = resolve_output_dir(base, output_root)
    _prepare_dir(recipe_dir)
    return _RUNNERS[name](
        base,
        recipe_dir,
        seeds=tuple(seeds),
        output_root=output_root,
        stage_counts=tuple(stage_counts),
        teachers=teachers,
    )
