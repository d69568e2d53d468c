"""Loss-weight sensitivity sweep: joint-KD runs over a weight grid plus one
weight-free stage-distillation reference, with CSV and SVG emission.

All points share one teacher (trained once) and one seed, so the weight is
the only thing varying across the KD column.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import channel_stats
from .errors import UsageError
from .plotting import write_sweep_svg
from .runner import _prepare_dir, load_dataset, prepare_teacher, resolve_output_dir, run

TEACHER_ARCH_KEYS = ("teacher.family", "teacher.stage_widths", "teacher.blocks_per_stage")


def sweep_loss_weight(base, loss_weights, output_root=None):
    """One kd_joint run per weight plus one sskd run; returns the table.

    Emits ``sweep.csv`` (columns loss_weight, top1, top5, method; the sskd
    row carries the marker ``free``) and ``sweep.svg`` with one point per
    weight and a horizontal sskd reference line.
    """
    if base.method != "kd_joint":
        raise UsageError(f"sweep needs a kd_joint base config, got {base.method!r}")
    weights = [float(w) for w in loss_weights]
    if not weights:
        raise UsageError("empty loss-weight list")

    sweep_dir = resolve_output_dir(base, output_root)
    _prepare_dir(sweep_dir)

    if base.teacher_checkpoint is not None:
        teacher_ckpt = base.teacher_checkpoint
    else:
        train, _ = load_dataset(base)
        teacher, _ = prepare_teacher(base, train)
        teacher_ckpt = str(sweep_dir / "teacher.ckpt")
        save_checkpoint(teacher, teacher_ckpt)

    rows = []
    for w in weights:
        cfg = base.with_overrides(
            {
                "kd.loss_weight": w,
                "teacher.checkpoint": teacher_ckpt,
                "output_dir": str(sweep_dir / f"kd_lw{w:g}"),
            },
            drop=TEACHER_ARCH_KEYS,
        )
        report = run(cfg, output_root=output_root)
        rows.append(
            {
                "loss_weight": w,
                "top1": report["eval"]["test_top1"],
                "top5": report["eval"]["test_top5"],
                "method": "kd_joint",
            }
        )

    sskd_cfg = base.with_overrides(
        {
            "method": "sskd",
            "teacher.checkpoint": teacher_ckpt,
            "output_dir": str(sweep_dir / "sskd"),
        },
        drop=TEACHER_ARCH_KEYS,
    )
    sskd_report = run(sskd_cfg, output_root=output_root)
    sskd_row = {
        "loss_weight": "free",
        "top1": sskd_report["eval"]["test_top1"],
        "top5": sskd_report["eval"]["test_top5"],
        "method": "sskd",
    }
    rows.append(sskd_row)

    csv_path = sweep_dir / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["loss_weight", "top1", "top5", "method"])
        writer.writeheader()
        writer.writerows(rows)

    kd_rows = rows[:-1]
    write_sweep_svg(
        [(r["loss_weight"], r["top1"]) for r in kd_rows],
        sskd_row["top1"],
        sweep_dir / "sweep.svg",
    )
    spread = max(r["top1"] for r in kd_rows) - min(r["top1"] for r in kd_rows)
    summary = {
        "weights": weights,
        "kd_top1": [r["top1"] for r in kd_rows],
        "kd_top1_spread": spread,
        "sskd_top1": sskd_row["top1"],
        "csv": str(csv_path),
        "svg": str(sweep_dir / "sweep.svg"),
    }
    (sweep_dir / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def read_sweep_csv(path):
    """(kd points, sskd reference) parsed back from a sweep CSV."""
    points = []
    reference = None
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["method"] == "sskd" or row["loss_weight"] == "free":
                reference = float(row["top1"])
            else:
                points.append((float(row["loss_weight"]), float(row["top1"])))
    if reference is None or not points:
        raise UsageError(f"{path} is not a sweep table (need kd rows + an sskd row)")
    return points, reference
