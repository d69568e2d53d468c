"""Config parsing, checkpoints, runs, eval, sweep structure, CLI."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sskd.checkpoint import (
    export_features,
    load_checkpoint,
    load_features,
    read_tensor_file,
    save_checkpoint,
)
from sskd.config import format_config, load_config, parse_config
from sskd.data import SyntheticSpec, gen_synthetic, save_binary
from sskd.errors import ConfigError, ParseError, UsageError, ValidationError
from sskd.metrics import read_metrics, strip_wall
from sskd.models import build_model
from sskd.runner import evaluate, eval_checkpoint, run
from sskd.sweep import read_sweep_csv, sweep_loss_weight

from test_models import tiny_config

TINY_RUN = """
method = scratch
seed = 3
dataset.num_classes = 4
dataset.samples_per_class = 8
dataset.resolution = 16
dataset.noise_std = 0.0
dataset.seed = 2
student.stage_widths = 4,8
student.blocks_per_stage = 1,1
plan.stage_epochs = 4
plan.head_epochs = 4
plan.batch_size = 8
"""

TINY_SSKD = (
    TINY_RUN.replace("method = scratch", "method = sskd")
    .replace("dataset.noise_std = 0.0", "dataset.noise_std = 0.1")
    + """
teacher.stage_widths = 8,16
teacher.blocks_per_stage = 1,1
teacher.epochs = 6
"""
)


class TestConfigFormat:
    def test_defaults_round_trip(self):
        cfg = parse_config("")
        again = parse_config(cfg.canonical_text())
        assert again.canonical_text() == cfg.canonical_text()
        assert cfg.method == "sskd"
        assert cfg.student_arch.stage_widths == (4, 8, 16, 32)

    def test_unknown_key_rejected_with_name(self):
        with pytest.raises(ConfigError, match="kd.loss_wieght"):
            parse_config("kd.loss_wieght = 5")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("seed = 1\nseed = 2")

    def test_bad_value_names_line(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("seed = banana")

    def test_scratch_with_teacher_keys_rejected(self):
        with pytest.raises(ConfigError, match="scratch"):
            parse_config("method = scratch\nteacher.family = residual-cnn")

    def test_checkpoint_and_arch_together_rejected(self):
        with pytest.raises(ConfigError, match="not both"):
            parse_config("teacher.checkpoint = t.ckpt\nteacher.family = plain-cnn")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\nseed = 9  # trailing\n")
        assert cfg.seed == 9

    def test_overrides_change_run_id(self):
        cfg = parse_config(TINY_RUN)
        other = cfg.with_overrides({"seed": 4})
        assert cfg.run_id() != other.run_id()


class TestCheckpoint:
    def test_round_trip_bytes_and_values(self, tmp_path):
        model = build_model(tiny_config(), seed=5)
        model.set_normalization(np.array([0.5]), np.array([0.25]))
        p1 = tmp_path / "m.ckpt"
        save_checkpoint(model, p1)
        loaded = load_checkpoint(p1)
        assert loaded.state_digest() == model.state_digest()
        p2 = tmp_path / "again.ckpt"
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_digest_mismatch_rejected(self, tmp_path):
        a = build_model(tiny_config(), seed=1)
        b = build_model(tiny_config(widths=(8, 8)), seed=1)
        p = tmp_path / "a.ckpt"
        save_checkpoint(a, p)
        with pytest.raises(ValidationError, match="digest"):
            load_checkpoint(p, model=b)

    def test_truncated_checkpoint_located(self, tmp_path):
        model = build_model(tiny_config(), seed=1)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(ParseError, match="truncated") as err:
            read_tensor_file(p)
        assert err.value.offset is not None

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "m.ckpt"
        p.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(ParseError, match="magic"):
            read_tensor_file(p)

    def test_no_adapter_tensors_in_checkpoint(self, tmp_path):
        model = build_model(tiny_config(), seed=1)
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        _, tensors = read_tensor_file(p)
        assert not [n for n in tensors if "adapter" in n]
        assert any(n.endswith("running_mean") for n in tensors)


class TestEvaluate:
    def test_random_model_sits_at_chance(self):
        spec = SyntheticSpec(num_classes=10, samples_per_class=100, resolution=16,
                             noise_std=0.3, seed=1)
        _, test = gen_synthetic(spec)
        model = build_model(tiny_config(widths=(4, 8), blocks=(1, 1), classes=10), seed=77)
        top1, top5 = evaluate(model, test)
        assert 7.0 <= top1 <= 13.0
        assert top5 >= top1

    def test_top5_is_total_when_five_or_fewer_classes(self):
        spec = SyntheticSpec(num_classes=4, samples_per_class=10, resolution=16,
                             noise_std=0.2, seed=1)
        _, test = gen_synthetic(spec)
        model = build_model(tiny_config(classes=4), seed=3)
        _, top5 = evaluate(model, test)
        assert top5 == 100.0


class TestRun:
    def test_scratch_on_noiseless_data_reaches_full_train_accuracy(self, tmp_path):
        cfg = parse_config(TINY_RUN + f"output_dir = {tmp_path / 'r1'}\n")
        report = run(cfg)
        assert report["eval"]["train_top1"] == 100.0
        run_dir = tmp_path / "r1"
        assert (run_dir / "config.txt").exists()
        assert (run_dir / "student.ckpt").exists()
        assert (run_dir / "report.json").exists()
        records = read_metrics(run_dir / "metrics.jsonl")
        assert records and all(r["run"] == report["run_id"] for r in records)

    def test_identical_configs_produce_identical_artifacts(self, tmp_path):
        r1 = run(parse_config(TINY_SSKD + f"output_dir = {tmp_path / 'a'}\n"))
        r2 = run(parse_config(TINY_SSKD + f"output_dir = {tmp_path / 'b'}\n"))
        ck1 = (tmp_path / "a" / "student.ckpt").read_bytes()
        ck2 = (tmp_path / "b" / "student.ckpt").read_bytes()
        assert ck1 == ck2
        m1 = strip_wall(read_metrics(tmp_path / "a" / "metrics.jsonl"))
        m2 = strip_wall(read_metrics(tmp_path / "b" / "metrics.jsonl"))
        assert m1 == m2
        assert r1["eval"] == r2["eval"]

    def test_sskd_run_writes_k_stage_traces_plus_head(self, tmp_path):
        run(parse_config(TINY_SSKD + f"output_dir = {tmp_path / 'r'}\n"))
        records = read_metrics(tmp_path / "r" / "metrics.jsonl")
        phases = {r["phase"] for r in records}
        assert {"stage1", "stage2", "head"} <= phases
        report = json.loads((tmp_path / "r" / "report.json").read_text())
        assert [p["phase"] for p in report["phases"]] == ["stage1", "stage2", "head"]

    def test_output_collision_rejected(self, tmp_path):
        cfg = parse_config(TINY_RUN + f"output_dir = {tmp_path / 'dup'}\n")
        run(cfg)
        with pytest.raises(UsageError, match="not empty"):
            run(cfg)

    def test_eval_checkpoint_from_file_dataset(self, tmp_path):
        cfg = parse_config(TINY_RUN + f"output_dir = {tmp_path / 'r'}\n")
        report = run(cfg)
        _, test = gen_synthetic(cfg.synthetic)
        top1, top5 = eval_checkpoint(tmp_path / "r" / "student.ckpt", test)
        assert top1 == pytest.approx(report["eval"]["test_top1"])
        assert top5 >= top1

    def test_stages_override_repartitions_both_models(self, tmp_path):
        cfg = parse_config(TINY_SSKD + f"plan.stages = 1\noutput_dir = {tmp_path / 'k1'}\n")
        report = run(cfg)
        assert report["stages"] == 1
        assert [p["phase"] for p in report["phases"]] == ["stage1", "head"]


class TestExportFeatures:
    def test_round_trip_and_shape(self, tmp_path):
        spec = SyntheticSpec(num_classes=4, samples_per_class=5, resolution=16,
                             noise_std=0.1, seed=3)
        _, test = gen_synthetic(spec)
        model = build_model(tiny_config(), seed=5)
        out = tmp_path / "feat.bin"
        export_features(model, test, 2, out)
        feats, labels = load_features(out)
        assert feats.shape == (20, 8 * 8 * 8)  # C=8 at 8x8 for stage 2 of 16x16 input
        assert labels.tolist() == test.labels.tolist()

    def test_identical_weights_identical_exports(self, tmp_path):
        spec = SyntheticSpec(num_classes=3, samples_per_class=4, resolution=16,
                             noise_std=0.1, seed=3)
        _, test = gen_synthetic(spec)
        a = build_model(tiny_config(classes=3), seed=5)
        b = build_model(tiny_config(classes=3), seed=5)
        export_features(a, test, 1, tmp_path / "a.bin")
        export_features(b, test, 1, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_stage_out_of_range(self, tmp_path):
        spec = SyntheticSpec(num_classes=3, samples_per_class=4, resolution=16,
                             noise_std=0.1, seed=3)
        _, test = gen_synthetic(spec)
        model = build_model(tiny_config(classes=3), seed=5)
        with pytest.raises(UsageError):
            export_features(model, test, 5, tmp_path / "x.bin")


SWEEP_BASE = """
method = kd_joint
seed = 2
dataset.num_classes = 4
dataset.samples_per_class = 8
dataset.resolution = 16
dataset.noise_std = 0.2
dataset.seed = 2
teacher.stage_widths = 8,16
teacher.blocks_per_stage = 1,1
teacher.epochs = 4
student.stage_widths = 4,8
student.blocks_per_stage = 1,1
plan.stage_epochs = 2
plan.head_epochs = 2
plan.batch_size = 16
"""


@pytest.fixture(scope="module")
def sweep_result(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    base = parse_config(SWEEP_BASE + f"output_dir = {root / 'sw'}\n")
    summary = sweep_loss_weight(base, [1.0, 5.0, 10.0])
    return root / "sw", summary


class TestSweep:

    def test_csv_has_kd_rows_plus_marked_sskd_row(self, sweep_result):
        sweep_dir, _ = sweep_result
        lines = (sweep_dir / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 3 + 1  # header + lambdas + sskd
        assert lines[-1].startswith("free,")
        points, reference = read_sweep_csv(sweep_dir / "sweep.csv")
        assert [p[0] for p in points] == [1.0, 5.0, 10.0]
        assert reference > 0

    def test_svg_structure(self, sweep_result):
        sweep_dir, _ = sweep_result
        tree = ET.parse(sweep_dir / "sweep.svg")
        ns = {"svg": "http://www.w3.org/2000/svg"}
        circles = tree.findall(".//svg:circle[@class='kd-point']", ns)
        ref_lines = tree.findall(".//svg:line[@class='sskd-line']", ns)
        assert len(circles) == 3
        assert len(ref_lines) == 1
        assert ref_lines[0].get("y1") == ref_lines[0].get("y2")

    def test_summary_reports_spread(self, sweep_result):
        _, summary = sweep_result
        assert summary["kd_top1_spread"] >= 0
        assert len(summary["kd_top1"]) == 3

    def test_empty_weight_list_rejected(self, tmp_path):
        base = parse_config(SWEEP_BASE + f"output_dir = {tmp_path / 'x'}\n")
        with pytest.raises(UsageError, match="empty"):
            sweep_loss_weight(base, [])

    def test_non_joint_base_rejected(self, tmp_path):
        base = parse_config(TINY_RUN + f"output_dir = {tmp_path / 'y'}\n")
        with pytest.raises(UsageError, match="kd_joint"):
            sweep_loss_weight(base, [1.0])


class TestCLI:
    def test_train_and_eval_verbs(self, tmp_path, capsys):
        from sskd.cli import main

        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(TINY_RUN + f"output_dir = {tmp_path / 'out'}\n")
        assert main(["train", str(cfg_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["train_top1"] == 100.0

        spec = SyntheticSpec(num_classes=4, samples_per_class=8, resolution=16,
                             noise_std=0.0, seed=2)
        _, test = gen_synthetic(spec)
        ds_path = tmp_path / "test.skds"
        save_binary(test, ds_path)
        assert main(["eval", str(tmp_path / "out" / "student.ckpt"), str(ds_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["top5"] == 100.0

    def test_bad_config_is_a_clean_error(self, tmp_path, capsys):
        from sskd.cli import main

        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("unknown.key = 1\n")
        assert main(["train", str(cfg_path)]) == 2
        assert "unknown key" in capsys.readouterr().err
