import json

import numpy as np
import pytest

from sxnet.cli import main


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestRoute:
    def test_identity_permutation_verified(self, capsys):
        code, out, _ = run(["route", "--perm", "0,1,2,3"], capsys)
        assert code == 0
        lines = out.splitlines()
        stages = [l for l in lines if set(l) <= {"0", "1"} and l]
        assert len(stages) == 3 and all(len(s) == 2 for s in stages)
        assert "verified" in out

    def test_random_mode_all_verified(self, capsys):
        code, out, _ = run(["route", "--random", "6", "50", "--seed", "3"], capsys)
        assert code == 0
        assert "50/50 verified" in out

    def test_non_permutation_exit_2(self, capsys):
        code, _, err = run(["route", "--perm", "0,0,1,2"], capsys)
        assert code == 2
        assert "not a permutation" in err

    def test_needs_exactly_one_mode(self, capsys):
        code, _, _ = run(["route"], capsys)
        assert code == 2


class TestGradcheck:
    def test_f64_passes(self, capsys):
        code, out, _ = run(["gradcheck"], capsys)
        assert code == 0
        assert "gradcheck passed" in out

    def test_f32_warns_and_relaxes(self, capsys):
        code, out, _ = run(["gradcheck", "--dtype", "f32"], capsys)
        assert code == 0
        assert "warning" in out and "0.01" in out


class TestTrainCli:
    def test_missing_task_exits_2(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["train"])
        assert e.value.code == 2

    def test_zero_steps_writes_checkpoint_only(self, tmp_path, capsys):
        code, out, _ = run([
            "train", "--task", "dup", "--maps", "4", "--steps", "0",
            "--train-len", "8", "--min-len", "4", "--out", str(tmp_path),
        ], capsys)
        assert code == 0
        assert (tmp_path / "checkpoint.sxnc").exists()
        assert not (tmp_path / "metrics.jsonl").read_text().strip()
        assert "config: command=train" in out

    def test_tiny_run_emits_metrics_and_resolved_config(self, tmp_path, capsys):
        code, out, _ = run([
            "train", "--task", "rev", "--maps", "4", "--steps", "4",
            "--train-len", "8", "--min-len", "4", "--batch", "4",
            "--eval-every", "2", "--log-every", "1", "--eval-samples", "4",
            "--out", str(tmp_path),
        ], capsys)
        assert code == 0
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [1, 2, 3, 4]
        cfg = (tmp_path / "resolved.cfg").read_text()
        assert "task = rev" in cfg and "seed = 1" in cfg

    def test_invalid_maps_exits_2(self, tmp_path, capsys):
        code, _, err = run([
            "train", "--task", "rev", "--maps", "5", "--steps", "1",
            "--out", str(tmp_path),
        ], capsys)
        assert code == 2
        assert "maps" in err

    def test_config_file_defaults_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("task = rev\nmaps = 4\nsteps = 3\ntrain-len = 8\n"
                       "min-len = 4\nbatch = 2\nlog-every = 1\neval-every = 0\n")
        code, out, _ = run([
            "train", "--config", str(cfg), "--steps", "2", "--out", str(tmp_path / "o"),
        ], capsys)
        assert code == 0
        lines = (tmp_path / "o" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2  # CLI --steps beats the file's 3

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("task = rev\nnot_a_key = 1\n")
        code, _, err = run(["train", "--config", str(cfg)], capsys)
        assert code == 2
        assert "not_a_key" in err


class TestEvalCli:
    def test_eval_prints_table_and_records(self, tmp_path, capsys):
        code, _, _ = run([
            "train", "--task", "rev", "--maps", "4", "--steps", "2",
            "--train-len", "8", "--min-len", "4", "--batch", "2",
            "--eval-every", "0", "--out", str(tmp_path),
        ], capsys)
        assert code == 0
        code, out, _ = run([
            "eval", "--ckpt", str(tmp_path / "checkpoint.sxnc"), "--samples", "4",
        ], capsys)
        assert code == 0
        records = [json.loads(l[len("record "):]) for l in out.splitlines()
                   if l.startswith("record ")]
        assert [r["length"] for r in records] == [8, 16, 32, 64]
        assert all(0.0 <= r["accuracy"] <= 1.0 for r in records)

    def test_eval_below_trained_length_accepted(self, tmp_path, capsys):
        run([
            "train", "--task", "rev", "--maps", "4", "--steps", "1",
            "--train-len", "16", "--min-len", "4", "--batch", "2",
            "--eval-every", "0", "--out", str(tmp_path),
        ], capsys)
        code, out, _ = run([
            "eval", "--ckpt", str(tmp_path / "checkpoint.sxnc"),
            "--lengths", "8", "--samples", "4",
        ], capsys)
        assert code == 0
        assert any(l.startswith("record ") for l in out.splitlines())

    def test_single_sample_accuracy_on_grid(self, tmp_path, capsys):
        run([
            "train", "--task", "rev", "--maps", "4", "--steps", "1",
            "--train-len", "8", "--min-len", "4", "--batch", "2",
            "--eval-every", "0", "--out", str(tmp_path),
        ], capsys)
        code, out, _ = run([
            "eval", "--ckpt", str(tmp_path / "checkpoint.sxnc"),
            "--lengths", "8", "--samples", "1",
        ], capsys)
        rec = [json.loads(l[len("record "):]) for l in out.splitlines()
               if l.startswith("record ")][0]
        assert abs(rec["accuracy"] * 8 - round(rec["accuracy"] * 8)) < 1e-9

    def test_missing_checkpoint_exits_2(self, capsys):
        code, _, err = run(["eval", "--ckpt", "/nonexistent.sxnc"], capsys)
        assert code == 2


class TestBenchCli:
    def test_single_length_row_no_slope(self, capsys):
        code, out, _ = run([
            "bench", "--lengths", "64", "--maps", "4", "--reps", "2", "--warmup", "1",
        ], capsys)
        assert code == 0
        assert "slope" not in out

    def test_rows_and_slope(self, tmp_path, capsys):
        code, out, _ = run([
            "bench", "--lengths", "16,32,64,128", "--maps", "4",
            "--reps", "2", "--warmup", "1", "--out", str(tmp_path),
        ], capsys)
        assert code == 0
        assert "slope" in out
        rows = [json.loads(l) for l in (tmp_path / "bench.jsonl").read_text().splitlines()]
        assert [r["n"] for r in rows if "n" in r] == [16, 32, 64, 128]

    def test_attention_stub_arch(self, capsys):
        code, out, _ = run([
            "bench", "--arch", "attention", "--lengths", "64,128", "--maps", "4",
            "--reps", "2", "--warmup", "1",
        ], capsys)
        assert code == 0
