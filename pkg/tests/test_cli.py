import json

import pytest

from stabn.cli import main, read_config_file
from stabn.errors import UsageError

GEN_FLAGS = ["--classes", "2", "--frames", "2", "--size", "8", "--shape-size", "3", "--window-len", "1",
             "--train", "12", "--val", "6", "--seed", "5"]
TRAIN_FLAGS = ["--stage-channels", "2,2", "--epochs", "2", "--batch-size", "4", "--seed", "1"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "data")] + GEN_FLAGS) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run")] + TRAIN_FLAGS) == 0
    return root


class TestGen:
    def test_summary_and_files(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path)] + GEN_FLAGS) == 0
        out = capsys.readouterr().out
        assert "train.stvid: samples=12 classes=[6 6] crc32=" in out
        assert "val.stvid: samples=6 classes=[3 3]" in out
        assert (tmp_path / "train.stvid").exists() and (tmp_path / "val.stvid").exists()
        assert "classes = 2" in (tmp_path / "config.txt").read_text()

    def test_same_flags_same_checksums(self, tmp_path, capsys):
        main(["gen", "--out", str(tmp_path / "a")] + GEN_FLAGS)
        first = capsys.readouterr().out
        main(["gen", "--out", str(tmp_path / "b")] + GEN_FLAGS)
        assert capsys.readouterr().out == first

    def test_three_classes_is_usage_error(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path), "--classes", "3"]) == 1
        assert "classes" in capsys.readouterr().err

    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("# tiny set\nclasses = 2\nframes=2\nsize = 8\nshape_size = 3\nwindow_len = 1\ntrain = 4\nval = 2\n")
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d"), "--train", "6"]) == 0
        assert "train.stvid: samples=6" in capsys.readouterr().out
        echoed = (tmp_path / "d" / "config.txt").read_text()
        assert "train = 6" in echoed and "val = 2" in echoed

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colours = 3\n")
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_config_line_without_equals(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("classes 2\n")
        with pytest.raises(UsageError):
            read_config_file(str(cfg))


class TestTrain:
    def test_outputs(self, run_dir):
        run = run_dir / "run"
        assert (run / "best.ckpt").exists()
        rows = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
        assert len(rows) == 2
        assert "stage_channels = 2,2" in (run / "config.txt").read_text()

    def test_fixed_seed_identical_logs(self, run_dir, tmp_path):
        assert main(["train", "--data", str(run_dir / "data"), "--out", str(tmp_path)] + TRAIN_FLAGS) == 0
        assert (tmp_path / "train_log.jsonl").read_bytes() == (run_dir / "run" / "train_log.jsonl").read_bytes()

    def test_missing_dataset_is_usage_error(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_required_flag(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 1

    def test_bad_model_config_is_usage_error(self, run_dir, tmp_path):
        args = ["train", "--data", str(run_dir / "data"), "--out", str(tmp_path), "--stage-channels", "2,2", "--split-stage", "5"]
        assert main(args) == 1


class TestEval:
    def test_all_conditions(self, run_dir, capsys, tmp_path):
        args = ["eval", "--ckpt", str(run_dir / "run" / "best.ckpt"), "--data", str(run_dir / "data"), "--out", str(tmp_path)]
        assert main(args) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].split() == ["Spatial", "Temporal", "Top-1", "Top-2"]
        assert "temporal_contrast" in out
        records = (tmp_path / "report.txt").read_text().splitlines()
        assert sum(l.startswith("spatial_inverted=") for l in records) == 4
        assert records[-1].startswith("temporal_contrast=")

    def test_none_matches_training_log(self, run_dir, tmp_path):
        run = run_dir / "run"
        assert main(["eval", "--ckpt", str(run / "best.ckpt"), "--data", str(run_dir / "data" / "val.stvid"),
                     "--invert", "none", "--out", str(tmp_path)]) == 0
        line = (tmp_path / "report.txt").read_text().splitlines()[0]
        fields = dict(kv.split("=") for kv in line.split())
        rows = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
        best = min(rows, key=lambda r: r["val_l_total"])
        assert float(fields["top1"]) == best["val_top1"]

    def test_single_mode_one_row(self, run_dir, capsys):
        assert main(["eval", "--ckpt", str(run_dir / "run" / "best.ckpt"), "--data", str(run_dir / "data"),
                     "--invert", "both"]) == 0
        table = capsys.readouterr().out.split("temporal_contrast")[0].strip().splitlines()
        assert len(table) == 3

    def test_corrupt_checkpoint_is_format_error(self, run_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        data = (run_dir / "run" / "best.ckpt").read_bytes()
        bad.write_bytes(b"NOPE!" + data[5:])
        assert main(["eval", "--ckpt", str(bad), "--data", str(run_dir / "data")]) == 2

    def test_invalid_mode(self, run_dir):
        assert main(["eval", "--ckpt", str(run_dir / "run" / "best.ckpt"), "--data", str(run_dir / "data"),
                     "--invert", "sideways"]) == 1


class TestExplain:
    def args(self, run_dir, out, *extra):
        return ["explain", "--ckpt", str(run_dir / "run" / "best.ckpt"), "--data", str(run_dir / "data"),
                "--out", str(out)] + list(extra)

    def test_outputs(self, run_dir, tmp_path):
        assert main(self.args(run_dir, tmp_path, "--index", "3")) == 0
        assert sorted(p.name for p in tmp_path.glob("frame_*.ppm")) == ["frame_000.ppm", "frame_001.ppm"]
        assert (tmp_path / "sheet.ppm").read_bytes().startswith(b"P6\n16 22\n255\n")
        assert len((tmp_path / "temporal.csv").read_text().splitlines()) == 3

    def test_repeat_is_byte_identical(self, run_dir, tmp_path):
        main(self.args(run_dir, tmp_path / "a", "--index", "1"))
        main(self.args(run_dir, tmp_path / "b", "--index", "1"))
        for name in ["frame_000.ppm", "frame_001.ppm", "sheet.ppm", "temporal.csv"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_index_out_of_range_is_input_error(self, run_dir, tmp_path, capsys):
        assert main(self.args(run_dir, tmp_path, "--index", "6")) == 2
        assert "out of range" in capsys.readouterr().err

    def test_bad_alpha(self, run_dir, tmp_path):
        assert main(self.args(run_dir, tmp_path, "--alpha", "1.5")) == 2


class TestUsage:
    def test_no_subcommand(self):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["gen", "--colour", "red"]) == 1

    def test_bad_flag_type(self):
        assert main(["gen", "--out", "x", "--classes", "four"]) == 1
