import numpy as np
import pytest

from lusk.cli import main, read_keypoints_csv
from lusk.config import (ConfigError, RunConfig, load_config, parse_config,
                         serialize_config)
from lusk.evaluate import read_report
from lusk.synth import BLineSpec
from lusk.tensor import load_tensors

TINY = ["--set", "size=32", "--set", "frames=10", "--set", "input_size=32",
        "--set", "base_channels=8", "--set", "k=3", "--set", "epochs=2",
        "--set", "batch_size=4", "--set", "pair_count=6",
        "--set", "ssim_threshold=0.5"]


class TestConfig:
    def test_serialize_parse_fixed_point(self):
        cfg = RunConfig()
        cfg.fusion.sigma0 = 0.6
        cfg.train.use_cbam = True
        cfg.scene.b_lines = (BLineSpec(0.3, 0.1, 1.5, 0.9), BLineSpec())
        text = serialize_config(cfg.validate())
        cfg2 = parse_config(text).validate()
        assert serialize_config(cfg2) == text
        assert cfg2.scene.b_lines == cfg.scene.b_lines
        assert cfg2.fusion.lambdas == cfg.fusion.lambdas

    def test_unknown_keys_listed_with_lines(self):
        with pytest.raises(ConfigError, match=r"'bogus' \(line 2\).*'wat' \(line 4\)"):
            parse_config("seed=1\nbogus=2\nk=5\nwat=3\n")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# a comment\n\nseed=7  # trailing\n")
        assert cfg.seed == 7

    def test_bad_value_diagnostic(self):
        with pytest.raises(ConfigError, match="<config>:1.*'k'"):
            parse_config("k=abc\n")

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config("/nonexistent/run.cfg")

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=1\nk=4\n")
        cfg = load_config(path, overrides=["k=6"])
        assert cfg.model.k == 6 and cfg.seed == 1

    def test_seed_propagates(self):
        cfg = parse_config("seed=9\n").validate()
        assert cfg.train.seed == 9 and cfg.scene.seed == 9


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", *TINY, "--seed", "0", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "model.lusk"
    assert main(["train", *TINY, "--seed", "0",
                 "--data", str(dataset), "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_outputs(self, dataset):
        assert len(list(dataset.glob("frame_*.pgm"))) == 10
        assert (dataset / "truth.txt").exists()

    def test_byte_identical_for_same_seed(self, dataset, tmp_path):
        again = tmp_path / "again"
        assert main(["synth", *TINY, "--seed", "0", "--out", str(again)]) == 0
        for name in ("frame_00000.pgm", "frame_00007.pgm", "truth.txt"):
            assert (again / name).read_bytes() == (dataset / name).read_bytes()


class TestFuse:
    def test_emits_ten_channels(self, dataset, tmp_path):
        out = tmp_path / "fused"
        assert main(["fuse", *TINY, "--in", str(dataset / "frame_00000.pgm"),
                     "--out", str(out)]) == 0
        assert len(list(out.glob("channel_*.pgm"))) == 10
        stack = load_tensors(out / "stack.lusk")
        assert len(stack) == 10
        assert stack["channel_00"].shape == (32, 32)

    def test_norm_mode(self, dataset, tmp_path):
        out = tmp_path / "norm"
        assert main(["fuse", *TINY, "--mode", "norm",
                     "--in", str(dataset / "frame_00000.pgm"),
                     "--out", str(out)]) == 0
        assert len(list(out.glob("channel_*.pgm"))) == 10


class TestPipeline:
    def test_train_writes_checkpoint_and_loss_csv(self, checkpoint):
        assert checkpoint.exists()
        lines = (checkpoint.parent / "model_loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,lr"
        assert len(lines) == 3
        # lr column follows the step-decay schedule
        assert float(lines[1].split(",")[2]) == 0.001
        assert float(lines[2].split(",")[2]) == 0.001

    def test_pretrain_then_train_init(self, dataset, tmp_path):
        enc = tmp_path / "enc.lusk"
        assert main(["pretrain", *TINY, "--set", "pretrain_epochs=1",
                     "--data", str(dataset), "--out", str(enc)]) == 0
        out = tmp_path / "model.lusk"
        assert main(["train", *TINY, "--set", "epochs=1", "--data", str(dataset),
                     "--init", str(enc), "--out", str(out)]) == 0

    def test_infer_then_eval(self, dataset, checkpoint, tmp_path):
        pred = tmp_path / "pred"
        assert main(["infer", "--ckpt", str(checkpoint),
                     "--data", str(dataset), "--out", str(pred)]) == 0
        pts = read_keypoints_csv(pred / "keypoints.csv")
        assert pts.shape == (10, 3, 2)
        assert len(list(pred.glob("overlay_*.pgm"))) == 10
        report_path = tmp_path / "report.txt"
        assert main(["eval", "--pred", str(pred), "--truth", str(dataset),
                     "--out", str(report_path)]) == 0
        report = read_report(report_path)
        assert report.frames_total == 10
        assert 0.0 <= report.pleura_accuracy <= 1.0
        assert (tmp_path / "report_frames.csv").exists()


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path):
        assert main(["synth", "--set", "nope=1", "--out", str(tmp_path / "x")]) == 2

    def test_invalid_value_is_config_error(self, tmp_path):
        assert main(["synth", "--set", "pleura_depth=0.9",
                     "--out", str(tmp_path / "x")]) == 2

    def test_missing_data_is_data_error(self, tmp_path):
        assert main(["train", *TINY, "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "m.lusk")]) == 3

    def test_pair_exhaustion_is_numeric_error(self, dataset, tmp_path):
        code = main(["train", *TINY, "--set", "ssim_threshold=1.0",
                     "--set", "pair_retry_factor=3",
                     "--data", str(dataset), "--out", str(tmp_path / "m.lusk")])
        assert code == 4

    def test_checkpoint_config_mismatch(self, dataset, checkpoint, tmp_path):
        code = main(["train", *TINY, "--set", "k=5", "--data", str(dataset),
                     "--init", str(checkpoint), "--out", str(tmp_path / "m.lusk")])
        assert code == 2
