"""Command-line interface: subcommand pipeline, config overrides, and exit
codes (0 ok, 2 bad arguments, 3 verification failure, 5 i/o error)."""

import json
import os

import numpy as np
import pytest

from particlesim.cli import main, load_config, BadConfig, build_parser


SMALL_DATA = [
    "--set", "dataset.counts=[10]",
    "--set", "dataset.n_frames=8",
    "--set", "dataset.train_rollouts=3",
    "--set", "dataset.valid_rollouts=2",
]
SMALL_MODEL = [
    "--set", "model.d=16",
    "--set", "model.heads=2",
    "--set", "model.blocks=1",
    "--set", "model.mlp_hidden=16",
]
SMALL_TRAIN = [
    "--set", "train.epochs=1",
    "--set", "train.steps_per_epoch=3",
    "--set", "train.batch_size=2",
    "--set", "train.valid_samples=2",
]


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """gen-data + train once; downstream commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data_out = root / "data"
    assert main(["gen-data", "--out", str(data_out)] + SMALL_DATA) == 0
    model_out = root / "model"
    assert main(["train", "--out", str(model_out), "--data", str(data_out / "dataset")]
                + SMALL_MODEL + SMALL_TRAIN) == 0
    return root


class TestConfig:
    def parse(self, argv):
        return build_parser().parse_args(argv)

    def test_defaults_load(self):
        args = self.parse(["gen-data", "--out", "x"])
        config = load_config(args)
        assert config["model"]["backbone"] == "tie"

    def test_override_precedence(self):
        args = self.parse(["train", "--out", "x", "--data", "d",
                           "--set", "model.d=32", "--backbone", "vanilla",
                           "--seed", "7"])
        config = load_config(args)
        assert config["model"]["d"] == 32
        assert config["model"]["backbone"] == "vanilla"
        assert config["train"]["seed"] == 7

    def test_normalized_attention_flag(self):
        args = self.parse(["train", "--out", "x", "--data", "d",
                           "--normalized-attention", "off"])
        assert load_config(args)["model"]["normalized_attention"] is False

    def test_config_file_merge(self, tmp_path):
        cf = tmp_path / "c.json"
        cf.write_text(json.dumps({"model": {"blocks": 7}}))
        args = self.parse(["gen-data", "--out", "x", "--config", str(cf)])
        config = load_config(args)
        assert config["model"]["blocks"] == 7
        assert config["model"]["d"] == 64  # untouched default

    def test_unknown_keys_rejected(self):
        for override in ("model.nonsense=1", "nonsense.key=1", "model=1", "broken"):
            args = self.parse(["gen-data", "--out", "x", "--set", override])
            with pytest.raises(BadConfig):
                load_config(args)

    def test_missing_config_file(self):
        args = self.parse(["gen-data", "--out", "x", "--config", "/nope/c.json"])
        with pytest.raises(BadConfig):
            load_config(args)


class TestExitCodes:
    def test_unknown_subcommand_is_bad_args(self, capsys):
        assert main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_unknown_backbone_is_bad_args(self, capsys):
        assert main(["train", "--out", "x", "--data", "d", "--backbone", "rnn"]) == 2
        capsys.readouterr()

    def test_bad_model_dims_is_bad_args(self, tmp_path, capsys, pipeline_dir):
        code = main(["train", "--out", str(tmp_path / "m"),
                     "--data", str(pipeline_dir / "data" / "dataset"),
                     "--set", "model.d=10", "--set", "model.heads=3"])
        assert code == 2
        capsys.readouterr()

    def test_unknown_config_key_is_bad_args(self, capsys):
        assert main(["gen-data", "--out", "x", "--set", "model.zzz=1"]) == 2
        capsys.readouterr()

    def test_missing_dataset_is_io_error(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path / "m"), "--data", "/does/not/exist"]
                    + SMALL_TRAIN)
        assert code == 5
        capsys.readouterr()

    def test_corrupt_dataset_is_io_error(self, tmp_path, capsys, pipeline_dir):
        import shutil
        bad = tmp_path / "bad"
        shutil.copytree(pipeline_dir / "data" / "dataset", bad)
        target = bad / "train" / "rollout_00000.bin"
        raw = bytearray(target.read_bytes())
        raw[5] ^= 0xFF
        target.write_bytes(bytes(raw))
        code = main(["train", "--out", str(tmp_path / "m"), "--data", str(bad)]
                    + SMALL_TRAIN)
        assert code == 5
        capsys.readouterr()


class TestPipeline:
    def test_gen_data_artifacts(self, pipeline_dir):
        data = pipeline_dir / "data"
        assert (data / "config.json").exists()
        meta = json.loads((data / "dataset" / "meta.json").read_text())
        assert meta["counts"] == {"train": 3, "valid": 2}
        assert len(list((data / "dataset" / "train").glob("*.bin"))) == 3

    def test_train_artifacts(self, pipeline_dir):
        model = pipeline_dir / "model"
        assert (model / "config.json").exists()
        assert (model / "history.csv").exists()
        assert (model / "final.manifest.json").exists()
        lines = (model / "history.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,valid_loss,lr"
        assert len(lines) == 2  # header + 1 epoch

    def test_eval(self, pipeline_dir, capsys):
        out = pipeline_dir / "eval"
        code = main(["eval", "--out", str(out),
                     "--data", str(pipeline_dir / "data" / "dataset"),
                     "--model-dir", str(pipeline_dir / "model"),
                     "--samples", "4"])
        assert code == 0
        capsys.readouterr()
        report = json.loads((out / "report.json").read_text())
        assert np.isfinite(report["one_step"]["m3se_mean"])
        assert np.isfinite(report["constant_velocity_baseline"]["m3se_mean"])

    def test_rollout(self, pipeline_dir, capsys):
        out = pipeline_dir / "rollout"
        code = main(["rollout", "--out", str(out),
                     "--data", str(pipeline_dir / "data" / "dataset"),
                     "--model-dir", str(pipeline_dir / "model"),
                     "--steps", "4", "--count", "1"])
        assert code == 0
        capsys.readouterr()
        report = json.loads((out / "report.json").read_text())
        assert len(report["rollouts"]) == 1
        assert (out / "rollout_000.bin").exists()

    def test_bench_small(self, tmp_path, capsys):
        out = tmp_path / "bench"
        code = main(["bench", "--out", str(out),
                     "--set", "bench.n=24", "--set", "bench.e_values=[40,80]",
                     "--set", "bench.d=16", "--set", "bench.blocks=1",
                     "--set", "bench.heads=2", "--set", "bench.trials=5"])
        assert code == 0
        captured = capsys.readouterr()
        assert "WARNING" not in captured.out  # analytic == measured everywhere
        lines = (out / "bench.csv").read_text().strip().splitlines()
        assert lines[0] == "backbone,n,e,macs,wall_ms_mean,wall_ms_std"
        assert len(lines) == 1 + 3 * 2  # three backbones, two pair counts

    def test_verify_fast(self, capsys):
        assert main(["verify", "--fast"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 4
