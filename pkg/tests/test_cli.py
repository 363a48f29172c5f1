import csv
import json
import os

import numpy as np
import pytest

import dualseg.cli
import dualseg.nn
from dualseg.cli import (EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAIL,
                         RunConfig, _parse_set_flag, main)
from dualseg.data import quantize_to_byte, read_pgm
from dualseg.errors import ConfigError, DivergenceError
from dualseg.model import load_checkpoint


@pytest.fixture
def tiny_config(tmp_path):
    """JSON config shrinking everything to seconds-scale."""
    cfg = {
        "scene": {"image_size": [32, 32], "ambiguous_extent": [8, 14]},
        "model": {"backbone_channels": [4, 6, 8, 10], "module_channels": 8,
                  "reduction_ratio": 4},
        "train": {"epochs": 0, "train_samples": 4, "val_samples": 2,
                  "batch_size": 2, "crop": [32, 32], "seeds": [0]},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestRunConfig:
    def setup_method(self):
        self.cfg = RunConfig({"a": 1, "nested": {"x": 0.5, "flag": True,
                                                 "items": [1, 2]}, "name": "n"})

    def test_defaults_and_provenance(self):
        assert self.cfg.get("nested.x") == 0.5
        assert self.cfg.source("nested.x") == "default"

    def test_flag_overrides(self):
        self.cfg.apply_flag("nested.x", 2.5)
        assert self.cfg.get("nested.x") == 2.5
        assert self.cfg.source("nested.x") == "flag"

    def test_file_layer(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"a": 7, "nested": {"items": [9]}}))
        self.cfg.apply_file(path)
        assert self.cfg.get("a") == 7 and self.cfg.source("a") == "file"
        assert self.cfg.get("nested.items") == (9,)

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as err:
            self.cfg.apply_flag("nested.bogus", 1)
        assert "nested.bogus" in str(err.value)

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            self.cfg.apply_flag("a", "abc")
        with pytest.raises(ConfigError):
            self.cfg.apply_flag("nested.flag", 3)
        with pytest.raises(ConfigError):
            self.cfg.apply_flag("nested.items", 5)

    def test_numeric_coercions(self):
        self.cfg.apply_flag("a", 2.0)
        assert self.cfg.get("a") == 2 and isinstance(self.cfg.get("a"), int)
        self.cfg.apply_flag("nested.x", 3)
        assert self.cfg.get("nested.x") == 3.0
        self.cfg.apply_flag("nested.flag", "false")
        assert self.cfg.get("nested.flag") is False

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            self.cfg.apply_file("/nonexistent/config.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{oops")
        with pytest.raises(ConfigError):
            self.cfg.apply_file(path)

    def test_describe_lists_sources(self):
        self.cfg.apply_flag("a", 3)
        text = self.cfg.describe()
        assert "[flag]" in text and "[default]" in text


class TestRunConfigCoercionGap:
    def test_string_into_int_rejected(self):
        cfg = RunConfig({"a": 1})
        with pytest.raises(ConfigError):
            cfg.apply_flag("a", "xyz")


def test_parse_set_flag():
    assert _parse_set_flag("train.epochs=3") == ("train.epochs", 3)
    assert _parse_set_flag("model.variant=dual") == ("model.variant", "dual")
    assert _parse_set_flag("train.crop=[64,64]") == ("train.crop", [64, 64])
    with pytest.raises(ConfigError):
        _parse_set_flag("no-equals-sign")


class TestExitCodes:
    def test_unknown_flag_is_usage(self, capsys):
        assert run_cli("train", "--bogus") == EXIT_USAGE

    def test_unknown_subcommand(self, capsys):
        assert run_cli("dance") == EXIT_USAGE

    def test_unknown_set_key(self, tiny_config, tmp_path, capsys):
        code = run_cli("train", "--config", tiny_config,
                       "--out-dir", str(tmp_path / "o"),
                       "--set", "train.no_such=1")
        assert code == EXIT_USAGE
        assert "no_such" in capsys.readouterr().err

    def test_missing_checkpoint_is_usage(self, capsys, tmp_path):
        assert run_cli("eval", str(tmp_path / "none.bin")) == EXIT_USAGE

    def test_divergence_maps_to_three(self, monkeypatch, tiny_config, tmp_path, capsys):
        def blow_up(*a, **k):
            raise DivergenceError("non-finite loss inf at step 4 (epoch 0)")

        monkeypatch.setattr(dualseg.cli, "train", blow_up)
        code = run_cli("train", "--config", tiny_config,
                       "--out-dir", str(tmp_path / "o"))
        assert code == EXIT_DIVERGED
        assert "step 4" in capsys.readouterr().err


class TestTrainCommand:
    def test_writes_checkpoint_and_prints_provenance(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        code = run_cli("train", "--config", tiny_config, "--out-dir", str(out),
                       "--set", "train.epochs=1")
        assert code == EXIT_OK
        text = capsys.readouterr().out
        assert "configuration:" in text
        assert "[file]" in text and "[flag]" in text and "[default]" in text
        assert (out / "checkpoint.bin").exists()
        assert (out / "metrics.csv").exists()
        assert "final epoch 0" in text

    def test_epochs_zero_still_writes_checkpoint(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "zero"
        assert run_cli("train", "--config", tiny_config,
                       "--out-dir", str(out)) == EXIT_OK
        state, meta = load_checkpoint(out / "checkpoint.bin")
        assert meta["model"]["variant"] == "dual"
        assert meta["model"]["num_classes"] == 6
        assert state

    def test_variant_flag(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "base"
        assert run_cli("train", "--config", tiny_config, "--out-dir", str(out),
                       "--variant", "baseline") == EXIT_OK
        _, meta = load_checkpoint(out / "checkpoint.bin")
        assert meta["model"]["variant"] == "baseline_fcn"

    def test_metrics_byte_identical_across_runs(self, tiny_config, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run_cli("train", "--config", tiny_config, "--out-dir", str(out),
                           "--set", "train.epochs=2", "--seed", "3") == EXIT_OK
            outs.append((out / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_out_dir_env_fallback(self, tiny_config, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("DUALSEG_OUT_DIR", str(tmp_path / "envroot"))
        assert run_cli("train", "--config", tiny_config) == EXIT_OK
        assert (tmp_path / "envroot" / "train" / "checkpoint.bin").exists()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny dual checkpoint shared by the eval/visualize tests."""
    root = tmp_path_factory.mktemp("ck")
    cfg = {
        "scene": {"image_size": [32, 32], "ambiguous_extent": [8, 14]},
        "model": {"backbone_channels": [4, 6, 8, 10], "module_channels": 8,
                  "reduction_ratio": 4},
        "train": {"epochs": 1, "train_samples": 8, "val_samples": 2,
                  "batch_size": 4, "crop": [32, 32], "seeds": [0]},
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = root / "run"
    assert main(["train", "--config", str(cfg_path), "--out-dir", str(out)]) == EXIT_OK
    return {"config": str(cfg_path), "checkpoint": str(out / "checkpoint.bin"),
            "root": root}


class TestEvalCommand:
    def test_eval_writes_csv(self, trained, tmp_path, capsys):
        out = tmp_path / "ev"
        code = run_cli("eval", trained["checkpoint"], "--config", trained["config"],
                       "--out-dir", str(out))
        assert code == EXIT_OK
        text = capsys.readouterr().out
        assert "mean_iou=" in text
        with open(out / "eval.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["class", "iou", "present"]
        assert len(rows) == 1 + 6
        for row in rows[1:]:
            assert 0.0 <= float(row[1]) <= 1.0

    def test_eval_scales_flag(self, trained, tmp_path, capsys):
        code = run_cli("eval", trained["checkpoint"], "--config", trained["config"],
                       "--out-dir", str(tmp_path / "ms"), "--scales", "0.5,1.0")
        assert code == EXIT_OK


class TestVisualizeCommand:
    def test_exports_all_maps(self, trained, tmp_path, capsys):
        out = tmp_path / "viz"
        code = run_cli("visualize", trained["checkpoint"], "--config",
                       trained["config"], "--out-dir", str(out),
                       "--point", "1,2", "--channels", "0,7")
        assert code == EXIT_OK
        for name in ("prediction.pgm", "ground_truth.pgm", "sub_attention.pgm",
                     "sub_attention.csv", "attention_rows.csv",
                     "channel_attention.csv", "attended_channel_0.pgm",
                     "attended_channel_7.pgm"):
            assert (out / name).exists(), name

        pred = read_pgm(out / "prediction.pgm")
        assert pred.shape == (32, 32) and pred.max() < 6

        sub = np.array([[float(v) for v in row]
                        for row in list(csv.reader(open(out / "sub_attention.csv")))[1:]])
        assert sub.shape == (4, 4)
        assert sub.sum() == pytest.approx(1.0, abs=1e-5)

        rows = np.array([[float(v) for v in row]
                         for row in list(csv.reader(open(out / "attention_rows.csv")))[1:]])
        assert rows.shape == (16, 16)
        assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-5)
        assert np.allclose(rows[1 * 4 + 2].reshape(4, 4), sub, atol=1e-12)

        chan = np.array([[float(v) for v in row]
                         for row in list(csv.reader(open(out / "channel_attention.csv")))[1:]])
        assert chan.shape == (8, 8)
        assert np.allclose(chan.sum(axis=1), 1.0, atol=1e-5)

        img = read_pgm(out / "sub_attention.pgm")
        assert np.array_equal(img, quantize_to_byte(sub).astype(np.int64))

    def test_baseline_checkpoint_rejected(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "b"
        assert run_cli("train", "--config", tiny_config, "--out-dir", str(out),
                       "--variant", "baseline") == EXIT_OK
        code = run_cli("visualize", str(out / "checkpoint.bin"),
                       "--config", tiny_config, "--out-dir", str(tmp_path / "v"))
        assert code == EXIT_USAGE
        assert "no attention maps" in capsys.readouterr().err

    def test_bad_point_is_usage(self, trained, tmp_path, capsys):
        code = run_cli("visualize", trained["checkpoint"], "--config",
                       trained["config"], "--out-dir", str(tmp_path / "p"),
                       "--point", "x,y")
        assert code == EXIT_USAGE

    def test_point_outside_grid_is_usage(self, trained, tmp_path, capsys):
        code = run_cli("visualize", trained["checkpoint"], "--config",
                       trained["config"], "--out-dir", str(tmp_path / "q"),
                       "--point", "9,9")
        assert code == EXIT_USAGE


class TestVerifyCommand:
    def test_green_suite_exits_zero(self, capsys):
        code = run_cli("verify", "--trials", "2")
        text = capsys.readouterr().out
        assert code == EXIT_OK
        assert "[PASS]" in text and "[FAIL]" not in text
        assert text.strip().endswith("24/24 properties passed")

    def test_broken_op_exits_one_and_names_property(self, monkeypatch, capsys):
        real = dualseg.nn.conv2d

        def crooked(x, weight, bias=None, stride=1, padding=0, dilation=1):
            out = real(x, weight, bias, stride, padding, dilation)
            out.data = out.data * (1.0 + 1e-3)
            return out

        monkeypatch.setattr(dualseg.nn, "conv2d", crooked)
        code = run_cli("verify", "--trials", "1")
        text = capsys.readouterr().out
        assert code == EXIT_VERIFY_FAIL
        assert "[FAIL] oracle:conv2d" in text


class TestGenData:
    def test_writes_samples_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "ds"
        code = run_cli("gen-data", "--count", "3", "--out-dir", str(out),
                       "--set", "scene.image_size=[32,32]",
                       "--set", "scene.ambiguous_extent=[8,14]")
        assert code == EXIT_OK
        names = sorted(os.listdir(out))
        assert "manifest.csv" in names
        assert sum(n.endswith(".ppm") for n in names) == 3
        assert sum(n.endswith(".pgm") for n in names) == 3
        lines = (out / "manifest.csv").read_text().strip().splitlines()
        assert len(lines) == 4
