import json

import numpy as np
import pytest
from PIL import Image

from msanet.cli import main, resolve_config
from msanet.blocks import ConfigError
from msanet.train import load_checkpoint

TINY = {"model": {"base_channels": 8, "subnet_depths": [1, 1, 1]},
        "train": {"steps_per_epoch": 2, "batch": 2, "patch": 16, "lr0": 1e-3}}


def write_images(directory, n=2, size=(24, 24), mode="RGB", seed=0, value=None):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shape = size + ((3,) if mode == "RGB" else ())
    for i in range(n):
        arr = np.full(shape, value, np.uint8) if value is not None else rng.integers(0, 256, shape, dtype=np.uint8)
        Image.fromarray(arr).save(directory / f"img{i}.png")
    return directory


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def trained(tmp_path, config):
    data = write_images(tmp_path / "train")
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--data", str(data), "--epochs", "1", "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_defaults_expanded(self):
        cfg = resolve_config()
        assert cfg["model"]["scale_channels"] == [32, 64, 128, 256]
        assert cfg["train"]["patch"] == 64 and cfg["train"]["batch"] == 8
        assert cfg["data"]["sigma"] == 30.0

    def test_flags_override(self, config):
        cfg = resolve_config(config, **{"train.epochs": 7, "data.sigma": None})
        assert cfg["train"]["epochs"] == 7 and cfg["model"]["base_channels"] == 8

    def test_unknown_keys(self, tmp_path):
        p = tmp_path / "c.json"
        for doc in ({"modle": {}}, {"model": {"width": 3}}, {"data": {"sgima": 1}}):
            p.write_text(json.dumps(doc))
            with pytest.raises(ConfigError):
                resolve_config(p)

    def test_logged_config_reproduces(self, trained):
        saved = json.loads((trained / "config.json").read_text())
        assert resolve_config(trained / "config.json") == saved


class TestTrain:
    def test_missing_data(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "o")]) == 2

    def test_bad_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"train": {"epochs": -3}}')
        assert main(["train", "--config", str(p), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2

    def test_empty_data_dir(self, tmp_path, config):
        (tmp_path / "empty").mkdir()
        assert main(["train", "--config", str(config), "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2

    def test_zero_epochs_writes_initial_only(self, tmp_path, config):
        data = write_images(tmp_path / "d")
        out = tmp_path / "o"
        assert main(["train", "--config", str(config), "--data", str(data), "--epochs", "0", "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("*.msan")) == ["initial.msan"]

    def test_run_outputs_and_log(self, trained, capfd):
        names = {p.name for p in trained.iterdir()}
        assert {"initial.msan", "final.msan", "epoch0000.msan", "report.csv", "config.json"} <= names
        assert load_checkpoint(trained / "final.msan").state["step"] == 2

    def test_logs_resolved_config_with_timestamps(self, tmp_path, config, capfd):
        data = write_images(tmp_path / "d")
        main(["train", "--config", str(config), "--data", str(data), "--epochs", "0", "--out", str(tmp_path / "o")])
        err = capfd.readouterr().err
        line = next(ln for ln in err.splitlines() if "resolved config" in ln)
        assert line[:4].isdigit() and line[10] == "T"
        assert '"base_channels": 8' in line

    def test_resume_finished_run(self, tmp_path, trained, config, capfd):
        capfd.readouterr()
        rc = main(["train", "--config", str(config), "--data", str(tmp_path / "train"),
                   "--resume", str(trained / "final.msan"), "--out", str(trained)])
        assert rc == 0
        assert "schedule complete" in capfd.readouterr().out

    def test_corrupt_resume_checkpoint(self, tmp_path, trained, config):
        bad = tmp_path / "bad.msan"
        bad.write_bytes((trained / "final.msan").read_bytes()[:50])
        rc = main(["train", "--config", str(config), "--data", str(tmp_path / "train"),
                   "--resume", str(bad), "--out", str(trained)])
        assert rc == 3


class TestDenoise:
    def test_arbitrary_size_single_image(self, tmp_path, trained):
        write_images(tmp_path / "in", n=1, size=(50, 50))
        out = tmp_path / "out.png"
        assert main(["denoise", "--ckpt", str(trained / "final.msan"), "--input", str(tmp_path / "in" / "img0.png"),
                     "--output", str(out)]) == 0
        assert Image.open(out).size == (50, 50)

    def test_directory_output_created(self, tmp_path, trained):
        write_images(tmp_path / "in", n=1, size=(16, 24))
        out = tmp_path / "new" / "dir"
        assert main(["denoise", "--ckpt", str(trained / "final.msan"), "--input", str(tmp_path / "in"),
                     "--output", str(out)]) == 0
        files = list(out.iterdir())
        assert len(files) == 1 and Image.open(files[0]).size == (24, 16)

    def test_gray_checkpoint_on_color_input(self, tmp_path, capfd):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({**TINY, "model": {**TINY["model"], "in_channels": 1}}))
        data = write_images(tmp_path / "gray", mode="L")
        assert main(["train", "--config", str(cfg), "--data", str(data), "--epochs", "0", "--out", str(tmp_path / "g")]) == 0
        color = write_images(tmp_path / "color", n=1)
        rc = main(["denoise", "--ckpt", str(tmp_path / "g" / "initial.msan"), "--input", str(color / "img0.png"),
                   "--output", str(tmp_path / "o.png")])
        assert rc == 2
        assert "expects 1-channel input" in capfd.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        write_images(tmp_path / "in", n=1)
        assert main(["denoise", "--ckpt", str(tmp_path / "none.msan"), "--input", str(tmp_path / "in"),
                     "--output", str(tmp_path / "o")]) == 3


class TestEval:
    def test_passthrough_noise_floor(self, tmp_path, capsys):
        clean = write_images(tmp_path / "c", n=2, size=(128, 128), mode="L", value=128)
        assert main(["eval", "--passthrough", "--clean-dir", str(clean), "--sigma", "30"]) == 0
        mean = float(capsys.readouterr().out.split()[2])
        assert mean == pytest.approx(18.59, abs=0.15)

    def test_empty_dir(self, tmp_path):
        (tmp_path / "e").mkdir()
        assert main(["eval", "--passthrough", "--clean-dir", str(tmp_path / "e"), "--sigma", "30"]) == 2

    def test_needs_checkpoint(self, tmp_path):
        clean = write_images(tmp_path / "c", n=1)
        assert main(["eval", "--clean-dir", str(clean), "--sigma", "30"]) == 2

    def test_reports_identical_for_fixed_seed(self, tmp_path, trained):
        clean = write_images(tmp_path / "c", n=2, size=(20, 20), seed=3)
        reports = []
        for k in range(2):
            rep = tmp_path / f"r{k}.csv"
            assert main(["eval", "--ckpt", str(trained / "final.msan"), "--clean-dir", str(clean), "--sigma", "30",
                         "--seed", "4", "--report", str(rep)]) == 0
            reports.append(rep.read_bytes())
        assert reports[0] == reports[1]
        assert reports[0].decode().splitlines()[-1].startswith("MEAN,")


class TestGradcheck:
    def test_op_scope_passes(self, capsys):
        assert main(["gradcheck", "--scope", "op"]) == 0
        out = capsys.readouterr().out
        assert "modulated_deform_conv" in out and "FAIL" not in out

    def test_bad_scope_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["gradcheck", "--scope", "galaxy"])
        assert e.value.code == 2


class TestSynth:
    def test_sigma_zero_roundtrip(self, tmp_path):
        clean = write_images(tmp_path / "c")
        assert main(["synth", "--clean-dir", str(clean), "--sigma", "0", "--out", str(tmp_path / "o")]) == 0
        for p in clean.iterdir():
            np.testing.assert_array_equal(np.asarray(Image.open(p)), np.asarray(Image.open(tmp_path / "o" / p.name)))

    def test_fixed_seed_bytes_and_isolation(self, tmp_path):
        clean = write_images(tmp_path / "c")
        main(["synth", "--clean-dir", str(clean), "--sigma", "25", "--seed", "1", "--out", str(tmp_path / "a")])
        write_images(tmp_path / "c2", n=1, seed=5)
        (tmp_path / "c2" / "img0.png").rename(clean / "extra.png")
        main(["synth", "--clean-dir", str(clean), "--sigma", "25", "--seed", "1", "--out", str(tmp_path / "b")])
        for name in ("img0.png", "img1.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_dir_is_io_error(self, tmp_path):
        assert main(["synth", "--clean-dir", str(tmp_path / "nope"), "--sigma", "5", "--out", str(tmp_path / "o")]) == 3
