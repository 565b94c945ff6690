"""CLI surface: commands, exit codes, reproducibility, run metadata."""

import json

import numpy as np
import pytest

from triplane_diffusion import cli
from triplane_diffusion.config import RunConfig, load_ini


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus a briefly trained checkpoint, shared by tests."""
    root = tmp_path_factory.mktemp("ws")
    data = root / "data"
    rc = cli.main(["gen-dataset", "--scenes", "2", "--views-train", "2",
                   "--views-test", "2", "--res", "16", "--seed", "3",
                   "--out", str(data)])
    assert rc == 0
    run = root / "train"
    rc = cli.main(["train", "--data", str(data), "--out", str(run),
                   "--steps", "2", "--batch", "2", "--seed", "1",
                   "--timesteps", "4", "--image-size", "16",
                   "--channels", "8", "--ckpt-every", "0", "--deterministic"])
    assert rc == 0
    return {"root": root, "data": data,
            "ckpt": run / "checkpoints" / "final.ckpt"}


class TestGenDataset:
    def test_expected_file_count(self, tmp_path):
        out = tmp_path / "d"
        rc = cli.main(["gen-dataset", "--scenes", "2", "--views-train", "2",
                       "--views-test", "1", "--res", "16", "--seed", "1",
                       "--out", str(out)])
        assert rc == 0
        assert len(list(out.glob("scene_*/view_*.png"))) == 6

    def test_repeat_is_bit_identical(self, tmp_path):
        args = ["gen-dataset", "--scenes", "1", "--views-train", "2",
                "--views-test", "1", "--res", "16", "--seed", "9"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        for rel in ["manifest.json", "scene_0000/view_01.png"]:
            assert ((tmp_path / "a" / rel).read_bytes()
                    == (tmp_path / "b" / rel).read_bytes())

    def test_zero_scenes_is_usage_error(self, tmp_path, capsys):
        rc = cli.main(["gen-dataset", "--scenes", "0", "--out",
                       str(tmp_path / "x")])
        assert rc == 1
        assert "scene" in capsys.readouterr().err

    def test_refuses_to_overwrite(self, tmp_path):
        out = tmp_path / "d"
        args = ["gen-dataset", "--scenes", "1", "--views-train", "1",
                "--views-test", "0", "--res", "16", "--out", str(out)]
        assert cli.main(args) == 0
        assert cli.main(args) == 1


class TestTrain:
    def test_missing_dataset_exits_one(self, tmp_path, capsys):
        rc = cli.main(["train", "--data", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "run")])
        assert rc == 1
        assert "nope" in capsys.readouterr().err

    def test_resolution_mismatch_reported(self, workspace, tmp_path, capsys):
        rc = cli.main(["train", "--data", str(workspace["data"]),
                       "--out", str(tmp_path / "run"), "--steps", "1"])
        assert rc == 1
        assert "resolution" in capsys.readouterr().err

    def test_run_dir_contains_reproducibility_metadata(self, workspace):
        run_dir = workspace["ckpt"].parent.parent
        assert (run_dir / "config.ini").exists()
        assert (run_dir / "metrics.jsonl").exists()
        meta = json.loads((run_dir / "run.json").read_text())
        assert meta["command"] == "train"
        assert meta["format_versions"]["checkpoint"] == 1
        cfg = load_ini(run_dir / "config.ini")
        assert cfg.model.image_size == 16
        assert cfg.timesteps == 4


class TestGenerate:
    def test_same_seed_identical_pngs(self, workspace, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = cli.main(["generate", "--ckpt", str(workspace["ckpt"]),
                           "--seed", "7", "--out", str(out)])
            assert rc == 0
            outs.append((out / "image.png").read_bytes())
        assert outs[0] == outs[1]

    def test_outputs_and_metadata(self, workspace, tmp_path):
        out = tmp_path / "gen"
        rc = cli.main(["generate", "--ckpt", str(workspace["ckpt"]),
                       "--seed", "2", "--out", str(out), "--novel-views", "2"])
        assert rc == 0
        assert (out / "image.png").exists()
        assert (out / "image_depth.png").exists()
        assert (out / "novel_01.png").exists()
        meta = json.loads((out / "run.json").read_text())
        assert "sha256" in meta["checkpoint"]
        sample_meta = json.loads((out / "image_meta.json").read_text())
        assert sample_meta["seed"] == 2
        assert sample_meta["denoiser_calls"] == 4

    def test_missing_checkpoint_exits_one(self, tmp_path, capsys):
        rc = cli.main(["generate", "--ckpt", str(tmp_path / "missing.ckpt"),
                       "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "missing.ckpt" in capsys.readouterr().err


class TestReconstruct:
    def test_tr_zero_reports_single_call(self, workspace, tmp_path):
        out = tmp_path / "rec"
        rc = cli.main(["reconstruct", "--ckpt", str(workspace["ckpt"]),
                       "--data", str(workspace["data"]), "--scene", "0",
                       "--view", "2", "--split", "test", "--tr", "0",
                       "--out", str(out)])
        assert rc == 0
        meta = json.loads((out / "run.json").read_text())
        assert meta["denoiser_calls"] == 1

    def test_env_var_data_root(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.DATA_ENV, str(workspace["data"]))
        out = tmp_path / "rec"
        rc = cli.main(["reconstruct", "--ckpt", str(workspace["ckpt"]),
                       "--scene", "0", "--view", "2", "--tr", "1",
                       "--out", str(out)])
        assert rc == 0

    def test_unknown_view_is_usage_error(self, workspace, tmp_path, capsys):
        rc = cli.main(["reconstruct", "--ckpt", str(workspace["ckpt"]),
                       "--data", str(workspace["data"]), "--scene", "0",
                       "--view", "9", "--out", str(tmp_path / "x")])
        assert rc == 1


class TestInpaint:
    def test_mask_eval_multiple_seeds(self, workspace, tmp_path):
        out = tmp_path / "inp"
        rc = cli.main(["inpaint", "--ckpt", str(workspace["ckpt"]),
                       "--data", str(workspace["data"]), "--scene", "0",
                       "--view", "2", "--mask-eval", "--seeds", "2",
                       "--seed", "5", "--out", str(out)])
        assert rc == 0
        assert (out / "seed_0005.png").exists()
        assert (out / "seed_0006.png").exists()
        assert (out / "mask.png").exists()

    def test_requires_mask_source(self, workspace, tmp_path, capsys):
        rc = cli.main(["inpaint", "--ckpt", str(workspace["ckpt"]),
                       "--data", str(workspace["data"]), "--scene", "0",
                       "--view", "2", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "mask" in capsys.readouterr().err


class TestEval:
    def test_report_files_written(self, workspace, tmp_path):
        out = tmp_path / "eval"
        rc = cli.main(["eval", "--ckpt", str(workspace["ckpt"]),
                       "--data", str(workspace["data"]), "--tr", "0",
                       "--out", str(out)])
        assert rc == 0
        assert (out / "report.txt").exists()
        kv = dict(line.split("=") for line in
                  (out / "report.kv").read_text().splitlines())
        assert "psnr_db" in kv and "ssim" in kv


class TestInputImmutability:
    def test_commands_do_not_mutate_dataset_or_checkpoint(self, workspace, tmp_path):
        data_files = sorted(workspace["data"].rglob("*"))
        before = [(p, p.read_bytes()) for p in data_files if p.is_file()]
        ckpt_before = workspace["ckpt"].read_bytes()
        assert cli.main(["eval", "--ckpt", str(workspace["ckpt"]),
                         "--data", str(workspace["data"]), "--tr", "0",
                         "--out", str(tmp_path / "e")]) == 0
        assert cli.main(["reconstruct", "--ckpt", str(workspace["ckpt"]),
                         "--data", str(workspace["data"]), "--scene", "1",
                         "--view", "2", "--tr", "1",
                         "--out", str(tmp_path / "r")]) == 0
        for path, blob in before:
            assert path.read_bytes() == blob
        assert workspace["ckpt"].read_bytes() == ckpt_before


class TestParser:
    def test_unknown_command_is_usage_error(self, capsys):
        assert cli.main(["frobnicate"]) == 1

    def test_config_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.write(tmp_path / "c.ini")
        loaded = load_ini(tmp_path / "c.ini")
        assert loaded.model.to_dict() == cfg.model.to_dict()
        assert loaded.timesteps == cfg.timesteps
        assert loaded.train.lr == cfg.train.lr
