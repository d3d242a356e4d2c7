import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from poidet.cli import main
from poidet.report import write_report
from poidet.runner import (generate_dataset, load_dataset,
                           parse_corruption_spec)
from poidet.config import load_config


SMALL_CFG = {
    "scene": {"n_boxes": 3,
              "grid": {"x_min": -12.0, "y_min": -12.0, "x_max": 12.0,
                       "y_max": 12.0, "voxel_x": 0.125, "voxel_y": 0.125,
                       "downsample": 8},
              "image_size": [96, 72], "focal": 50.0},
    "model": {"queries": 12, "channels": 32, "groups": 2, "heads": 2,
              "ffn_hidden": 64, "iterations": 2},
    "optim": {"epochs": 1},
    "data": {"train_scenes": 4, "eval_scenes": 2},
}


@pytest.fixture(scope="module")
def small_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL_CFG))
    return path


@pytest.fixture(scope="module")
def pipeline(small_cfg_path, tmp_path_factory):
    """gen + train + eval once; several tests inspect the artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    eval_data = root / "eval_data"
    run = root / "run"
    assert main(["gen", "--config", str(small_cfg_path), "--out", str(data),
                 "--count", "4", "--seed", "1"]) == 0
    assert main(["gen", "--config", str(small_cfg_path), "--out",
                 str(eval_data), "--count", "2", "--seed", "2"]) == 0
    assert main(["train", "--config", str(small_cfg_path), "--data", str(data),
                 "--out", str(run), "--seed", "1"]) == 0
    assert main(["eval", "--config", str(small_cfg_path), "--data",
                 str(eval_data), "--checkpoint", str(run / "checkpoint.ckpt"),
                 "--out", str(run), "--seed", "1",
                 "--corruption", "camera_drop:cameras=0+1"]) == 0
    return root


class TestGen:
    def test_zero_count_manifest_only(self, small_cfg_path, tmp_path):
        assert main(["gen", "--config", str(small_cfg_path), "--out",
                     str(tmp_path), "--count", "0", "--seed", "3"]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["count"] == 0 and manifest["entries"] == []

    def test_rerun_byte_identical(self, small_cfg_path, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert main(["gen", "--config", str(small_cfg_path), "--out",
                         str(out), "--count", "3", "--seed", "7"]) == 0
        for name in ["manifest.json"] + [f"scene_{i:05d}.json" for i in range(3)]:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_manifest_hashes_verify(self, small_cfg_path, tmp_path):
        import hashlib
        assert main(["gen", "--config", str(small_cfg_path), "--out",
                     str(tmp_path), "--count", "3", "--seed", "5"]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["entries"]) == 3
        for entry in manifest["entries"]:
            blob = (tmp_path / entry["file"]).read_bytes()
            assert hashlib.sha256(blob).hexdigest() == entry["sha256"]

    def test_dataset_loads(self, pipeline):
        scenes = load_dataset(pipeline / "data")
        assert len(scenes) == 4
        assert all(len(s.boxes) == 3 for s in scenes)


class TestTrain:
    def test_artifacts_exist(self, pipeline):
        run = pipeline / "run"
        for name in ("checkpoint.ckpt", "best.ckpt", "train_log.csv",
                     "train_meta.json"):
            assert (run / name).exists(), name

    def test_log_columns(self, pipeline):
        lines = (pipeline / "run" / "train_log.csv").read_text().splitlines()
        assert lines[0] == "step,total,l_cls,l_reg"
        assert len(lines) == 1 + 4  # 4 scenes, batch 1, 1 epoch

    def test_zero_epochs_checkpoint_equals_init(self, small_cfg_path, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg = json.loads(small_cfg_path.read_text())
        cfg["optim"]["epochs"] = 0
        cfg_path.write_text(json.dumps(cfg))
        data = tmp_path / "data"
        run = tmp_path / "run"
        assert main(["gen", "--config", str(cfg_path), "--out", str(data),
                     "--count", "2", "--seed", "1"]) == 0
        assert main(["train", "--config", str(cfg_path), "--data", str(data),
                     "--out", str(run), "--seed", "1"]) == 0
        from poidet.decoder import load_checkpoint
        from poidet.runner import build_model_from_config
        loaded = load_checkpoint(run / "checkpoint.ckpt")
        model = build_model_from_config(load_config(cfg_path, {"seed": 1}))
        for name, tensor in model.named_parameters().items():
            assert np.array_equal(loaded[name], tensor.data), name

    def test_first_step_reproducible(self, small_cfg_path, pipeline, tmp_path):
        run2 = tmp_path / "run2"
        assert main(["train", "--config", str(small_cfg_path), "--data",
                     str(pipeline / "data"), "--out", str(run2),
                     "--seed", "1"]) == 0
        log_a = (pipeline / "run" / "train_log.csv").read_text()
        log_b = (run2 / "train_log.csv").read_text()
        assert log_a.splitlines()[1] == log_b.splitlines()[1]
        assert log_a == log_b  # whole run is deterministic

    def test_missing_dataset_exit_2(self, small_cfg_path, tmp_path):
        assert main(["train", "--config", str(small_cfg_path), "--data",
                     str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


class TestEval:
    def test_report_schema(self, pipeline):
        report = json.loads((pipeline / "run" / "eval_report.json").read_text())
        assert report["schema"] == "poidet-eval-report/1"
        assert 0.0 <= report["map"] <= 1.0
        assert len(report["mean_center_error"]) == 2  # iterations
        assert report["n_scenes"] == 2
        assert len(report["corruptions"]) == 1
        assert report["corruptions"][0]["spec"] == "camera_drop:cameras=0+1"

    def test_rerun_bit_identical(self, small_cfg_path, pipeline, tmp_path):
        out2 = tmp_path / "out2"
        assert main(["eval", "--config", str(small_cfg_path), "--data",
                     str(pipeline / "eval_data"), "--checkpoint",
                     str(pipeline / "run" / "checkpoint.ckpt"), "--out",
                     str(out2), "--seed", "1",
                     "--corruption", "camera_drop:cameras=0+1"]) == 0
        assert ((pipeline / "run" / "eval_report.json").read_bytes()
                == (out2 / "eval_report.json").read_bytes())

    def test_empty_dataset_exit_2(self, small_cfg_path, tmp_path, pipeline):
        empty = tmp_path / "empty"
        assert main(["gen", "--config", str(small_cfg_path), "--out",
                     str(empty), "--count", "0", "--seed", "1"]) == 0
        code = main(["eval", "--config", str(small_cfg_path), "--data",
                     str(empty), "--checkpoint",
                     str(pipeline / "run" / "checkpoint.ckpt"),
                     "--out", str(tmp_path)])
        assert code == 2

    def test_corruption_spec_parsing(self):
        sweep = parse_corruption_spec("calib_offset:sweep=0+0.5+1.0", seed=4)
        assert [c.max_offset for c in sweep] == [0.0, 0.5, 1.0]
        assert all(c.seed == 4 for c in sweep)
        drop = parse_corruption_spec("camera_drop:cameras=0+2")
        assert drop[0].cameras == (0, 2)
        sector = parse_corruption_spec("lidar_sector:center=45,width=24")
        assert sector[0].center_deg == 45.0 and sector[0].width_deg == 24.0

    def test_bad_corruption_spec_exit_2(self, small_cfg_path, pipeline,
                                        tmp_path):
        code = main(["eval", "--config", str(small_cfg_path), "--data",
                     str(pipeline / "eval_data"), "--checkpoint",
                     str(pipeline / "run" / "checkpoint.ckpt"), "--out",
                     str(tmp_path), "--corruption", "fog:density=1"])
        assert code == 2


class TestGradcheckCmd:
    def test_passes_and_writes_json(self, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["schema"] == "poidet-gradcheck/1"
        assert report["pass"] is True
        assert report["worst_rel_err"] < report["tolerance"]
        assert len(report["blocks"]) > 20

    def test_negative_control_exit_3(self, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path),
                     "--corrupt-block", "ffn.w1"]) == 3
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["pass"] is False
        assert report["worst_block"] == "ffn.w1"


class TestReportCmd:
    def test_report_outputs(self, pipeline):
        assert main(["report", "--run", str(pipeline / "run")]) == 0
        run = pipeline / "run"
        summary = json.loads((run / "summary.json").read_text())
        assert summary["schema"] == "poidet-summary/1"
        assert "loss_curve.svg" in summary["charts"]
        assert "center_error.svg" in summary["charts"]
        assert "corruption_sweep.svg" in summary["charts"]
        for chart in summary["charts"]:
            ET.fromstring((run / chart).read_text())  # valid XML/SVG

    def test_report_deterministic(self, pipeline, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        write_report(pipeline / "run", out_a)
        write_report(pipeline / "run", out_b)
        for name in ("summary.json", "loss_curve.svg"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_empty_run_dir_exit_2(self, tmp_path):
        assert main(["report", "--run", str(tmp_path)]) == 2


class TestConfigErrors:
    def test_bad_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"queries": 0}}))
        assert main(["gen", "--config", str(bad), "--out", str(tmp_path),
                     "--count", "1"]) == 2
