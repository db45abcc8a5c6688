"""End-to-end command-line workflows on a miniature scene."""

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import small_toy_spec
from voxelrf.cli import ablation_variants, main

TINY_TRAIN_TOML = """
[train]
scene_type = "inward"
seed = 0

[[train.stages]]
name = "coarse"
resolution = [16, 16, 16]
iterations = 30
batch_rays = 256
sampled_rays = 64
patch_size = 4
alpha_init = 1e-2
[train.stages.weights]
tvf = 1e-7
tvd = 1e-7
catv = 1e-7
ds = 1e-6
"""

TINY_ABLATE_TOML = """
[train]
scene_type = "inward"
seed = 0

[[train.stages]]
resolution = [12, 12, 12]
iterations = 4
batch_rays = 128
sampled_rays = 32
patch_size = 4
alpha_init = 1e-2
[train.stages.weights]
tvd = 1e-7
ds = 1e-6
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A toy dataset plus a trained checkpoint, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(small_toy_spec().to_dict()))
    data_dir = str(root / "data")
    assert main(["make-toy", "--spec", str(spec_path),
                 "--out", data_dir]) == 0

    config_path = root / "train.toml"
    config_path.write_text(TINY_TRAIN_TOML)
    run_dir = str(root / "run")
    assert main(["train", "--config", str(config_path), "--data", data_dir,
                 "--out", run_dir, "--views", "4"]) == 0
    return root, data_dir, str(config_path), run_dir


class TestBasics:
    def test_no_arguments_prints_usage(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_errors_are_one_line_nonzero(self, capsys, tmp_path):
        code = main(["train", "--config", "no-such-preset",
                     "--data", str(tmp_path), "--out", str(tmp_path / "o")])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:") and "\n" not in err

    def test_console_entry_point_runs(self):
        proc = subprocess.run([sys.executable, "-m", "voxelrf.cli"],
                              capture_output=True)
        assert proc.returncode == 2


class TestWorkflows:
    def test_train_outputs(self, workspace):
        _, _, _, run_dir = workspace
        assert os.path.isfile(os.path.join(run_dir, "coarse.ckpt"))
        with open(os.path.join(run_dir, "train_log.csv")) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 30
        assert float(rows[-1]["total"]) > 0

    def test_eval_writes_report(self, workspace, capsys):
        root, data_dir, _, run_dir = workspace
        report_path = str(root / "report.json")
        code = main(["eval", "--ckpt", os.path.join(run_dir, "coarse.ckpt"),
                     "--data", data_dir, "--report", report_path])
        assert code == 0
        with open(report_path) as f:
            report = json.load(f)
        assert report["n_views"] == 3
        assert np.isfinite(report["mean_psnr"])
        assert "mean PSNR" in capsys.readouterr().out

    def test_render_writes_images_and_depth(self, workspace):
        root, data_dir, _, run_dir = workspace
        out_dir = str(root / "renders")
        code = main(["render", "--ckpt", os.path.join(run_dir, "coarse.ckpt"),
                     "--poses", os.path.join(data_dir, "transforms_test.json"),
                     "--out", out_dir, "--width", "24", "--depth"])
        assert code == 0
        assert os.path.isfile(os.path.join(out_dir, "r_000.png"))
        assert os.path.isfile(os.path.join(out_dir, "d_000.pfm"))

    def test_ablate_writes_full_matrix(self, workspace, tmp_path):
        root, data_dir, _, _ = workspace
        config_path = tmp_path / "ablate.toml"
        config_path.write_text(TINY_ABLATE_TOML)
        out_csv = str(tmp_path / "ablation.csv")
        code = main(["ablate", "--data", data_dir, "--out", out_csv,
                     "--config", str(config_path), "--views", "3",
                     "--seeds", "1"])
        assert code == 0
        with open(out_csv) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 8
        combos = {(r["inc"], r["ds"], r["cavs"]) for r in rows}
        assert len(combos) == 8
        assert all(np.isfinite(float(r["psnr"])) for r in rows)

    def test_variant_matrix_shape(self):
        variants = ablation_variants()
        assert len(variants) == 8
        assert (True, True, True) in variants and (False, False, False) in variants
