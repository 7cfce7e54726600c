import json
import math

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from gsir.cli import main
from gsir.errors import EXIT_FORMAT, EXIT_IO, EXIT_USAGE
from gsir.imageio import write_png
from gsir.rng import named_rng
from gsir.stagewise.predictor import TinyLinearPredictor, load_weights, save_weights
from gsir.stagewise.training import POD_COLUMNS

from fixture import corpus_dir, crop_png, tiny

TRAIN_YAML = """\
control:
  patch_size: 8
  n_stages: 2
pod:
  steps: {steps}
  K: 1
  milestones: [0, 1]
  checkpoint_every: 1
finetune:
  steps: {steps}
"""


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


def run(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def report(result):
    assert result.exit_code == 0, result.stderr
    return json.loads(result.stdout)


class TestEncodeDecode:
    def test_round_trip_with_prefixes(self, runner, tmp_path, crop_png):
        stream = tmp_path / "crop.gsir"
        enc = report(run(runner, "encode", crop_png, "-o", stream, "-p", 7, "-s", 2))
        assert enc["size_bytes"] == stream.stat().st_size
        assert enc["count"] <= enc["capacity"]
        assert len(enc["stages"]) == 2

        out = tmp_path / "recon.png"
        dec = report(run(runner, "decode", stream, "-o", out, "--prefix", tmp_path / "prefixes"))
        assert out.exists()
        assert dec["count"] == enc["count"]
        assert len(dec["prefixes"]) == 2
        assert sorted(p.name for p in (tmp_path / "prefixes").iterdir()) == ["recon_stage1.png", "recon_stage2.png"]

    def test_deterministic(self, runner, tmp_path, crop_png):
        a, b = tmp_path / "a.gsir", tmp_path / "b.gsir"
        report(run(runner, "encode", crop_png, "-o", a, "-p", 7, "-s", 2, "-k", 2))
        report(run(runner, "encode", crop_png, "-o", b, "-p", 7, "-s", 2, "-k", 2))
        assert a.read_bytes() == b.read_bytes()

    def test_density(self, runner, tmp_path, crop_png):
        stream = tmp_path / "crop.gsir"
        enc = report(run(runner, "encode", crop_png, "-o", stream, "-p", 7, "-s", 2))
        density = tmp_path / "density.pgm"
        report(run(runner, "decode", stream, "-o", tmp_path / "r.png", "--density", density, "--cell", 8))
        frame = pd.read_csv(density.with_suffix(".csv"))
        assert frame["count"].sum() == enc["count"]

    def test_tiny_predictor(self, runner, tmp_path, crop_png, tiny):
        weights = tmp_path / "tiny.gsw"
        save_weights(weights, tiny)
        enc = report(run(runner, "encode", crop_png, "-o", tmp_path / "t.gsir", "-p", 8, "-s", 2,
                         "--predictor", f"tiny:{weights}", "--strategy", "global"))
        assert enc["strategy"] == "global"
        assert enc["predictor"].startswith("tiny:")

    def test_corrupt_magic(self, runner, tmp_path, crop_png):
        stream = tmp_path / "crop.gsir"
        report(run(runner, "encode", crop_png, "-o", stream, "-p", 7, "-s", 2))
        stream.write_bytes(b"XXXX" + stream.read_bytes()[4:])
        assert run(runner, "decode", stream, "-o", tmp_path / "r.png").exit_code == EXIT_FORMAT

    def test_missing_input(self, runner, tmp_path):
        result = run(runner, "encode", tmp_path / "nope.png", "-o", tmp_path / "x.gsir")
        assert result.exit_code == EXIT_IO

    def test_bad_predictor(self, runner, tmp_path, crop_png):
        result = run(runner, "encode", crop_png, "-o", tmp_path / "x.gsir", "--predictor", "magic")
        assert result.exit_code == EXIT_USAGE


class TestEval:
    def test_identical(self, runner, tmp_path, crop_png):
        maps = tmp_path / "maps"
        out = report(run(runner, "eval", crop_png, crop_png, "--maps", maps, "-p", 7))
        assert out["psnr"] == 100.0
        assert out["ms_ssim"] == pytest.approx(1.0)
        frame = pd.read_csv(maps / "quality_maps.csv")
        assert list(frame.columns) == ["row", "col", "x0", "y0", "psnr", "ssim"]
        assert len(frame) == 25
        assert (frame["psnr"] == 100.0).all()
        assert (maps / "psnr_map.pgm").exists() and (maps / "ssim_map.pgm").exists()

    def test_constant_offset(self, runner, tmp_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        write_png(a, np.full((16, 16, 3), 100 / 255))
        write_png(b, np.full((16, 16, 3), 125 / 255))
        out = report(run(runner, "eval", a, b))
        assert out["psnr"] == pytest.approx(20.0 * math.log10(255.0 / 25.0), abs=1e-9)

    def test_dimension_mismatch(self, runner, tmp_path, crop_png):
        small = tmp_path / "small.png"
        write_png(small, np.zeros((16, 16, 3)))
        assert run(runner, "eval", crop_png, small).exit_code == EXIT_USAGE


class TestTrain:
    def write_config(self, tmp_path, steps):
        path = tmp_path / "train.yaml"
        path.write_text(TRAIN_YAML.format(steps=steps))
        return path

    def test_zero_steps(self, runner, tmp_path, corpus_dir):
        config = self.write_config(tmp_path, 0)
        weights, log = tmp_path / "w.gsw", tmp_path / "log.csv"
        out = report(run(runner, "--seed", 3, "train", "pod", corpus_dir, "-c", config, "-o", weights, "--log", log))
        assert out["final_total"] is None
        assert log.read_text().splitlines() == [",".join(POD_COLUMNS)]
        expected = TinyLinearPredictor.initialize(8, 2, named_rng(3, "tiny-init"))
        for a, b in zip(load_weights(weights).weights, expected.weights):
            np.testing.assert_array_equal(a, b)

    def test_pod_then_finetune(self, runner, tmp_path, corpus_dir):
        config = self.write_config(tmp_path, 2)
        pod_w, ft_w = tmp_path / "pod.gsw", tmp_path / "ft.gsw"
        pod = report(run(runner, "train", "pod", corpus_dir, "-c", config, "-o", pod_w, "--log", tmp_path / "pod.csv"))
        assert math.isfinite(pod["final_total"])
        ft = report(run(runner, "train", "finetune", corpus_dir, "-c", config, "-o", ft_w,
                        "--log", tmp_path / "ft.csv", "--init", pod_w))
        assert ft["mode"] == "finetune"
        assert len(pd.read_csv(tmp_path / "ft.csv")) == 2

    def test_resume_mode_mismatch(self, runner, tmp_path, corpus_dir):
        config = self.write_config(tmp_path, 2)
        ckpt = tmp_path / "ckpt.npz"
        report(run(runner, "train", "pod", corpus_dir, "-c", config, "-o", tmp_path / "w.gsw",
                   "--log", tmp_path / "log.csv", "--checkpoint", ckpt))
        assert ckpt.exists()
        result = run(runner, "train", "finetune", corpus_dir, "-c", config, "-o", tmp_path / "w2.gsw",
                     "--log", tmp_path / "log2.csv", "--resume", ckpt)
        assert result.exit_code == EXIT_USAGE

    def test_bad_config(self, runner, tmp_path, corpus_dir):
        config = tmp_path / "bad.yaml"
        config.write_text("pod:\n  steps: -4\n")
        result = run(runner, "train", "pod", corpus_dir, "-c", config, "-o", tmp_path / "w.gsw",
                     "--log", tmp_path / "log.csv")
        assert result.exit_code == EXIT_USAGE


class TestBench:
    def test_thresholds(self, runner, tmp_path, corpus_dir):
        out = report(run(runner, "bench", "thresholds", corpus_dir, "-o", tmp_path / "bench",
                         "-p", 7, "-s", 2, "-k", 0))
        frame = pd.read_csv(out["tables"][0])
        assert out["images"] == 3
        for _, rows in frame.groupby("image"):
            graded = rows[rows["tau_psnr"] > 0]
            assert list(graded["activated"]) == sorted(graded["activated"])
            assert (rows[rows["tau_psnr"] == 0]["later_stage_count"] == 0).all()


class TestSchema:
    def test_every_report(self, runner):
        for name in ("encode", "decode", "eval", "train", "bench"):
            schema = json.loads(run(runner, "schema", name).stdout)
            assert "properties" in schema
