import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from srseg.cli import main
from srseg.config import ConfigError, load_config
from srseg.geotiff import read_geotiff, write_geotiff
from srseg.raster import GeoRaster, GeoTransform

UTM = GeoTransform(500000.0, 3200000.0, 1.0, 1.0, "EPSG:32648")


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.seed == 0 and cfg.deterministic
        assert cfg.sr.generator.feat_width == 32
        assert cfg.train.sr_gan.lr_generator == pytest.approx(5e-5)

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 5\ntrain:\n  seg:\n    steps: 42\n")
        cfg = load_config(path, overrides=["train.seg.steps=7", "data.hr_size=40"])
        assert cfg.seed == 5
        assert cfg.train.seg.steps == 7        # flags beat the file
        assert cfg.data.hr_size == 40

    def test_env_overrides(self, tmp_path):
        cfg = load_config(None, environ={"SRSEG_SEED": "9",
                                         "SRSEG_TRAIN__SEG__STEPS": "11"})
        assert cfg.seed == 9 and cfg.train.seg.steps == 11

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("sneaky: 1\n")
        with pytest.raises(ConfigError, match="sneaky"):
            load_config(path)

    def test_nested_unknown_key_named(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train:\n  seg:\n    stepz: 5\n")
        with pytest.raises(ConfigError, match="stepz"):
            load_config(path)

    def test_invalid_value_surfaces_section(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("data:\n  fractions: [0.5, 0.2]\n")
        with pytest.raises(ConfigError, match="fractions"):
            load_config(path)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent.yaml")

    def test_snapshot_round_trip(self, tmp_path):
        cfg = load_config(None, overrides=["seed=3"])
        snap = cfg.snapshot(tmp_path)
        again = load_config(snap)
        assert again == cfg


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture()
def tiny_yaml(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(
        "data: {n_scenes: 4, hr_size: 40, fractions: [0.5, 0.25, 0.25]}\n"
        "sr:\n"
        "  generator: {n_rrdb_stage1: 1, n_rrdb_stage2: 1, feat_width: 8, "
        "growth_channels: 8}\n"
        "  discriminator: {depth: 2, base_channels: 8}\n"
        "seg: {base_channels: 8, depth: 2}\n"
        "train:\n"
        "  sr_psnr: {steps: 6, batch_size: 1, crop_lr: 4, val_every: 3, "
        "log_every: 2}\n"
        "  sr_gan: {phase: gan, steps: 3, batch_size: 1, crop_lr: 4, "
        "val_every: 0, lr_generator: 5.0e-5}\n"
        "  seg: {steps: 10, batch_size: 1, crop_lr: 4, val_every: 5, "
        "rgb_source: sr}\n"
        "infer: {tile_size: 24, halo: 4}\n")
    return cfg


class TestCliWorkflow:
    def test_full_workflow(self, tiny_yaml, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli("synth-data", "-c", tiny_yaml, "--output-dir", out) == 0
        manifest = out / "dataset" / "manifest.json"
        assert manifest.exists()
        assert (out / "config_snapshot.yaml").exists()

        assert run_cli("train-sr", "-c", tiny_yaml, "--output-dir", out,
                       "--manifest", manifest) == 0
        psnr_ckpt = out / "sr_psnr.ckpt"
        assert psnr_ckpt.exists()
        log = out / "logs" / "sr_psnr.jsonl"
        for line in log.read_text().strip().splitlines():
            json.loads(line)

        assert run_cli("train-sr", "-c", tiny_yaml, "--output-dir", out,
                       "--manifest", manifest, "--phase", "gan",
                       "--init", psnr_ckpt) == 0
        assert (out / "sr_gan.ckpt").exists()

        assert run_cli("train-seg", "-c", tiny_yaml, "--output-dir", out,
                       "--manifest", manifest, "--sr-checkpoint", psnr_ckpt) == 0
        seg_ckpt = out / "seg.ckpt"
        assert seg_ckpt.exists()

        scene_s2 = sorted((out / "dataset" / "scenes").glob("*_s2.tif"))[0]
        assert run_cli("infer", "-c", tiny_yaml, "--output-dir", out,
                       "--input", scene_s2, "--output", "isa.tif",
                       "--sr-checkpoint", psnr_ckpt,
                       "--seg-checkpoint", seg_ckpt) == 0
        isa = read_geotiff(out / "isa.tif")
        assert isa.data.shape == (1, 40, 40)
        assert set(np.unique(isa.data)) <= {0, 1}
        assert (out / "isa.tif.provenance.json").exists()

    def test_gan_without_init_exits_2(self, tiny_yaml, tmp_path):
        out = tmp_path / "run"
        run_cli("synth-data", "-c", tiny_yaml, "--output-dir", out)
        code = run_cli("train-sr", "-c", tiny_yaml, "--output-dir", out,
                       "--manifest", out / "dataset" / "manifest.json",
                       "--phase", "gan")
        assert code == 2

    def test_bad_fraction_sum_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("data: {n_scenes: 4, hr_size: 40, "
                       "fractions: [0.5, 0.2, 0.2]}\n")
        assert run_cli("synth-data", "-c", cfg, "--output-dir",
                       tmp_path / "o") == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("nonsense: true\n")
        assert run_cli("synth-data", "-c", cfg, "--output-dir",
                       tmp_path / "o") == 2

    def test_missing_checkpoint_exits_2(self, tiny_yaml, tmp_path):
        code = run_cli("infer", "-c", tiny_yaml, "--output-dir", tmp_path / "o",
                       "--input", "nope.tif", "--output", "x.tif",
                       "--sr-checkpoint", "missing.ckpt",
                       "--seg-checkpoint", "missing.ckpt")
        assert code == 2


class TestCliReports:
    def _write_masks(self, tmp_path):
        rng = np.random.default_rng(0)
        ref = (rng.random((64, 64)) < 0.4).astype(np.uint8)
        noisy = ref ^ (rng.random((64, 64)) < 0.05).astype(np.uint8)
        ref_p, pred_p = tmp_path / "ref.tif", tmp_path / "pred.tif"
        write_geotiff(GeoRaster(ref[None], UTM), ref_p)
        write_geotiff(GeoRaster(noisy[None], UTM), pred_p)
        return pred_p, ref_p

    def test_eval_outputs(self, tmp_path):
        pred, ref = self._write_masks(tmp_path)
        out = tmp_path / "rep"
        assert run_cli("eval", "--pred", pred, "--ref", ref,
                       "--output-dir", out) == 0
        header = (out / "eval.csv").read_text().splitlines()[0]
        assert header == "Class,Precision,Recall,F1-score,IOU,OA"
        payload = json.loads((out / "eval.json").read_text())
        assert 0 < payload["isa"]["f1"] <= 1

    def test_eval_identical_masks_all_ones(self, tmp_path):
        rng = np.random.default_rng(1)
        mask = (rng.random((32, 32)) < 0.5).astype(np.uint8)
        p = tmp_path / "m.tif"
        write_geotiff(GeoRaster(mask[None], UTM), p)
        out = tmp_path / "rep"
        assert run_cli("eval", "--pred", p, "--ref", p, "--output-dir", out) == 0
        payload = json.loads((out / "eval.json").read_text())
        assert payload["isa"]["f1"] == 1.0
        assert payload["overall_accuracy"] == 1.0

    def test_compare_outputs(self, tmp_path):
        pred, ref = self._write_masks(tmp_path)
        out = tmp_path / "cmp"
        assert run_cli("compare", "--reference", ref, "--products", pred, ref,
                       "--names", "noisy", "self", "--output-dir", out) == 0
        rows = (out / "compare.csv").read_text().splitlines()
        assert rows[0] == "Product,Class,Precision,Recall,F1-score,IOU,OA"
        assert len(rows) == 1 + 6

    def test_change_with_bundled_areas(self, tmp_path):
        out = tmp_path / "chg"
        assert run_cli("change", "--output-dir", out) == 0
        table = json.loads((out / "change.json").read_text())
        cells = {r["epoch"]: r["cells"]["Chongqing"]["rate_percent"]
                 for r in table["rows"]}
        assert cells[2019] == 25.84
        assert cells[2021] == 25.62
        assert cells[2023] == 12.92

    def test_change_rerun_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "c1", tmp_path / "c2"
        run_cli("change", "--output-dir", out1, "--deterministic")
        run_cli("change", "--output-dir", out2, "--deterministic")
        assert (out1 / "change.csv").read_bytes() == (out2 / "change.csv").read_bytes()
        assert (out1 / "change.json").read_bytes() == (out2 / "change.json").read_bytes()


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "srseg.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "synth-data" in proc.stdout
