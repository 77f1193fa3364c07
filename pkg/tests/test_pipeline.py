import json

import numpy as np
import pytest
import torch

from srseg.checkpoint import Checkpoint
from srseg.geotiff import read_geotiff
from srseg.pipeline import (InferenceConfig, MosaicAccumulator, PipelineError,
                            _tile_weights, binarize, run_isa_pipeline,
                            segment_scene, superresolve_scene)
from srseg.raster import GeoRaster, GeoTransform, make_tiles
from srseg.segnet import ModalityConfig, SegConfig, build_seg_model
from srseg.srnet import GeneratorConfig, build_generator
from srseg.srtrain import RGB_BAND_INDICES

UTM10 = GeoTransform(500000.0, 3200000.0, 10.0, 10.0, "EPSG:32648")
TINY_GEN = GeneratorConfig(n_rrdb_stage1=1, n_rrdb_stage2=1, feat_width=8,
                           growth_channels=8)


def gen_checkpoint(seed=0):
    torch.manual_seed(seed)
    gen = build_generator(TINY_GEN)
    from dataclasses import asdict
    return Checkpoint.from_state_dict(
        {f"gen.{k}": v for k, v in gen.state_dict().items()},
        config={"generator": asdict(TINY_GEN)},
        meta={"phase": "psnr", "step": 0, "seed": seed}), gen


def seg_checkpoint(mode="RGB+S2", depth=2, seed=0):
    torch.manual_seed(seed)
    cfg = SegConfig(base_channels=8, depth=depth,
                    modality=ModalityConfig(mode=mode))
    model = build_seg_model(cfg)
    from dataclasses import asdict
    stats = {"rgb_mean": [0.3] * 3, "rgb_std": [0.2] * 3,
             "s2_mean": [0.25] * 12, "s2_std": [0.15] * 12}
    return Checkpoint.from_state_dict(
        {f"seg.{k}": v for k, v in model.state_dict().items()},
        config={"seg": asdict(cfg)},
        meta={"phase": "seg", "step": 0, "seed": seed, "stats": stats}), model


class TestBlendWeights:
    @pytest.mark.parametrize("blend", ["center-crop", "cosine-feather"])
    @pytest.mark.parametrize("h, w, tile, halo", [
        (64, 64, 56, 24), (160, 160, 64, 8), (100, 130, 48, 8), (37, 91, 24, 4),
    ])
    def test_partition_of_unity(self, blend, h, w, tile, halo):
        spec = make_tiles(h, w, tile, halo)
        weights = _tile_weights(spec, 1, blend)
        total = np.zeros((h, w))
        for i in range(spec.n_tiles):
            r0, r1, c0, c1 = spec.window(i)
            total[r0:r1, c0:c1] += weights[i]
        assert np.abs(total - 1.0).max() < 1e-6

    def test_partition_at_scale_10(self):
        spec = make_tiles(32, 32, 24, 4, align=2)
        for blend in ("center-crop", "cosine-feather"):
            weights = _tile_weights(spec, 10, blend)
            total = np.zeros((320, 320))
            for i in range(spec.n_tiles):
                r0, r1, c0, c1 = spec.window(i)
                total[10 * r0:10 * r1, 10 * c0:10 * c1] += weights[i]
            assert np.abs(total - 1.0).max() < 1e-6

    def test_mosaic_accumulator_guards(self):
        acc = MosaicAccumulator(1, 4, 4)
        acc.add((0, 4, 0, 4), np.ones((1, 4, 4)), np.full((4, 4), 0.5))
        with pytest.raises(AssertionError):
            acc.check_partition()
        acc.add((0, 4, 0, 4), np.ones((1, 4, 4)), np.full((4, 4), 0.5))
        acc.check_partition()
        assert np.allclose(acc.finalize(), 1.0)


class TestSuperresolveScene:
    def test_output_geometry(self):
        ckpt, _ = gen_checkpoint()
        rng = np.random.default_rng(0)
        scene = GeoRaster(rng.random((3, 160, 160)).astype(np.float32), UTM10)
        out = superresolve_scene(scene, ckpt, InferenceConfig(tile_size=96, halo=25))
        assert out.data.shape == (3, 1600, 1600)
        assert out.transform.pixel_size_x == 1.0
        assert out.transform.origin_x == scene.transform.origin_x
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_single_tile_equals_direct_forward(self):
        ckpt, gen = gen_checkpoint()
        rng = np.random.default_rng(1)
        scene = GeoRaster(rng.random((3, 24, 24)).astype(np.float32), UTM10)
        out = superresolve_scene(scene, ckpt, InferenceConfig(tile_size=64, halo=8))
        _, direct = gen.predict(torch.from_numpy(scene.data)[None])
        assert np.array_equal(out.data, direct[0].numpy())

    def test_tiled_equals_whole_with_sufficient_halo(self):
        ckpt, gen = gen_checkpoint()
        rf = gen.receptive_field_radius()
        assert rf <= 24
        rng = np.random.default_rng(2)
        scene = GeoRaster(rng.random((3, 64, 64)).astype(np.float32), UTM10)
        tiled = superresolve_scene(scene, ckpt,
                                   InferenceConfig(tile_size=56, halo=24))
        _, whole = gen.predict(torch.from_numpy(scene.data)[None])
        diff = np.abs(tiled.data - whole[0].numpy()).max()
        assert diff < 1e-5

    def test_wrong_band_count_rejected(self):
        ckpt, _ = gen_checkpoint()
        scene = GeoRaster(np.zeros((12, 16, 16), dtype=np.float32), UTM10)
        with pytest.raises(ValueError, match="3 RGB"):
            superresolve_scene(scene, ckpt)


class TestSegmentScene:
    def _scene(self, n=32, seed=0):
        rng = np.random.default_rng(seed)
        rgb = GeoRaster(rng.random((3, 10 * n, 10 * n)).astype(np.float32),
                        UTM10.scaled(10))
        cube = GeoRaster(rng.random((12, n, n)).astype(np.float32), UTM10)
        return rgb, cube

    def test_output_grid_and_range(self):
        ckpt, _ = seg_checkpoint()
        rgb, cube = self._scene(32)
        prob = segment_scene(rgb, cube, ckpt, InferenceConfig(tile_size=24, halo=4))
        assert prob.data.shape == (1, 320, 320)
        assert prob.data.min() >= 0.0 and prob.data.max() <= 1.0
        assert prob.transform.pixel_size_x == 1.0

    def test_tiled_equals_whole(self):
        ckpt, model = seg_checkpoint(depth=2)
        rf = model.receptive_field_radius()
        assert rf <= 40  # 4 LR pixels of halo
        rgb, cube = self._scene(16, seed=3)
        tiled = segment_scene(rgb, cube, ckpt, InferenceConfig(tile_size=12, halo=4))
        from srseg.segtrain import Normalizer
        norm = Normalizer(seg_checkpoint()[0].meta["stats"])
        with torch.no_grad():
            whole = model(rgb=torch.from_numpy(norm.rgb(rgb.data))[None],
                          s2=torch.from_numpy(norm.s2(cube.data))[None]).prob
        diff = np.abs(tiled.data[0] - whole[0, 1].numpy()).max()
        assert diff < 1e-5

    def test_s2_only_modality(self):
        ckpt, _ = seg_checkpoint(mode="S2")
        _, cube = self._scene(32)
        prob = segment_scene(None, cube, ckpt, InferenceConfig(tile_size=24, halo=4))
        assert prob.data.shape == (1, 320, 320)

    def test_misaligned_inputs_rejected(self):
        ckpt, _ = seg_checkpoint()
        rgb, cube = self._scene(32)
        clipped = GeoRaster(rgb.data[:, :300, :300], rgb.transform)
        with pytest.raises(ValueError, match="misaligned"):
            segment_scene(clipped, cube, ckpt, InferenceConfig(tile_size=24, halo=4))

    def test_modality_requirements(self):
        ckpt, _ = seg_checkpoint(mode="RGB+S2")
        rgb, cube = self._scene(32)
        with pytest.raises(ValueError, match="cube"):
            segment_scene(rgb, None, ckpt, InferenceConfig(tile_size=24, halo=4))


class TestBinarize:
    def _prob(self, arr, nodata=None):
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim == 2:
            a = a[None]
        return GeoRaster(a, UTM10, nodata)

    def test_all_above_threshold(self):
        mask = binarize(self._prob(np.full((8, 8), 0.6)), 0.5)
        assert mask.data.dtype == np.uint8
        assert (mask.data == 1).all()

    def test_tie_goes_to_one(self):
        mask = binarize(self._prob(np.full((4, 4), 0.5)), 0.5)
        assert (mask.data == 1).all()

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(4)
        prob = self._prob(rng.random((32, 32)))
        counts = [int(binarize(prob, t).data.sum())
                  for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_nodata_propagates(self):
        arr = np.full((4, 4), 0.8, dtype=np.float32)
        arr[0, 0] = -1.0
        mask = binarize(self._prob(arr, nodata=-1.0), 0.5)
        assert mask.data[0, 0, 0] == 255
        assert mask.nodata == 255
        assert mask.data[0, 1, 1] == 1


class TestRunPipeline:
    def _cube(self, n=32, seed=5, nodata=None):
        rng = np.random.default_rng(seed)
        data = rng.random((12, n, n)).astype(np.float32)
        if nodata is not None:
            data[:, :2, :2] = nodata
        return GeoRaster(data, UTM10, nodata)

    def test_end_to_end_contract(self, tmp_path):
        sr_ckpt, _ = gen_checkpoint()
        seg_ckpt, _ = seg_checkpoint()
        cube = self._cube(32)
        out_path = tmp_path / "isa.tif"
        cfg = InferenceConfig(tile_size=24, halo=4)
        mask, sidecar = run_isa_pipeline(cube, sr_ckpt, seg_ckpt, cfg, out_path)
        assert mask.data.shape == (1, 320, 320)
        assert set(np.unique(mask.data)) <= {0, 1}
        saved = read_geotiff(out_path)
        assert saved.transform.pixel_size_x == 1.0
        assert np.array_equal(saved.data, mask.data)
        prov = json.loads(
            (tmp_path / "isa.tif.provenance.json").read_text())
        assert prov["sr_checkpoint"] == sr_ckpt.sha256()
        assert prov["seg_checkpoint"] == seg_ckpt.sha256()

    def test_deterministic_reruns_byte_identical(self, tmp_path):
        sr_ckpt, _ = gen_checkpoint()
        seg_ckpt, _ = seg_checkpoint()
        cube = self._cube(32)
        cfg = InferenceConfig(tile_size=24, halo=4, deterministic=True)
        run_isa_pipeline(cube, sr_ckpt, seg_ckpt, cfg, tmp_path / "a.tif")
        run_isa_pipeline(cube, sr_ckpt, seg_ckpt, cfg, tmp_path / "b.tif")
        assert (tmp_path / "a.tif").read_bytes() == (tmp_path / "b.tif").read_bytes()

    def test_nodata_region_propagates(self, tmp_path):
        sr_ckpt, _ = gen_checkpoint()
        seg_ckpt, _ = seg_checkpoint()
        cube = self._cube(32, nodata=-9999.0)
        mask, _ = run_isa_pipeline(cube, sr_ckpt, seg_ckpt,
                                   InferenceConfig(tile_size=24, halo=4),
                                   tmp_path / "nd.tif")
        assert (mask.data[0, :20, :20] == 255).all()
        assert mask.nodata == 255

    def test_stage_error_is_named(self, tmp_path):
        sr_ckpt, _ = gen_checkpoint()
        seg_ckpt, _ = seg_checkpoint()
        bad = GeoRaster(np.zeros((5, 32, 32), dtype=np.float32), UTM10)
        with pytest.raises(PipelineError, match="stage extract-rgb"):
            run_isa_pipeline(bad, sr_ckpt, seg_ckpt,
                             InferenceConfig(tile_size=24, halo=4),
                             tmp_path / "x.tif")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            InferenceConfig(tile_size=16, halo=8)
        with pytest.raises(ValueError):
            InferenceConfig(threshold=1.5)
