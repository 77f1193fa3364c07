import numpy as np
import pytest

from srseg.degradation import DegradationConfig
from srseg.raster import resample
from srseg.synth import (DatasetManifest, SamplePoint, SceneSpec, build_dataset,
                         derive_s2, generate_scene, load_manifest,
                         thin_min_distance)


class TestGenerateScene:
    def test_empty_scene_has_zero_label(self):
        spec = SceneSpec(seed=1, hr_size=80, n_buildings=0, n_roads=0, n_water=1)
        _, label = generate_scene(spec)
        assert label.data.sum() == 0
        assert label.is_mask

    def test_single_20x30_building_label_sum(self):
        spec = SceneSpec(seed=2, hr_size=120, n_buildings=1, n_roads=0, n_water=0,
                         building_size_range=((20, 20), (30, 30)))
        _, label = generate_scene(spec)
        assert int(label.data.sum()) == 600

    def test_deterministic(self):
        spec = SceneSpec(seed=3, hr_size=80)
        rgb1, label1 = generate_scene(spec)
        rgb2, label2 = generate_scene(spec)
        assert np.array_equal(rgb1.data, rgb2.data)
        assert np.array_equal(label1.data, label2.data)

    def test_rgb_in_unit_range(self):
        rgb, _ = generate_scene(SceneSpec(seed=4, hr_size=80))
        assert rgb.data.dtype == np.float32
        assert rgb.data.min() >= 0.0 and rgb.data.max() <= 1.0

    def test_label_binary(self):
        _, label = generate_scene(SceneSpec(seed=5, hr_size=80))
        assert set(np.unique(label.data)) <= {0, 1}

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(seed=0, hr_size=30)
        with pytest.raises(ValueError):
            SceneSpec(seed=0, hr_size=44)
        with pytest.raises(ValueError):
            SceneSpec(seed=0, n_buildings=-1)


class TestDeriveS2:
    def test_identity_degradation_gives_block_means(self):
        rgb, label = generate_scene(SceneSpec(seed=6, hr_size=80))
        cube = derive_s2(rgb, label, DegradationConfig.identity(),
                         np.random.default_rng(0))
        block = resample(rgb, 0.1, "area_average").data  # [r, g, b] at 10 m
        assert np.array_equal(cube.data[1], block[2])  # B2 = blue
        assert np.array_equal(cube.data[2], block[1])  # B3 = green
        assert np.array_equal(cube.data[3], block[0])  # B4 = red

    def test_vegetation_nir_exceeds_red(self):
        spec = SceneSpec(seed=7, hr_size=80, n_buildings=0, n_roads=0, n_water=0,
                         soil_fraction=0.0)
        rgb, label = generate_scene(spec)
        cube = derive_s2(rgb, label, DegradationConfig.identity(),
                         np.random.default_rng(1))
        assert cube.data[7].mean() > cube.data[3].mean()  # B8 vs B4

    def test_output_dims_and_transform(self):
        rgb, label = generate_scene(SceneSpec(seed=8, hr_size=120))
        cube = derive_s2(rgb, label, DegradationConfig(), np.random.default_rng(2))
        assert cube.data.shape == (12, 12, 12)
        assert cube.transform.pixel_size_x == 10.0
        assert cube.transform.origin_x == rgb.transform.origin_x
        assert cube.data.min() >= 0.0 and cube.data.max() <= 1.0

    def test_non_divisible_rejected(self):
        rgb, label = generate_scene(SceneSpec(seed=9, hr_size=80))
        clipped_rgb = rgb.with_data(rgb.data[:, :77, :77])
        with pytest.raises(ValueError):
            derive_s2(clipped_rgb, label, DegradationConfig(),
                      np.random.default_rng(0))


class TestThinMinDistance:
    def test_collinear_greedy(self):
        pts = [SamplePoint(0, 0), SamplePoint(2000, 0), SamplePoint(4000, 0)]
        kept = thin_min_distance(pts, 3000)
        assert [(p.x, p.y) for p in kept] == [(0, 0), (4000, 0)]

    def test_single_point(self):
        pts = [SamplePoint(5, 5)]
        assert thin_min_distance(pts, 3000) == pts

    def test_coincident_cluster(self):
        pts = [SamplePoint(1, 1)] * 5
        assert len(thin_min_distance(pts, 10)) == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_min_pairwise_distance_property(self, seed):
        rng = np.random.default_rng(seed)
        pts = [SamplePoint(float(x), float(y), "upstream")
               for x, y in rng.uniform(0, 20000, size=(60, 2))]
        kept = thin_min_distance(pts, 3000)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                d = np.hypot(kept[i].x - kept[j].x, kept[i].y - kept[j].y)
                assert d >= 3000

    def test_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            thin_min_distance([], 0)

    def test_rejects_nonfinite_point(self):
        with pytest.raises(ValueError):
            SamplePoint(float("nan"), 0.0)


class TestBuildDataset:
    def test_split_sizes_and_files(self, tmp_path):
        template = SceneSpec(seed=0, hr_size=40, n_buildings=2, n_roads=1, n_water=1)
        manifest = build_dataset(10, template, tmp_path, (0.8, 0.1, 0.1), seed=5)
        assert len(manifest.split("train")) == 8
        assert len(manifest.split("val")) == 1
        assert len(manifest.split("test")) == 1
        manifest.validate()
        assert len(list((tmp_path / "scenes").glob("*.tif"))) == 30

    def test_reproducible_manifest(self, tmp_path):
        template = SceneSpec(seed=0, hr_size=40)
        m1 = build_dataset(4, template, tmp_path / "a", (0.5, 0.25, 0.25), seed=7)
        m2 = build_dataset(4, template, tmp_path / "b", (0.5, 0.25, 0.25), seed=7)
        assert (tmp_path / "a" / "manifest.json").read_text() == \
               (tmp_path / "b" / "manifest.json").read_text()
        f1 = (tmp_path / "a" / m1.records[0].s2_path).read_bytes()
        f2 = (tmp_path / "b" / m2.records[0].s2_path).read_bytes()
        assert f1 == f2

    def test_loaded_scenes_pass_invariants(self, tmp_path):
        from srseg.geotiff import read_geotiff
        template = SceneSpec(seed=0, hr_size=40)
        manifest = build_dataset(3, template, tmp_path, (0.34, 0.33, 0.33), seed=1)
        rec = manifest.records[0]
        label = read_geotiff(manifest.resolve(rec.label_path))
        assert label.is_mask
        cube = read_geotiff(manifest.resolve(rec.s2_path))
        assert cube.bands == 12 and cube.transform.pixel_size_x == 10.0
        rgb = read_geotiff(manifest.resolve(rec.rgb_path))
        assert rgb.bands == 3 and rgb.height == 40

    def test_manifest_round_trip(self, tmp_path):
        template = SceneSpec(seed=0, hr_size=40)
        built = build_dataset(3, template, tmp_path, (0.34, 0.33, 0.33), seed=2)
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.records == built.records
        assert loaded.stats == {k: list(v) if isinstance(v, list) else v
                                for k, v in built.stats.items()}

    def test_bad_fractions_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="sum to 1"):
            build_dataset(4, SceneSpec(seed=0, hr_size=40), tmp_path, (0.5, 0.2, 0.2))

    def test_too_few_scenes_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="splits"):
            build_dataset(2, SceneSpec(seed=0, hr_size=40), tmp_path, (0.8, 0.1, 0.1))
