"""Procedural desk-scale scenes: HR RGB + ISA label + derived 12-band LR cube.

Scenes are built from four land-cover classes (sealed surfaces, vegetation,
bare soil, water) with distinct reflectance signatures. The 12-band cube
mimics a 10 m multispectral sensor: the blue/green/red bands come from the
degradation model applied to the HR RGB; the other nine bands follow a fixed
per-class linear spectral table plus Gaussian jitter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .degradation import DegradationConfig, degrade
from .geotiff import read_geotiff, write_geotiff
from .raster import GeoRaster, GeoTransform, resample

__all__ = [
    "SceneSpec", "SamplePoint", "DatasetManifest", "SceneRecord",
    "generate_scene", "derive_s2", "thin_min_distance", "build_dataset",
    "load_manifest", "BAND_NAMES", "CLASS_SIGNATURES",
]

BAND_NAMES = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8",
              "B8A", "B9", "B11", "B12")

# per-class mean reflectance for the 12 bands above; rows: sealed (ISA),
# vegetation, water, bare soil
CLASS_SIGNATURES = np.array([
    # B1    B2    B3    B4    B5    B6    B7    B8    B8A   B9    B11   B12
    [0.28, 0.30, 0.32, 0.34, 0.35, 0.36, 0.37, 0.38, 0.38, 0.30, 0.40, 0.38],  # sealed
    [0.03, 0.04, 0.08, 0.05, 0.12, 0.30, 0.38, 0.45, 0.46, 0.20, 0.22, 0.12],  # vegetation
    [0.06, 0.08, 0.10, 0.07, 0.05, 0.03, 0.02, 0.02, 0.02, 0.01, 0.01, 0.01],  # water
    [0.22, 0.26, 0.30, 0.34, 0.36, 0.38, 0.39, 0.42, 0.43, 0.32, 0.48, 0.45],  # bare soil
])

CLASS_SEALED, CLASS_VEGETATION, CLASS_WATER, CLASS_SOIL = range(4)

# render colors (RGB) used for the HR image and for inferring the class of
# non-ISA pixels in derive_s2
CLASS_COLORS = {
    CLASS_VEGETATION: (0.14, 0.34, 0.12),
    CLASS_WATER: (0.05, 0.11, 0.24),
    CLASS_SOIL: (0.46, 0.36, 0.22),
}
BUILDING_COLOR = (0.48, 0.47, 0.46)
ROAD_COLOR = (0.30, 0.30, 0.32)


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one synthetic scene."""

    seed: int
    hr_size: int = 320
    n_buildings: int = 12
    n_roads: int = 3
    n_water: int = 2
    building_size_range: tuple[tuple[int, int], tuple[int, int]] = ((10, 42), (10, 42))
    road_width_range: tuple[int, int] = (3, 8)
    color_jitter: float = 0.04
    pixel_noise: float = 0.015
    vegetation_texture_scale: float = 12.0
    soil_fraction: float = 0.25

    def __post_init__(self):
        if self.hr_size < 40 or self.hr_size % 10:
            raise ValueError(f"hr_size must be >= 40 and divisible by 10, got {self.hr_size}")
        if min(self.n_buildings, self.n_roads, self.n_water) < 0:
            raise ValueError("object counts must be >= 0")


@dataclass(frozen=True)
class SamplePoint:
    x: float
    y: float
    stratum: str = "midstream"  # upstream | midstream | downstream

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("sample point coordinates must be finite")


def _scene_transform(seed: int, hr_size: int) -> GeoTransform:
    # scenes get disjoint origins on a deterministic grid so nothing overlaps
    col = seed % 100
    row = (seed // 100) % 100
    return GeoTransform(400000.0 + col * 5000.0, 3500000.0 - row * 5000.0,
                        1.0, 1.0, "EPSG:32648")


def generate_scene(spec: SceneSpec) -> tuple[GeoRaster, GeoRaster]:
    """Render (hr_rgb [3,N,N] float32 in [0,1] @1 m, label [1,N,N] uint8)."""
    n = spec.hr_size
    rng = np.random.default_rng(spec.seed)

    # background: vegetation with smooth-noise soil patches
    tex = ndimage.gaussian_filter(rng.normal(size=(n, n)),
                                  spec.vegetation_texture_scale)
    tex = (tex - tex.mean()) / (tex.std() + 1e-9)
    soil = tex > np.quantile(tex, 1.0 - spec.soil_fraction)
    classes = np.where(soil, CLASS_SOIL, CLASS_VEGETATION).astype(np.uint8)

    # water bodies: axis-aligned ellipses
    yy, xx = np.indices((n, n))
    for _ in range(spec.n_water):
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, 2)
        a = rng.uniform(0.05 * n, 0.15 * n)
        b = rng.uniform(0.05 * n, 0.15 * n)
        inside = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
        classes[inside] = CLASS_WATER

    label = np.zeros((n, n), dtype=np.uint8)
    rgb = np.zeros((n, n, 3), dtype=np.float32)
    for cls, color in CLASS_COLORS.items():
        sel = classes == cls
        mod = 1.0 + 0.25 * tex[sel]
        for c in range(3):
            rgb[sel, c] = color[c] * mod

    # roads: straight bands across the scene, ISA class
    for _ in range(spec.n_roads):
        width = int(rng.integers(spec.road_width_range[0], spec.road_width_range[1] + 1))
        theta = float(rng.choice((0.0, math.pi / 2, math.pi / 4, 3 * math.pi / 4)))
        offset = rng.uniform(0.2, 0.8) * n
        dist = np.abs((xx - offset * math.cos(theta) - (n / 2) * abs(math.sin(theta)))
                      * math.sin(theta)
                      - (yy - offset * math.sin(theta) - (n / 2) * abs(math.cos(theta)))
                      * math.cos(theta))
        band = dist <= width / 2
        label[band] = 1
        shade = float(rng.uniform(1 - spec.color_jitter, 1 + spec.color_jitter))
        for c in range(3):
            rgb[band, c] = ROAD_COLOR[c] * shade

    # buildings: axis-aligned rectangles, ISA class
    (h_lo, h_hi), (w_lo, w_hi) = spec.building_size_range
    for _ in range(spec.n_buildings):
        bh = int(rng.integers(h_lo, h_hi + 1))
        bw = int(rng.integers(w_lo, w_hi + 1))
        bh, bw = min(bh, n), min(bw, n)
        r0 = int(rng.integers(0, n - bh + 1))
        c0 = int(rng.integers(0, n - bw + 1))
        label[r0:r0 + bh, c0:c0 + bw] = 1
        shade = float(rng.uniform(1 - spec.color_jitter, 1 + spec.color_jitter))
        for c in range(3):
            rgb[r0:r0 + bh, c0:c0 + bw, c] = BUILDING_COLOR[c] * shade

    rgb += rng.normal(0, spec.pixel_noise, rgb.shape).astype(np.float32)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)

    t = _scene_transform(spec.seed, n)
    return (GeoRaster(rgb.transpose(2, 0, 1), t),
            GeoRaster(label[None], t))


def infer_classes(hr_rgb: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Per-pixel class map: label says sealed; colors decide the rest."""
    n = hr_rgb.shape[1]
    colors = np.array([CLASS_COLORS[c] for c in
                       (CLASS_VEGETATION, CLASS_WATER, CLASS_SOIL)], dtype=np.float32)
    flat = hr_rgb.reshape(3, -1).T  # [n*n, 3]
    d = ((flat[:, None, :] - colors[None]) ** 2).sum(-1)
    nearest = np.array((CLASS_VEGETATION, CLASS_WATER, CLASS_SOIL))[d.argmin(1)]
    classes = nearest.reshape(n, n).astype(np.uint8)
    classes[label.astype(bool)] = CLASS_SEALED
    return classes


def derive_s2(hr_rgb: GeoRaster, label: GeoRaster, config: DegradationConfig,
              rng: np.random.Generator) -> GeoRaster:
    """Synthesize the 12-band 10 m cube for a scene.

    B2/B3/B4 are the degradation model applied to the HR blue/green/red;
    the remaining bands mix the class signature table by the per-cell class
    fractions, plus sigma=0.01 jitter.
    """
    n = hr_rgb.height
    if n % 10 or hr_rgb.width % 10:
        raise ValueError(f"HR dims must be divisible by 10, got {n}x{hr_rgb.width}")
    m = n // 10

    bgr = hr_rgb.data[::-1].copy()  # [blue, green, red]
    lr_bgr, _plan = degrade(bgr, 10, config, rng)

    classes = infer_classes(hr_rgb.data, label.data[0])
    onehot = np.stack([(classes == c).astype(np.float32) for c in range(4)])
    frac = resample(GeoRaster(onehot, hr_rgb.transform), 0.1, "area_average").data

    cube = np.empty((12, m, m), dtype=np.float32)
    for b in range(12):
        if b == 1:
            cube[b] = lr_bgr[0]
        elif b == 2:
            cube[b] = lr_bgr[1]
        elif b == 3:
            cube[b] = lr_bgr[2]
        else:
            mix = np.tensordot(CLASS_SIGNATURES[:, b], frac, axes=(0, 0))
            mix = mix + rng.normal(0, 0.01, mix.shape)
            cube[b] = np.clip(mix, 0.0, 1.0)

    t = hr_rgb.transform
    return GeoRaster(cube, GeoTransform(t.origin_x, t.origin_y, t.pixel_size_x * 10,
                                        t.pixel_size_y * 10, t.crs_id))


def thin_min_distance(points: list[SamplePoint], d_min: float) -> list[SamplePoint]:
    """Greedy spatial thinning: keep a point iff it clears every kept point.

    Input order decides priority, so the result is deterministic.
    """
    if d_min <= 0:
        raise ValueError(f"d_min must be positive, got {d_min}")
    kept: list[SamplePoint] = []
    for p in points:
        if all((p.x - q.x) ** 2 + (p.y - q.y) ** 2 >= d_min ** 2 for q in kept):
            kept.append(p)
    return kept


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    split: str
    seed: int
    s2_path: str
    rgb_path: str
    label_path: str
    sr_path: str | None = None  # attached after super-resolution


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    hr_size: int
    records: list[SceneRecord]
    stats: dict

    def split(self, name: str) -> list[SceneRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def save(self, path: Path) -> None:
        payload = {
            "seed": self.seed,
            "hr_size": self.hr_size,
            "stats": self.stats,
            "records": [
                {"scene_id": r.scene_id, "split": r.split, "seed": r.seed,
                 "s2": r.s2_path, "rgb": r.rgb_path, "label": r.label_path,
                 **({"sr": r.sr_path} if r.sr_path else {})}
                for r in self.records
            ],
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))

    def validate(self) -> None:
        ids = [r.scene_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate scene id across splits")
        for r in self.records:
            paths = [r.s2_path, r.rgb_path, r.label_path]
            if r.sr_path:
                paths.append(r.sr_path)
            for rel in paths:
                if not (self.root / rel).exists():
                    raise FileNotFoundError(f"manifest references missing file {rel}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    payload = json.loads(path.read_text())
    records = [SceneRecord(scene_id=r["scene_id"], split=r["split"], seed=r["seed"],
                           s2_path=r["s2"], rgb_path=r["rgb"], label_path=r["label"],
                           sr_path=r.get("sr"))
               for r in payload["records"]]
    manifest = DatasetManifest(root=path.parent, seed=payload["seed"],
                               hr_size=payload["hr_size"], records=records,
                               stats=payload["stats"])
    manifest.validate()
    return manifest


def _split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n_splits = sum(1 for f in fractions if f > 0)
    if n < n_splits:
        raise ValueError(f"{n} scenes cannot fill {n_splits} splits")
    n_val = int(n * f_val)
    n_test = int(n * f_test)
    return n - n_val - n_test, n_val, n_test


def _make_scene(task: tuple) -> tuple[SceneRecord, dict | None]:
    """Generate and write one scene; returns its record and train-split sums.

    Top-level so multiprocessing workers can run it; each scene depends only
    on its own seed, so any worker count produces identical files.
    """
    i, scene_seed, split, template, degradation, out_dir = task
    out_dir = Path(out_dir)
    spec = replace(template, seed=scene_seed)
    rgb, label = generate_scene(spec)
    s2 = derive_s2(rgb, label, degradation, np.random.default_rng(scene_seed + 1))
    sid = f"scene_{i:04d}"
    paths = {k: f"scenes/{sid}_{k}.tif" for k in ("s2", "rgb", "label")}
    write_geotiff(s2, out_dir / paths["s2"], compress=True)
    write_geotiff(rgb, out_dir / paths["rgb"], compress=True)
    write_geotiff(label, out_dir / paths["label"], compress=True)
    record = SceneRecord(scene_id=sid, split=split, seed=scene_seed,
                         s2_path=paths["s2"], rgb_path=paths["rgb"],
                         label_path=paths["label"])
    sums = None
    if split == "train":
        sums = {"s2": s2.data.sum(axis=(1, 2), dtype=np.float64),
                "s2_sq": (s2.data.astype(np.float64) ** 2).sum(axis=(1, 2)),
                "rgb": rgb.data.sum(axis=(1, 2), dtype=np.float64),
                "rgb_sq": (rgb.data.astype(np.float64) ** 2).sum(axis=(1, 2)),
                "pixels_s2": s2.data.shape[1] * s2.data.shape[2],
                "pixels_rgb": rgb.data.shape[1] * rgb.data.shape[2]}
    return record, sums


def build_dataset(n_scenes: int, template: SceneSpec, out_dir,
                  fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0,
                  degradation: DegradationConfig | None = None,
                  workers: int = 1) -> DatasetManifest:
    """Generate scenes, derive cubes, write GeoTIFFs, and save the manifest.

    Per-scene seeds derive from the master seed, so the whole dataset is a
    pure function of its arguments regardless of ``workers``.
    """
    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    degradation = degradation or DegradationConfig()
    master = np.random.default_rng(seed)
    scene_seeds = [int(s) for s in master.integers(0, 2 ** 31, size=n_scenes)]
    n_train, n_val, n_test = _split_sizes(n_scenes, fractions)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    tasks = [(i, s, sp, template, degradation, str(out_dir))
             for i, (s, sp) in enumerate(zip(scene_seeds, splits))]

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_make_scene, tasks, chunksize=4))
    else:
        results = [_make_scene(t) for t in tasks]

    records = [rec for rec, _ in results]
    sums = {"s2": np.zeros(12), "s2_sq": np.zeros(12),
            "rgb": np.zeros(3), "rgb_sq": np.zeros(3),
            "pixels_s2": 0, "pixels_rgb": 0}
    for _, part in results:
        if part is not None:
            for key in sums:
                sums[key] += part[key]

    def norm_stats(total, total_sq, count):
        mean = total / count
        var = np.maximum(total_sq / count - mean ** 2, 1e-12)
        return mean.tolist(), np.sqrt(var).tolist()

    s2_mean, s2_std = norm_stats(sums["s2"], sums["s2_sq"], sums["pixels_s2"])
    rgb_mean, rgb_std = norm_stats(sums["rgb"], sums["rgb_sq"], sums["pixels_rgb"])
    manifest = DatasetManifest(
        root=out_dir, seed=seed, hr_size=template.hr_size, records=records,
        stats={"s2_mean": s2_mean, "s2_std": s2_std,
               "rgb_mean": rgb_mean, "rgb_std": rgb_std},
    )
    manifest.save(out_dir / "manifest.json")
    manifest.validate()
    return manifest
