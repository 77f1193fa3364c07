"""Scene-level inference: tiled super-resolution, tiled segmentation,
overlap blending, binarization, and georeferenced 1 m mask output.

Tiles are planned on the 10 m grid with a halo; each tile owns a center
region, and per-tile blend weights form an exact partition of unity
(rectangular ownership for center-crop, complementary cosine ramps for
feathering). Tile placements are snapped so that models with strided
downsampling see the same pooling phase they would on the whole scene,
which is what makes tiled and whole-image outputs agree wherever the halo
covers the receptive field.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .geotiff import write_geotiff
from .raster import GeoRaster, TileSpec, make_tiles
from .segtrain import Normalizer, load_seg_model
from .srtrain import RGB_BAND_INDICES, load_generator, set_determinism

__all__ = [
    "InferenceConfig", "MosaicAccumulator", "PipelineError",
    "superresolve_scene", "segment_scene", "binarize", "run_isa_pipeline",
]

MASK_NODATA = 255


class PipelineError(RuntimeError):
    """Stage failure; the message names the failing stage."""


@dataclass(frozen=True)
class InferenceConfig:
    tile_size: int = 64   # 10 m pixels
    halo: int = 24        # 10 m pixels, must cover the model receptive field
    blend: str = "center-crop"  # center-crop | cosine-feather
    feather: int | None = None  # ramp half-width (10 m px); default halo // 2
    threshold: float = 0.5
    batch_size: int = 1
    deterministic: bool = True
    rgb_band_indices: tuple[int, int, int] = RGB_BAND_INDICES

    def __post_init__(self):
        if self.tile_size <= 2 * self.halo:
            raise ValueError(f"tile_size must exceed 2*halo "
                             f"(got {self.tile_size}, halo {self.halo})")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.blend not in ("center-crop", "cosine-feather"):
            raise ValueError(f"unknown blend {self.blend!r}")
        if self.feather is not None and self.feather < 0:
            raise ValueError("feather must be >= 0")


class MosaicAccumulator:
    """Weighted tile blending on the output grid."""

    def __init__(self, bands: int, height: int, width: int):
        self.values = np.zeros((bands, height, width), dtype=np.float64)
        self.weights = np.zeros((height, width), dtype=np.float64)

    def add(self, window: tuple[int, int, int, int], values: np.ndarray,
            weights: np.ndarray) -> None:
        r0, r1, c0, c1 = window
        self.values[:, r0:r1, c0:c1] += values * weights
        self.weights[r0:r1, c0:c1] += weights

    def check_partition(self, tol: float = 1e-6) -> None:
        err = np.abs(self.weights - 1.0).max()
        if err > tol:
            raise AssertionError(f"blend weights deviate from 1 by {err:.2e}")

    def finalize(self) -> np.ndarray:
        if (self.weights <= 0).any():
            raise AssertionError("finalize with uncovered output pixels")
        return (self.values / self.weights).astype(np.float32)


def _axis_profile(windows, owned, scale: int, blend: str,
                  feather: int) -> list[np.ndarray]:
    """Per-window 1D blend profiles on the output (scaled) grid.

    Center-crop gives the indicator of the owned span. Cosine feathering
    multiplies a rising and a falling half-cosine ramp centered on the
    ownership cuts; both neighbors of a cut use the same ramp geometry and
    ramps of adjacent cuts never overlap, so profiles along an axis sum to
    exactly 1 at every output position. Outer products over both axes then
    partition unity.
    """

    def rise(p, cut, f):
        t = np.clip((p - (cut - f) * scale) / (2 * f * scale), 0.0, 1.0)
        return 0.5 - 0.5 * np.cos(math.pi * t)

    # ramp half-width per interior cut, capped so adjacent ramps stay disjoint
    cut_f = []
    for i in range(len(windows) - 1):
        overlap = windows[i][1] - windows[i + 1][0]
        own_left = owned[i][1] - owned[i][0]
        own_right = owned[i + 1][1] - owned[i + 1][0]
        cut_f.append(min(feather, overlap // 2, own_left // 2, own_right // 2))

    profiles = []
    for i, ((w0, w1), (o0, o1)) in enumerate(zip(windows, owned)):
        length = (w1 - w0) * scale
        if blend == "center-crop":
            prof = np.zeros(length, dtype=np.float64)
            prof[(o0 - w0) * scale:(o1 - w0) * scale] = 1.0
        else:
            p = w0 * scale + np.arange(length) + 0.5  # global output positions
            prof = np.ones(length, dtype=np.float64)
            if i > 0:
                f = cut_f[i - 1]
                prof *= rise(p, o0, f) if f > 0 else (p >= o0 * scale)
            if i < len(windows) - 1:
                f = cut_f[i]
                prof *= (1.0 - rise(p, o1, f)) if f > 0 else (p < o1 * scale)
        profiles.append(prof)
    return profiles


def _tile_weights(spec: TileSpec, scale: int, blend: str,
                  feather: int | None = None) -> list[np.ndarray]:
    if feather is None:
        feather = max(spec.halo // 2, 1)
    rows = _axis_profile(spec.row_windows, spec.row_owned, scale, blend, feather)
    cols = _axis_profile(spec.col_windows, spec.col_owned, scale, blend, feather)
    out = []
    for i in range(spec.n_tiles):
        r = rows[i // len(cols)]
        c = cols[i % len(cols)]
        out.append(np.outer(r, c))
    return out


def superresolve_scene(s2_rgb: GeoRaster, sr_ckpt: Checkpoint | object,
                       cfg: InferenceConfig = InferenceConfig()) -> GeoRaster:
    """Tiled x10 super-resolution of a 3-band 10 m raster."""
    if s2_rgb.bands != 3:
        raise ValueError(f"expected 3 RGB bands, got {s2_rgb.bands}")
    gen = sr_ckpt if hasattr(sr_ckpt, "predict") else load_generator(sr_ckpt)
    if cfg.deterministic:
        set_determinism(0, True)
    h, w = s2_rgb.height, s2_rgb.width
    if h % 2 or w % 2:
        raise ValueError(f"scene dims must be even on the 10 m grid, got {h}x{w}")
    tile = cfg.tile_size + (cfg.tile_size % 2)
    spec = make_tiles(h, w, tile, cfg.halo, align=2)
    mosaic = MosaicAccumulator(3, 10 * h, 10 * w)
    weights = _tile_weights(spec, 10, cfg.blend, cfg.feather)
    data = s2_rgb.data.astype(np.float32)
    for i in range(spec.n_tiles):
        r0, r1, c0, c1 = spec.window(i)
        lr = torch.from_numpy(data[:, r0:r1, c0:c1])[None]
        _, sr10 = gen.predict(lr)
        mosaic.add((10 * r0, 10 * r1, 10 * c0, 10 * c1),
                   sr10[0].numpy().astype(np.float64), weights[i])
    mosaic.check_partition()
    out = mosaic.finalize()
    return GeoRaster(np.clip(out, 0.0, 1.0), s2_rgb.transform.scaled(10))


def _seg_alignment(model) -> int:
    """Tile alignment on the 10 m grid for a segmentation model."""
    m = model.grid_multiple
    if model.cfg.modality.mode == "S2":
        return m
    return max(1, m // math.gcd(10, m))


def segment_scene(sr_rgb: GeoRaster | None, s2_cube: GeoRaster | None,
                  seg_ckpt: Checkpoint, cfg: InferenceConfig = InferenceConfig()
                  ) -> GeoRaster:
    """Tiled ISA-probability inference at the 1 m grid."""
    model = load_seg_model(seg_ckpt)
    stats = seg_ckpt.meta.get("stats")
    if stats is None:
        raise ValueError("segmentation checkpoint lacks normalization stats")
    norm = Normalizer(stats)
    mode = model.cfg.modality.mode
    if mode != "RGB" and s2_cube is None:
        raise ValueError(f"modality {mode} needs the band cube")
    if mode != "S2" and sr_rgb is None:
        raise ValueError(f"modality {mode} needs the 1 m RGB raster")
    if mode == "RGB+S2" and (sr_rgb.height != 10 * s2_cube.height or
                             sr_rgb.width != 10 * s2_cube.width):
        raise ValueError(
            f"misaligned inputs: rgb {sr_rgb.height}x{sr_rgb.width} vs "
            f"cube {s2_cube.height}x{s2_cube.width} (expected exact x10)")
    if cfg.deterministic:
        set_determinism(0, True)

    h = s2_cube.height if s2_cube is not None else sr_rgb.height // 10
    w = s2_cube.width if s2_cube is not None else sr_rgb.width // 10
    align = _seg_alignment(model)
    tile = cfg.tile_size - (cfg.tile_size % align) if align > 1 else cfg.tile_size
    if tile <= 2 * cfg.halo:
        raise ValueError(f"tile_size {cfg.tile_size} too small for alignment "
                         f"{align} with halo {cfg.halo}")
    spec = make_tiles(h, w, tile, cfg.halo, align=align)
    mosaic = MosaicAccumulator(1, 10 * h, 10 * w)
    weights = _tile_weights(spec, 10, cfg.blend, cfg.feather)
    rgb_data = None if sr_rgb is None else norm.rgb(sr_rgb.data.astype(np.float32))
    cube_data = None if s2_cube is None else norm.s2(s2_cube.data.astype(np.float32))
    with torch.no_grad():
        for i in range(spec.n_tiles):
            r0, r1, c0, c1 = spec.window(i)
            rgb_t = s2_t = None
            if rgb_data is not None:
                rgb_t = torch.from_numpy(
                    rgb_data[:, 10 * r0:10 * r1, 10 * c0:10 * c1])[None]
            if cube_data is not None and mode != "RGB":
                s2_t = torch.from_numpy(cube_data[:, r0:r1, c0:c1])[None]
            prob = model(rgb=rgb_t, s2=s2_t).prob[0, 1:2].numpy()
            mosaic.add((10 * r0, 10 * r1, 10 * c0, 10 * c1),
                       prob.astype(np.float64), weights[i])
    mosaic.check_partition()
    out = mosaic.finalize()
    transform = (sr_rgb.transform if sr_rgb is not None
                 else s2_cube.transform.scaled(10))
    return GeoRaster(np.clip(out, 0.0, 1.0), transform)


def binarize(prob: GeoRaster, threshold: float = 0.5) -> GeoRaster:
    """Probability -> {0,1} mask; >= threshold maps to 1; nodata propagates."""
    data = prob.data
    if data.min() < 0 and prob.nodata is None:
        raise ValueError("probabilities outside [0, 1]")
    mask = (data >= threshold).astype(np.uint8)
    nodata = None
    if prob.nodata is not None:
        bad = np.any(data == prob.nodata, axis=0, keepdims=True)
        mask = np.where(bad, np.uint8(MASK_NODATA), mask)
        nodata = MASK_NODATA
    return GeoRaster(mask, prob.transform, nodata)


def run_isa_pipeline(cube: GeoRaster, sr_ckpt: Checkpoint, seg_ckpt: Checkpoint,
                     cfg: InferenceConfig, out_path) -> tuple[GeoRaster, dict]:
    """Full scene pipeline: extract RGB, super-resolve, segment, binarize, write.

    Returns the mask raster and the provenance sidecar written next to it.
    """
    out_path = Path(out_path)
    timings: dict[str, float] = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise PipelineError(f"stage {name}: {exc}") from exc
        timings[name] = round(time.perf_counter() - t0, 3)
        return result

    def extract():
        if cube.bands != 12:
            raise ValueError(f"expected a 12-band cube, got {cube.bands}")
        idx = list(cfg.rgb_band_indices)
        return GeoRaster(cube.data[idx].astype(np.float32), cube.transform,
                         cube.nodata)

    s2_rgb = stage("extract-rgb", extract)
    sr_rgb = stage("superresolve", lambda: superresolve_scene(s2_rgb, sr_ckpt, cfg))
    prob = stage("segment", lambda: segment_scene(sr_rgb, cube, seg_ckpt, cfg))
    mask = stage("binarize", lambda: binarize(prob, cfg.threshold))

    nodata_lr = cube.nodata_mask()
    if nodata_lr is not None and nodata_lr.any():
        up = np.repeat(np.repeat(nodata_lr, 10, axis=0), 10, axis=1)
        data = np.where(up[None], np.uint8(MASK_NODATA), mask.data)
        mask = GeoRaster(data, mask.transform, MASK_NODATA)

    stage("write", lambda: write_geotiff(mask, out_path, compress=True))
    sidecar = {
        "inputs": {"shape": list(cube.data.shape),
                   "crs": cube.transform.crs_id,
                   "pixel_size": cube.transform.pixel_size_x},
        "sr_checkpoint": sr_ckpt.sha256(),
        "seg_checkpoint": seg_ckpt.sha256(),
        "config": asdict(cfg),
        "output": out_path.name,
    }
    if not cfg.deterministic:
        sidecar["timings"] = timings
    sidecar_path = out_path.with_suffix(out_path.suffix + ".provenance.json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return mask, sidecar
