"""Raster data model, georeferencing arithmetic, resampling, and tiling geometry.

Rasters are band-major ``[bands, height, width]`` numpy arrays carrying a
north-up geotransform and an EPSG CRS code. Everything downstream (synthesis,
training, inference, analysis) moves data around as :class:`GeoRaster`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "GeoTransform",
    "GeoRaster",
    "TileSpec",
    "resample",
    "make_tiles",
    "GEOGRAPHIC_EPSG",
]

# EPSG codes we treat as geographic (degree units). Anything else is assumed
# projected with linear units.
GEOGRAPHIC_EPSG = frozenset({4326, 4258, 4269, 4490})


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine mapping from pixel indices to CRS coordinates.

    ``origin_x/origin_y`` locate the outer corner of pixel (0, 0);
    x grows with columns, y shrinks with rows (row-major, north-up).
    """

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    crs_id: str = "EPSG:4326"

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise ValueError(
                f"pixel sizes must be strictly positive, got "
                f"({self.pixel_size_x}, {self.pixel_size_y})"
            )
        if not self.crs_id:
            raise ValueError("crs_id must be non-empty")

    @property
    def epsg(self) -> int:
        """Numeric EPSG code parsed from ``crs_id``."""
        code = self.crs_id.upper()
        if not code.startswith("EPSG:"):
            raise ValueError(f"crs_id must look like 'EPSG:<code>', got {self.crs_id!r}")
        return int(code.split(":", 1)[1])

    @property
    def is_geographic(self) -> bool:
        return self.epsg in GEOGRAPHIC_EPSG

    def pixel_to_coords(self, row: float, col: float) -> tuple[float, float]:
        return (self.origin_x + col * self.pixel_size_x,
                self.origin_y - row * self.pixel_size_y)

    def scaled(self, factor) -> "GeoTransform":
        """Transform for the same extent resampled by ``factor`` (>1 = finer)."""
        f = float(factor)
        return GeoTransform(self.origin_x, self.origin_y,
                            self.pixel_size_x / f, self.pixel_size_y / f,
                            self.crs_id)


@dataclass(frozen=True)
class GeoRaster:
    """Multi-band pixel array plus georeferencing. Treat as immutable."""

    data: np.ndarray
    transform: GeoTransform
    nodata: float | int | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"data must be [bands, height, width], got shape {self.data.shape}")
        b, h, w = self.data.shape
        if b < 1 or h < 1 or w < 1:
            raise ValueError(f"all dimensions must be >= 1, got {self.data.shape}")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def is_mask(self) -> bool:
        """True for a single-band raster whose valid values are all in {0, 1}."""
        if self.bands != 1:
            return False
        vals = self.data
        if self.nodata is not None:
            vals = vals[vals != self.nodata]
        return bool(np.isin(vals, (0, 1)).all())

    def nodata_mask(self) -> np.ndarray | None:
        """Boolean [h, w] mask of pixels that are nodata in any band, or None."""
        if self.nodata is None:
            return None
        return np.any(self.data == self.nodata, axis=0)

    def with_data(self, data: np.ndarray, transform: GeoTransform | None = None,
                  nodata=...) -> "GeoRaster":
        return GeoRaster(data, transform or self.transform,
                         self.nodata if nodata is ... else nodata)


def _out_dim(dim: int, factor: float) -> int:
    return int(np.floor(dim * factor + 0.5))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix of exact box-overlap weights."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), min(int(np.ceil(hi)), n_in)
        for j in range(j0, j1):
            w[i, j] = min(hi, j + 1) - max(lo, j)
        w[i] /= w[i].sum()
    return w


def _block_mean(band: np.ndarray, k: int) -> np.ndarray:
    h, w = band.shape
    blocks = band.reshape(h // k, k, w // k, k).swapaxes(1, 2).reshape(h // k, w // k, k * k)
    return blocks.sum(axis=-1) / (k * k)


def _resample_band(band: np.ndarray, oh: int, ow: int, method: str) -> np.ndarray:
    h, w = band.shape
    if method == "nearest":
        rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
        cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
        return band[np.ix_(rows, cols)]
    if method == "bilinear":
        out = band.astype(np.float64, copy=False)
        ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
        xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
        y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros(oh, np.int64)
        x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros(ow, np.int64)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        top = out[np.ix_(y0, x0)] * (1 - fx) + out[np.ix_(y0, x1)] * fx
        bot = out[np.ix_(y1, x0)] * (1 - fx) + out[np.ix_(y1, x1)] * fx
        return (top * (1 - fy) + bot * fy).astype(band.dtype if band.dtype.kind == "f" else np.float64)
    if method == "area_average":
        # Exact k x k block mean when downsampling by an integer factor.
        if oh > 0 and ow > 0 and h % oh == 0 and w % ow == 0 and h // oh == w // ow:
            return _block_mean(band, h // oh)
        wr = _area_weights(h, oh)
        wc = _area_weights(w, ow)
        return wr @ band @ wc.T
    raise ValueError(f"unknown resampling method {method!r}")


def resample(raster: GeoRaster, factor, method: str = "bilinear") -> GeoRaster:
    """Rescale a raster by ``factor`` (>1 upsamples), adjusting the geotransform.

    ``area_average`` with factor 1/k reproduces the exact k x k block mean
    whenever k divides both dimensions.
    """
    f = float(Fraction(factor)) if not isinstance(factor, (int, float)) else float(factor)
    if f <= 0:
        raise ValueError(f"resample factor must be > 0, got {factor}")
    oh, ow = _out_dim(raster.height, f), _out_dim(raster.width, f)
    if oh < 1 or ow < 1:
        raise ValueError(f"factor {factor} yields empty output for {raster.height}x{raster.width}")
    out = np.stack([_resample_band(raster.data[b], oh, ow, method)
                    for b in range(raster.bands)])
    if raster.data.dtype.kind in "ui" and method == "nearest":
        out = out.astype(raster.data.dtype)
    return GeoRaster(out, raster.transform.scaled(f), raster.nodata)


def _axis_windows(size: int, tile: int, halo: int, align: int) -> list[tuple[int, int]]:
    """Window intervals [start, stop) along one axis.

    Starts advance by ``tile - 2*halo`` snapped down to a multiple of
    ``align``; the last window is anchored to a multiple of ``align`` and
    stretched to the end of the axis so coverage is complete.
    """
    if size <= tile:
        return [(0, size)]
    stride = tile - 2 * halo
    stride -= stride % align
    if stride < 1:
        raise ValueError(f"tile={tile}, halo={halo}, align={align} give non-positive stride")
    starts = []
    pos = 0
    while pos + tile < size:
        starts.append(pos)
        pos += stride
    last = ((size - tile) // align) * align
    if not starts or last > starts[-1]:
        starts.append(last)
    return [(s, s + tile) for s in starts[:-1]] + [(starts[-1], size)]


def _axis_owned(windows: list[tuple[int, int]], size: int) -> list[tuple[int, int]]:
    """Partition of [0, size) into per-window owned spans (overlap midpoints)."""
    cuts = [0]
    for (s0, e0), (s1, e1) in zip(windows, windows[1:]):
        cuts.append((s1 + e0) // 2)
    cuts.append(size)
    return list(zip(cuts[:-1], cuts[1:]))


@dataclass(frozen=True)
class TileSpec:
    """Tiling of a raster into overlapping windows with halo margins.

    Each window owns a center span; owned spans partition the raster exactly
    once, and every owned pixel sits at least ``halo`` pixels inside its
    window (border windows excepted, where the window edge is the raster
    edge).
    """

    tile_size: int
    halo: int
    height: int
    width: int
    row_windows: list[tuple[int, int]] = field(repr=False)
    col_windows: list[tuple[int, int]] = field(repr=False)
    row_owned: list[tuple[int, int]] = field(repr=False)
    col_owned: list[tuple[int, int]] = field(repr=False)

    @property
    def placements(self) -> list[tuple[int, int]]:
        """Window origins (row0, col0), row-major."""
        return [(r[0], c[0]) for r in self.row_windows for c in self.col_windows]

    @property
    def n_tiles(self) -> int:
        return len(self.row_windows) * len(self.col_windows)

    def window(self, i: int) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1) of tile ``i`` in row-major order."""
        r = self.row_windows[i // len(self.col_windows)]
        c = self.col_windows[i % len(self.col_windows)]
        return (r[0], r[1], c[0], c[1])

    def owned(self, i: int) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1) of the span tile ``i`` owns in the mosaic."""
        r = self.row_owned[i // len(self.col_owned)]
        c = self.col_owned[i % len(self.col_owned)]
        return (r[0], r[1], c[0], c[1])


def make_tiles(height: int, width: int, tile_size: int, halo: int, align: int = 1) -> TileSpec:
    """Plan an overlapping tiling whose owned center regions partition the raster.

    ``align`` forces window starts onto multiples of ``align`` (needed by
    models with strided downsampling); the trailing window stretches to the
    raster edge, so windows are ``tile_size`` wide except possibly the last
    one per axis.
    """
    if tile_size <= 2 * halo:
        raise ValueError(f"tile_size must exceed 2*halo, got tile={tile_size}, halo={halo}")
    if halo < 0 or align < 1:
        raise ValueError("halo must be >= 0 and align >= 1")
    rw = _axis_windows(height, tile_size, halo, align)
    cw = _axis_windows(width, tile_size, halo, align)
    return TileSpec(
        tile_size=tile_size, halo=halo, height=height, width=width,
        row_windows=rw, col_windows=cw,
        row_owned=_axis_owned(rw, height), col_owned=_axis_owned(cw, width),
    )
