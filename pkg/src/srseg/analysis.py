"""Product-level statistics: ISA areas, biennial change rates, comparisons.

Area figures require masks in a projected CRS (meter units); geographic
rasters are rejected because degree pixels have no fixed area. Coarser
products are aligned to a reference grid by nearest resampling before
metric comparison so that the binary class semantics survive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .metrics import MetricsReport, confusion, report
from .raster import GeoRaster, resample

__all__ = [
    "AreaRecord", "ChangeRecord", "isa_area", "change_rate",
    "biennial_table", "compare_products", "reference_biennial_areas",
]


@dataclass(frozen=True)
class AreaRecord:
    region: str
    epoch: int
    pixel_count: int
    pixel_area_m2: float

    @property
    def isa_area_km2(self) -> float:
        return self.pixel_count * self.pixel_area_m2 / 1e6


@dataclass(frozen=True)
class ChangeRecord:
    region: str
    epoch_prev: int
    epoch_curr: int
    rate_percent: float | None  # None when the base area is zero


def isa_area(mask: GeoRaster, region: str = "", epoch: int = 0) -> AreaRecord:
    """ISA area of a binary mask, in km^2 of the projected CRS."""
    if mask.transform.is_geographic:
        raise ValueError(
            f"mask CRS {mask.transform.crs_id} is geographic; "
            "area needs a projected CRS with meter units"
        )
    data = mask.data
    if mask.nodata is not None:
        data = np.where(data == mask.nodata, 0, data)
    if not np.isin(data, (0, 1)).all():
        raise ValueError("mask contains values outside {0, 1}")
    t = mask.transform
    return AreaRecord(region=region, epoch=epoch,
                      pixel_count=int(data.sum()),
                      pixel_area_m2=t.pixel_size_x * t.pixel_size_y)


def change_rate(a_prev: float, a_curr: float) -> float | None:
    """Percent change between two epoch areas; None when the base is zero."""
    if a_prev < 0 or a_curr < 0:
        raise ValueError("areas must be non-negative")
    if a_prev == 0:
        return None
    return (a_curr - a_prev) / a_prev * 100.0


def biennial_table(areas: dict[str, dict[int, float]]) -> dict:
    """Epoch-by-region table of areas and inter-epoch change rates.

    ``areas`` maps region -> {epoch: area km^2}. Regions may miss epochs;
    missing cells are flagged rather than interpolated. The first epoch of
    each region has no rate.
    """
    epochs = sorted({e for series in areas.values() for e in series})
    if len(epochs) < 2:
        raise ValueError("need at least two epochs for a change table")
    regions = list(areas)
    rows = []
    for i, epoch in enumerate(epochs):
        row = {"epoch": epoch, "cells": {}}
        for region in regions:
            series = areas[region]
            if epoch not in series:
                row["cells"][region] = {"area_km2": None, "rate_percent": None,
                                        "missing": True}
                continue
            rate = None
            if i > 0 and epochs[i - 1] in series:
                rate = change_rate(series[epochs[i - 1]], series[epoch])
            row["cells"][region] = {
                "area_km2": round(series[epoch], 2),
                "rate_percent": None if rate is None else round(rate, 2),
                "missing": False,
            }
        rows.append(row)
    return {"epochs": epochs, "regions": regions, "rows": rows}


def biennial_table_rows(table: dict) -> list[dict]:
    """Flatten a biennial table into CSV-ready rows (one row per epoch)."""
    out = []
    for row in table["rows"]:
        flat = {"Year": row["epoch"]}
        for region in table["regions"]:
            cell = row["cells"][region]
            flat[f"{region} Area(km2)"] = (
                "" if cell["missing"] else f"{cell['area_km2']:.2f}")
            rate = cell["rate_percent"]
            flat[f"{region} Change rate"] = (
                "-" if rate is None and not cell["missing"]
                else "" if cell["missing"] else f"{rate:.2f}%")
        out.append(flat)
    return out


def _align_to_reference(product: GeoRaster, reference: GeoRaster) -> np.ndarray:
    pt, rt = product.transform, reference.transform
    fx = pt.pixel_size_x / rt.pixel_size_x
    fy = pt.pixel_size_y / rt.pixel_size_y
    if abs(fx - fy) > 1e-9:
        raise ValueError("anisotropic product/reference pixel ratio is not supported")
    if abs(pt.origin_x - rt.origin_x) > pt.pixel_size_x or \
       abs(pt.origin_y - rt.origin_y) > pt.pixel_size_y:
        raise ValueError("product does not overlap the reference extent")
    if abs(fx - 1.0) < 1e-12 and product.data.shape == reference.data.shape:
        return product.data
    aligned = resample(product, fx, method="nearest")
    if aligned.data.shape[1:] != reference.data.shape[1:]:
        a = aligned.data[:, :reference.height, :reference.width]
        if a.shape[1:] != reference.data.shape[1:]:
            raise ValueError(
                f"product grid {aligned.data.shape} cannot cover reference "
                f"{reference.data.shape}")
        return a
    return aligned.data


def compare_products(products: list[GeoRaster], reference: GeoRaster,
                     names: list[str]) -> dict[str, MetricsReport]:
    """Score each product mask against the reference on the reference grid."""
    if len(products) != len(names):
        raise ValueError("one name per product required")
    ref_mask = reference.data
    nodata = reference.nodata_mask()
    out = {}
    for name, product in zip(names, products):
        pred = _align_to_reference(product, reference)
        nd = nodata
        if product.nodata is not None:
            pnd = np.any(pred == product.nodata, axis=0)
            pred = np.where(pred == product.nodata, 0, pred)
            nd = pnd if nd is None else (nd | pnd)
        out[name] = report(confusion(pred, ref_mask, nd))
    return out


def reference_biennial_areas() -> dict[str, dict[int, float]]:
    """Bundled biennial ISA areas (km^2) for six Yangtze River cities."""
    payload = json.loads(
        resources.files("srseg.data").joinpath("yreb_biennial_isa_areas.json").read_text()
    )
    return {region: {int(epoch): float(v) for epoch, v in series.items()}
            for region, series in payload["areas"].items()}
