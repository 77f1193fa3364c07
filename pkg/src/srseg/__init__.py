"""srseg: joint x10 super-resolution and segmentation for 1 m ISA mapping.

The package turns 10 m multispectral scenes into 1 m binary impervious-surface
rasters: a progressive two-stage adversarial super-resolution network, a
multimodal segmentation stage, second-order degradation synthesis for
training supervision, tiled scene inference, and the metric/area/change
analysis suite around them.
"""

from .raster import GeoRaster, GeoTransform, TileSpec, make_tiles, resample
from .geotiff import GeoTiffError, read_geotiff, write_geotiff
from .metrics import (ClassMetrics, ConfusionMatrix, MetricsReport, SSIMConfig,
                      confusion, psnr, report, ssim)
from .analysis import (AreaRecord, ChangeRecord, biennial_table, change_rate,
                       compare_products, isa_area, reference_biennial_areas)

__version__ = "0.1.0"

__all__ = [
    "GeoRaster", "GeoTransform", "TileSpec", "make_tiles", "resample",
    "GeoTiffError", "read_geotiff", "write_geotiff",
    "ClassMetrics", "ConfusionMatrix", "MetricsReport", "SSIMConfig",
    "confusion", "psnr", "report", "ssim",
    "AreaRecord", "ChangeRecord", "biennial_table", "change_rate",
    "compare_products", "isa_area", "reference_biennial_areas",
    "__version__",
]
