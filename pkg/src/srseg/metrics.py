"""Classification and image-quality metrics.

Binary confusion-matrix metrics treat the sealed-surface (ISA) class as
positive. Per-class rows are computed from global pixel counts; the report's
mean row is the arithmetic mean of the two class rows, column by column.
Degenerate denominators yield ``None`` ("undefined"), never a silent zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "ConfusionMatrix", "ClassMetrics", "MetricsReport", "SSIMConfig",
    "confusion", "report", "psnr", "ssim",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Global pixel counts with ISA as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Merge counts from disjoint pixel sets (tiled evaluation)."""
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def swapped(self) -> "ConfusionMatrix":
        """The same counts with the negative class treated as positive."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def _ratio(num: int | float, den: int | float) -> float | None:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class ClassMetrics:
    precision: float | None
    recall: float | None
    f1: float | None
    iou: float | None

    @classmethod
    def from_counts(cls, cm: ConfusionMatrix) -> "ClassMetrics":
        p = _ratio(cm.tp, cm.tp + cm.fp)
        r = _ratio(cm.tp, cm.tp + cm.fn)
        f1 = None if (p is None or r is None or p + r == 0) else 2 * p * r / (p + r)
        return cls(p, r, f1, _ratio(cm.tp, cm.tp + cm.fp + cm.fn))

    def as_tuple(self):
        return (self.precision, self.recall, self.f1, self.iou)


def _mean_row(a: ClassMetrics, b: ClassMetrics) -> ClassMetrics:
    vals = []
    for x, y in zip(a.as_tuple(), b.as_tuple()):
        vals.append(None if x is None or y is None else (x + y) / 2)
    return ClassMetrics(*vals)


@dataclass(frozen=True)
class MetricsReport:
    """Per-class rows (ISA positive / non-ISA positive), macro mean, OA."""

    isa: ClassMetrics
    non_isa: ClassMetrics
    mean: ClassMetrics
    overall_accuracy: float | None
    pixels: int = 0
    psnr: float | None = None
    ssim: float | None = None

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricsReport":
        if cm.total == 0:
            raise ValueError("cannot report on an empty confusion matrix")
        isa = ClassMetrics.from_counts(cm)
        non = ClassMetrics.from_counts(cm.swapped())
        return cls(isa=isa, non_isa=non, mean=_mean_row(isa, non),
                   overall_accuracy=(cm.tp + cm.tn) / cm.total, pixels=cm.total)

    @classmethod
    def from_class_rows(cls, non_isa: ClassMetrics, isa: ClassMetrics,
                        overall_accuracy: float | None = None) -> "MetricsReport":
        """Assemble a report from externally supplied per-class rows."""
        return cls(isa=isa, non_isa=non_isa, mean=_mean_row(isa, non_isa),
                   overall_accuracy=overall_accuracy)

    def to_rows(self) -> list[dict]:
        """Rows in the Class / Precision / Recall / F1-score / IOU / OA layout."""
        def fmt(v):
            return "" if v is None else f"{v:.4f}"
        rows = []
        for label, cm in (("Non-ISA", self.non_isa), ("ISA", self.isa),
                          ("Mean", self.mean)):
            rows.append({"Class": label,
                         "Precision": fmt(cm.precision), "Recall": fmt(cm.recall),
                         "F1-score": fmt(cm.f1), "IOU": fmt(cm.iou),
                         "OA": fmt(self.overall_accuracy) if label == "Non-ISA" else ""})
        return rows

    def to_dict(self) -> dict:
        def row(cm: ClassMetrics):
            return {"precision": cm.precision, "recall": cm.recall,
                    "f1": cm.f1, "iou": cm.iou}
        d = {"isa": row(self.isa), "non_isa": row(self.non_isa),
             "mean": row(self.mean), "overall_accuracy": self.overall_accuracy,
             "pixels": self.pixels}
        if self.psnr is not None:
            d["psnr"] = self.psnr
        if self.ssim is not None:
            d["ssim"] = self.ssim
        return d


def _as_binary(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} contains values outside {{0, 1}}")
    return a.astype(bool)


def confusion(pred, gt, nodata_mask: np.ndarray | None = None) -> ConfusionMatrix:
    """Count tp/fp/fn/tn between binary masks, skipping nodata pixels."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if nodata_mask is not None:
        valid = ~np.asarray(nodata_mask, dtype=bool)
        if valid.shape != p.shape:
            raise ValueError("nodata mask shape mismatch")
        p, g = p[valid], g[valid]
    return ConfusionMatrix(
        tp=int(np.sum(p & g)), fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)), tn=int(np.sum(~p & ~g)),
    )


def report(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class metrics for ISA and non-ISA plus macro means and OA."""
    return MetricsReport.from_confusion(cm)


def psnr(a, b, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE); identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


@dataclass(frozen=True)
class SSIMConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, cfg: SSIMConfig = SSIMConfig()) -> float:
    """Mean structural similarity over valid window positions and bands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError("expected [h, w] or [bands, h, w] arrays")
    k = cfg.window_size
    if a.shape[1] < k or a.shape[2] < k:
        raise ValueError(f"image {a.shape[1]}x{a.shape[2]} smaller than {k}x{k} window")
    win = _gaussian_window(k, cfg.sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    r = k // 2

    def local(img):
        return ndimage.correlate(img, win, mode="constant")[r:img.shape[0] - r, r:img.shape[1] - r]

    vals = []
    for band_a, band_b in zip(a, b):
        mu_a, mu_b = local(band_a), local(band_b)
        var_a = local(band_a * band_a) - mu_a ** 2
        var_b = local(band_b * band_b) - mu_b ** 2
        cov = local(band_a * band_b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
