"""Second-order stochastic degradation: HR imagery -> realistic LR targets.

One first-order pass is blur -> random resize -> noise -> compression; the
full model runs two passes (second optional), an optional final sinc filter,
then an area-average resize that snaps to the exact target size. Every random
choice is captured in a :class:`DegradationPlan`, so a plan can be re-applied
bit-identically and serialized for audit.

Compression is modeled as 8x8 block-DCT quantization with a JPEG-shaped step
table: self-contained, deterministic, and gentle enough at quality 95 to stay
within 2/255 of the input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np
from scipy import special
from scipy.fft import dctn, idctn

from .raster import _resample_band

__all__ = [
    "DegradationConfig", "DegradationPlan", "PassPlan", "BlurParams",
    "NoiseParams", "sample_plan", "apply_pass", "apply_plan", "degrade",
    "gaussian_kernel", "sinc_kernel",
]

_RESIZE_FLAGS = {"nearest": cv2.INTER_NEAREST, "bilinear": cv2.INTER_LINEAR,
                 "bicubic": cv2.INTER_CUBIC}


@dataclass(frozen=True)
class DegradationConfig:
    """Ranges from which one concrete degradation realization is sampled."""

    kernel_weights: tuple[float, float, float] = (0.65, 0.25, 0.10)  # iso, aniso, sinc
    kernel_size_range: tuple[int, int] = (7, 21)
    sigma_range: tuple[float, float] = (0.2, 3.0)
    blur_prob: float = 1.0
    resize_scale_range: tuple[float, float] = (0.15, 1.5)
    resize_methods: tuple[str, ...] = ("nearest", "bilinear", "bicubic")
    noise_prob: float = 1.0
    gaussian_noise_prob: float = 0.5  # else Poisson-like
    gaussian_sigma_range: tuple[float, float] = (0.0, 0.1)
    gaussian_gray_prob: float = 0.4
    poisson_scale_range: tuple[float, float] = (100.0, 3000.0)
    jpeg_prob: float = 1.0
    jpeg_quality_range: tuple[int, int] = (30, 95)
    second_pass: bool = True
    final_sinc_prob: float = 0.8

    def __post_init__(self):
        for name in ("kernel_size_range", "sigma_range", "resize_scale_range",
                     "gaussian_sigma_range", "poisson_scale_range",
                     "jpeg_quality_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got ({lo}, {hi})")
        if any(k % 2 == 0 for k in self.kernel_size_range):
            raise ValueError("kernel sizes must be odd")
        if not 0.0 <= self.final_sinc_prob <= 1.0:
            raise ValueError("final_sinc_prob must lie in [0, 1]")
        if len(self.kernel_weights) != 3 or sum(self.kernel_weights) <= 0:
            raise ValueError("kernel_weights needs three non-degenerate weights")

    @classmethod
    def identity(cls) -> "DegradationConfig":
        """A configuration whose realization is a pure block-mean downsample."""
        return cls(blur_prob=0.0, resize_scale_range=(1.0, 1.0),
                   noise_prob=0.0, jpeg_prob=0.0,
                   second_pass=False, final_sinc_prob=0.0)


@dataclass(frozen=True)
class BlurParams:
    family: str  # iso | aniso | sinc
    size: int
    sigma_x: float = 0.0
    sigma_y: float = 0.0
    theta: float = 0.0
    omega: float = 0.0

    def kernel(self) -> np.ndarray:
        if self.family == "sinc":
            return sinc_kernel(self.size, self.omega)
        return gaussian_kernel(self.size, self.sigma_x, self.sigma_y, self.theta)


@dataclass(frozen=True)
class NoiseParams:
    kind: str  # gaussian | poisson
    level: float  # sigma for gaussian, lambda for poisson
    gray: bool
    seed: int


@dataclass(frozen=True)
class PassPlan:
    blur: BlurParams | None
    resize_scale: float
    resize_method: str
    noise: NoiseParams | None
    jpeg_quality: int | None


@dataclass(frozen=True)
class DegradationPlan:
    """Concrete parameters of one degradation realization."""

    pass1: PassPlan
    pass2: PassPlan | None
    final_sinc: BlurParams | None
    seed: int  # rng snapshot the plan was drawn with

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationPlan":
        def load_pass(p):
            if p is None:
                return None
            blur = BlurParams(**p["blur"]) if p["blur"] else None
            noise = NoiseParams(**p["noise"]) if p["noise"] else None
            return PassPlan(blur=blur, resize_scale=p["resize_scale"],
                            resize_method=p["resize_method"], noise=noise,
                            jpeg_quality=p["jpeg_quality"])
        sinc = BlurParams(**d["final_sinc"]) if d["final_sinc"] else None
        return cls(pass1=load_pass(d["pass1"]), pass2=load_pass(d["pass2"]),
                   final_sinc=sinc, seed=d["seed"])


def gaussian_kernel(size: int, sigma_x: float, sigma_y: float, theta: float = 0.0) -> np.ndarray:
    """Rotated anisotropic Gaussian kernel normalized to sum 1."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    if max(sigma_x, sigma_y) < 1e-8:
        k = np.zeros((size, size))
        k[size // 2, size // 2] = 1.0
        return k
    ax = np.arange(size) - (size - 1) / 2
    xx, yy = np.meshgrid(ax, ax)
    c, s = math.cos(theta), math.sin(theta)
    xr = c * xx + s * yy
    yr = -s * xx + c * yy
    k = np.exp(-0.5 * ((xr / max(sigma_x, 1e-8)) ** 2 + (yr / max(sigma_y, 1e-8)) ** 2))
    return k / k.sum()


def sinc_kernel(size: int, omega: float) -> np.ndarray:
    """Circular low-pass (sinc) kernel with cutoff ``omega``, sum 1."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    ax = np.arange(size) - (size - 1) / 2
    xx, yy = np.meshgrid(ax, ax)
    r = np.hypot(xx, yy)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = omega * special.j1(omega * r) / (2 * math.pi * r)
    k[size // 2, size // 2] = omega ** 2 / (4 * math.pi)
    return k / k.sum()


def _sample_blur(cfg: DegradationConfig, rng: np.random.Generator) -> BlurParams:
    w = np.asarray(cfg.kernel_weights, dtype=np.float64)
    family = rng.choice(("iso", "aniso", "sinc"), p=w / w.sum())
    lo, hi = cfg.kernel_size_range
    size = int(rng.choice(np.arange(lo, hi + 1, 2)))
    if family == "sinc":
        omega_lo = math.pi / 3 if size < 13 else math.pi / 5
        return BlurParams("sinc", size, omega=float(rng.uniform(omega_lo, math.pi)))
    sigma_x = float(rng.uniform(*cfg.sigma_range))
    if family == "iso":
        return BlurParams("iso", size, sigma_x=sigma_x, sigma_y=sigma_x)
    sigma_y = float(rng.uniform(*cfg.sigma_range))
    theta = float(rng.uniform(0, math.pi))
    return BlurParams("aniso", size, sigma_x=sigma_x, sigma_y=sigma_y, theta=theta)


def _sample_pass(cfg: DegradationConfig, rng: np.random.Generator) -> PassPlan:
    blur = _sample_blur(cfg, rng) if rng.random() < cfg.blur_prob else None
    scale = float(rng.uniform(*cfg.resize_scale_range))
    method = str(rng.choice(cfg.resize_methods))
    noise = None
    if rng.random() < cfg.noise_prob:
        seed = int(rng.integers(0, 2 ** 31))
        if rng.random() < cfg.gaussian_noise_prob:
            sigma = float(rng.uniform(*cfg.gaussian_sigma_range))
            noise = NoiseParams("gaussian", sigma, bool(rng.random() < cfg.gaussian_gray_prob), seed)
        else:
            lam = float(rng.uniform(*cfg.poisson_scale_range))
            noise = NoiseParams("poisson", lam, False, seed)
    quality = None
    if rng.random() < cfg.jpeg_prob:
        lo, hi = cfg.jpeg_quality_range
        quality = int(rng.integers(lo, hi + 1))
    return PassPlan(blur=blur, resize_scale=scale, resize_method=method,
                    noise=noise, jpeg_quality=quality)


def sample_plan(config: DegradationConfig, rng: np.random.Generator) -> DegradationPlan:
    """Draw one concrete realization of the degradation model."""
    seed = int(rng.integers(0, 2 ** 31))
    plan_rng = np.random.default_rng(seed)
    pass1 = _sample_pass(config, plan_rng)
    pass2 = _sample_pass(config, plan_rng) if config.second_pass else None
    final_sinc = None
    if plan_rng.random() < config.final_sinc_prob:
        lo, hi = config.kernel_size_range
        size = int(plan_rng.choice(np.arange(lo, hi + 1, 2)))
        final_sinc = BlurParams("sinc", size,
                                omega=float(plan_rng.uniform(math.pi / 5, math.pi)))
    return DegradationPlan(pass1=pass1, pass2=pass2, final_sinc=final_sinc, seed=seed)


def _is_delta(blur: BlurParams | None) -> bool:
    return blur is None or (blur.family != "sinc" and max(blur.sigma_x, blur.sigma_y) < 1e-8)


def _blur(img: np.ndarray, blur: BlurParams | None) -> np.ndarray:
    if _is_delta(blur):
        return img
    out = cv2.filter2D(img, -1, blur.kernel().astype(np.float32),
                       borderType=cv2.BORDER_REFLECT_101)
    if out.ndim == 2 and img.ndim == 3:
        out = out[:, :, None]  # cv2 drops singleton channels
    return out


def _add_noise(img: np.ndarray, noise: NoiseParams) -> np.ndarray:
    rng = np.random.default_rng(noise.seed)
    if noise.kind == "gaussian":
        if noise.level <= 0:
            return img
        shape = img.shape[:2] + ((1,) if noise.gray and img.ndim == 3 else img.shape[2:])
        return img + rng.normal(0, noise.level, shape).astype(np.float32)
    lam = max(noise.level, 1.0)
    return rng.poisson(np.clip(img, 0, 1) * lam).astype(np.float32) / lam


# JPEG luminance quantization table: reused for its frequency weighting
_DCT_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _dct_steps(quality: int) -> np.ndarray:
    return np.maximum(1.0, np.floor(_DCT_TABLE * (100 - quality) / 250.0))


def _compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantization at the given quality (higher = milder)."""
    tbl = _dct_steps(quality)
    h, w, c = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img.astype(np.float64) * 255.0 - 128.0,
               ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = x.shape[:2]
    blocks = (x.transpose(2, 0, 1)
               .reshape(c, hh // 8, 8, ww // 8, 8)
               .transpose(0, 1, 3, 2, 4))
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / tbl) * tbl
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, hh, ww).transpose(1, 2, 0)
    return np.clip((rec[:h, :w] + 128.0) / 255.0, 0.0, 1.0).astype(np.float32)


def apply_pass(img: np.ndarray, p: PassPlan) -> np.ndarray:
    """One first-order pass (blur -> resize -> noise -> compress) on HWC [0,1]."""
    out = np.asarray(img, dtype=np.float32)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[:, :, None]
    out = _blur(out, p.blur)
    if p.resize_scale != 1.0:
        h, w = out.shape[:2]
        nh = max(1, int(round(h * p.resize_scale)))
        nw = max(1, int(round(w * p.resize_scale)))
        out = cv2.resize(out, (nw, nh), interpolation=_RESIZE_FLAGS[p.resize_method])
        if out.ndim == 2:
            out = out[:, :, None]
    if p.noise is not None:
        out = _add_noise(out, p.noise)
    out = np.clip(out, 0.0, 1.0)
    if p.jpeg_quality is not None:
        out = _compress(out, p.jpeg_quality)
    return out[:, :, 0] if squeeze else out


def apply_plan(hr: np.ndarray, plan: DegradationPlan, target_hw: tuple[int, int]) -> np.ndarray:
    """Run a full plan on a [c, H, W] image and snap to ``target_hw``.

    The final resize is an exact area average, so an identity plan reduces to
    the block-mean downsample.
    """
    img = np.asarray(hr, dtype=np.float32).transpose(1, 2, 0)
    img = apply_pass(img, plan.pass1)
    if plan.pass2 is not None:
        img = apply_pass(img, plan.pass2)
    if plan.final_sinc is not None:
        img = _blur(img, plan.final_sinc)
        img = np.clip(img, 0.0, 1.0)
    chw = img.transpose(2, 0, 1)
    out = np.stack([_resample_band(band, target_hw[0], target_hw[1], "area_average")
                    for band in chw])
    return np.clip(out.astype(np.float32), 0.0, 1.0)


def degrade(hr: np.ndarray, scale: int, config: DegradationConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, DegradationPlan]:
    """Degrade a [c, N, N] HR image to [c, N/scale, N/scale] plus its plan."""
    c, h, w = hr.shape
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} not divisible by scale {scale}")
    plan = sample_plan(config, rng)
    lr = apply_plan(hr, plan, (h // scale, w // scale))
    return lr, plan
