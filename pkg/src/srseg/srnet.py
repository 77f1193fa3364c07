"""Progressive x10 super-resolution networks and their loss suite.

The generator runs a x4 ESRGAN-style stage, fuses its output with the
nearest-upsampled input, and refines on the x4 grid before snapping features
to the exact x10 target. Both stages ride on nearest-interpolation skips, so
zeroing the residual heads turns the network into plain nearest upsampling.
Discriminators are U-Nets emitting per-pixel realness maps, spectrally
normalized everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = [
    "GeneratorConfig", "DiscriminatorConfig", "LossWeights",
    "DenseBlock", "RRDB", "ProgressiveGenerator", "UNetDiscriminator",
    "build_generator", "build_discriminator",
    "spectral_normalize", "SNConv2d",
    "PerceptualExtractor", "perceptual_loss", "gan_losses",
]


@dataclass(frozen=True)
class GeneratorConfig:
    n_rrdb_stage1: int = 4
    n_rrdb_stage2: int = 4
    feat_width: int = 32
    growth_channels: int = 16
    residual_scale: float = 0.2
    fusion: str = "concat"  # concat | add
    in_channels: int = 3
    stage1_scale: int = 4   # fixed
    total_scale: int = 10   # fixed

    def __post_init__(self):
        if self.n_rrdb_stage1 < 1 or self.n_rrdb_stage2 < 1:
            raise ValueError("RRDB block counts must be >= 1")
        if self.feat_width < 8:
            raise ValueError("feat_width must be >= 8")
        if not 0.0 <= self.residual_scale <= 1.0:
            raise ValueError("residual_scale must lie in [0, 1]")
        if self.fusion not in ("concat", "add"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if (self.stage1_scale, self.total_scale) != (4, 10):
            raise ValueError("scales are fixed at (4, 10)")


@dataclass(frozen=True)
class DiscriminatorConfig:
    depth: int = 3
    base_channels: int = 32
    n_power_iterations: int = 1
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 4:
            raise ValueError("depth >= 1 and base_channels >= 4 required")
        if self.n_power_iterations < 1:
            raise ValueError("power iteration count must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    perceptual: float = 1.0
    gan: float = 0.1
    gan_stage4: float = 1.0
    gan_stage10: float = 1.0

    def __post_init__(self):
        vals = (self.l1, self.perceptual, self.gan, self.gan_stage4, self.gan_stage10)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if self.l1 == 0 and self.perceptual == 0 and self.gan == 0:
            raise ValueError("at least one loss weight must be positive")


def _default_init(module: nn.Module, scale: float = 1.0) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0.2, mode="fan_in")
            m.weight.data *= scale
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class DenseBlock(nn.Module):
    """Five densely connected convs with a scaled residual."""

    def __init__(self, feat: int, growth: int, residual_scale: float = 0.2):
        super().__init__()
        self.residual_scale = residual_scale
        self.convs = nn.ModuleList([
            nn.Conv2d(feat + i * growth, growth, 3, 1, 1) for i in range(4)
        ])
        self.conv_out = nn.Conv2d(feat + 4 * growth, feat, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)
        _default_init(self, 0.1)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(self.lrelu(conv(torch.cat(feats, 1))))
        out = self.conv_out(torch.cat(feats, 1))
        return x + self.residual_scale * out


class RRDB(nn.Module):
    """Residual-in-residual dense block; identity when residual_scale is 0."""

    def __init__(self, feat: int, growth: int, residual_scale: float = 0.2):
        super().__init__()
        self.residual_scale = residual_scale
        self.blocks = nn.Sequential(*[DenseBlock(feat, growth, residual_scale)
                                      for _ in range(3)])

    def forward(self, x: Tensor) -> Tensor:
        return x + self.residual_scale * (self.blocks(x) - x)


class ProgressiveGenerator(nn.Module):
    """Two-stage x4 -> x10 generator with nearest-interpolation skips."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        f, g, beta = cfg.feat_width, cfg.growth_channels, cfg.residual_scale
        c = cfg.in_channels
        self.conv_first = nn.Conv2d(c, f, 3, 1, 1)
        self.body1 = nn.Sequential(*[RRDB(f, g, beta) for _ in range(cfg.n_rrdb_stage1)])
        self.conv_body1 = nn.Conv2d(f, f, 3, 1, 1)
        self.conv_up1 = nn.Conv2d(f, f, 3, 1, 1)
        self.conv_up2 = nn.Conv2d(f, f, 3, 1, 1)
        self.conv_hr1 = nn.Conv2d(f, f, 3, 1, 1)
        self.conv_out1 = nn.Conv2d(f, c, 3, 1, 1)

        fuse_in = 2 * c if cfg.fusion == "concat" else c
        self.conv_first2 = nn.Conv2d(fuse_in, f, 3, 1, 1)
        self.body2 = nn.Sequential(*[RRDB(f, g, beta) for _ in range(cfg.n_rrdb_stage2)])
        self.conv_body2 = nn.Conv2d(f, f, 3, 1, 1)
        self.conv_ref1 = nn.Conv2d(f, f, 3, 1, 1)
        self.conv_ref2 = nn.Conv2d(f, f, 3, 1, 1)
        self.conv_out2 = nn.Conv2d(f, c, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)
        for m in (self.conv_first, self.conv_body1, self.conv_up1, self.conv_up2,
                  self.conv_hr1, self.conv_out1, self.conv_first2, self.conv_body2,
                  self.conv_ref1, self.conv_ref2, self.conv_out2):
            _default_init(m)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def receptive_field_radius(self) -> int:
        """Conservative input-grid radius a single output pixel depends on."""
        n1, n2 = self.cfg.n_rrdb_stage1, self.cfg.n_rrdb_stage2
        r = 2 + 15 * n1          # conv_first + RRDBs + conv_body1 on the LR grid
        r += 0.5                 # conv_up1 on the x2 grid
        r += 3 * 0.25            # conv_up2, conv_hr1, conv_out1 on the x4 grid
        r += (2 + 15 * n2) / 4   # stage-2 trunk on the x4 grid
        r += 3 * 0.1             # refinement convs on the x10 grid
        return math.ceil(r)

    def zero_residual_heads_(self) -> "ProgressiveGenerator":
        """Reduce the network to its nearest-interpolation baseline."""
        for conv in (self.conv_out1, self.conv_out2):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        return self

    def forward(self, lr: Tensor) -> tuple[Tensor, Tensor]:
        if lr.ndim != 4:
            raise ValueError(f"expected [n, c, h, w] input, got shape {tuple(lr.shape)}")
        h, w = lr.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"input dims must be even, got {h}x{w}")
        base4 = F.interpolate(lr, scale_factor=4, mode="nearest")
        feat = self.conv_first(lr)
        trunk = self.conv_body1(self.body1(feat)) + feat
        up = self.lrelu(self.conv_up1(F.interpolate(trunk, scale_factor=2, mode="nearest")))
        up = self.lrelu(self.conv_up2(F.interpolate(up, scale_factor=2, mode="nearest")))
        sr4 = base4 + self.conv_out1(self.lrelu(self.conv_hr1(up)))

        fused = torch.cat((sr4, base4), dim=1) if self.cfg.fusion == "concat" \
            else sr4 + base4
        feat2 = self.conv_first2(fused)
        trunk2 = self.conv_body2(self.body2(feat2)) + feat2
        target = (h * self.cfg.total_scale, w * self.cfg.total_scale)
        ft = F.interpolate(trunk2, size=target, mode="nearest")
        ft = self.lrelu(self.conv_ref2(self.lrelu(self.conv_ref1(ft))))
        sr10 = F.interpolate(sr4, size=target, mode="nearest") + self.conv_out2(ft)
        return sr4, sr10

    @torch.no_grad()
    def predict(self, lr: Tensor) -> tuple[Tensor, Tensor]:
        """Inference forward: outputs clamped to [0, 1]."""
        was_training = self.training
        self.eval()
        sr4, sr10 = self.forward(lr)
        if was_training:
            self.train()
        return sr4.clamp(0, 1), sr10.clamp(0, 1)


def build_generator(cfg: GeneratorConfig = GeneratorConfig()) -> ProgressiveGenerator:
    return ProgressiveGenerator(cfg)


def spectral_normalize(weight: Tensor, n_iters: int = 1,
                       u: Tensor | None = None) -> tuple[Tensor, Tensor, float]:
    """Divide a matrixized weight by its power-iteration top singular value.

    Returns (normalized weight, updated left vector, sigma estimate). A zero
    weight comes back unchanged (sigma floored at 1e-12).
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    w2d = weight.flatten(1)
    if u is None:
        gen = torch.Generator(device="cpu").manual_seed(int(w2d.shape[0]) * 7919 + 13)
        u = torch.randn(w2d.shape[0], generator=gen, dtype=w2d.dtype)
    with torch.no_grad():
        v = None
        for _ in range(n_iters):
            v = F.normalize(w2d.T @ u, dim=0, eps=1e-12)
            u = F.normalize(w2d @ v, dim=0, eps=1e-12)
    sigma = torch.dot(u, w2d @ v)
    if float(sigma.abs()) < 1e-12:
        return weight, u, float(sigma)
    return weight / sigma, u, float(sigma)


class SNConv2d(nn.Module):
    """Conv2d whose weight is spectrally normalized with persistent vectors."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, n_power_iterations: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding)
        self.n_power_iterations = n_power_iterations
        w2d = self.conv.weight.flatten(1)
        gen = torch.Generator(device="cpu").manual_seed(out_ch * 7919 + in_ch)
        self.register_buffer("u", F.normalize(
            torch.randn(w2d.shape[0], generator=gen), dim=0))

    def effective_weight(self) -> Tensor:
        """Weight divided by the estimated top singular value.

        Training mode advances the persistent vector by the configured
        iteration count (fast, slightly stale, standard for SN training).
        Eval mode iterates the estimate to convergence, so deployed weights
        honor the Lipschitz bound against an SVD oracle: the adversarial
        updates chase the tracked direction, which can leave the one-step
        estimate a few percent low right after a training step.
        """
        w2d = self.conv.weight.flatten(1)
        u = self.u
        with torch.no_grad():
            if self.training:
                for _ in range(self.n_power_iterations):
                    v = F.normalize(w2d.T @ u, dim=0, eps=1e-12)
                    u = F.normalize(w2d @ v, dim=0, eps=1e-12)
                self.u.copy_(u)
            else:
                sigma_prev = None
                for _ in range(1000):
                    v = F.normalize(w2d.T @ u, dim=0, eps=1e-12)
                    u = F.normalize(w2d @ v, dim=0, eps=1e-12)
                    sigma_est = float(torch.dot(u, w2d @ v))
                    if sigma_prev is not None and \
                            abs(sigma_est - sigma_prev) <= 1e-9 * max(abs(sigma_est), 1e-12):
                        break
                    sigma_prev = sigma_est
        v = F.normalize(w2d.detach().T @ u, dim=0, eps=1e-12)
        sigma = torch.dot(u, w2d @ v)
        if float(sigma.detach().abs()) < 1e-12:
            return self.conv.weight
        return self.conv.weight / sigma

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.effective_weight(), self.conv.bias,
                        self.conv.stride, self.conv.padding)


class UNetDiscriminator(nn.Module):
    """U-Net realness-map discriminator, spectrally normalized everywhere."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        c, d, it = cfg.base_channels, cfg.depth, cfg.n_power_iterations
        widths = [min(c * 2 ** i, c * 8) for i in range(d + 1)]
        self.conv_in = SNConv2d(cfg.in_channels, widths[0], 3, 1, 1, it)
        self.down = nn.ModuleList([
            SNConv2d(widths[i], widths[i + 1], 4, 2, 1, it) for i in range(d)
        ])
        self.mid = SNConv2d(widths[d], widths[d], 3, 1, 1, it)
        self.up = nn.ModuleList([
            SNConv2d(widths[i + 1], widths[i], 3, 1, 1, it) for i in reversed(range(d))
        ])
        self.conv_tail1 = SNConv2d(widths[0], widths[0], 3, 1, 1, it)
        self.conv_tail2 = SNConv2d(widths[0], 1, 3, 1, 1, it)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)

    def sn_modules(self) -> list[SNConv2d]:
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def forward(self, img: Tensor) -> Tensor:
        h, w = img.shape[-2:]
        step = 2 ** self.cfg.depth
        if h % step or w % step:
            raise ValueError(f"input dims must be divisible by {step}, got {h}x{w}")
        x = self.lrelu(self.conv_in(img))
        skips = []
        for down in self.down:
            skips.append(x)
            x = self.lrelu(down(x))
        x = self.lrelu(self.mid(x))
        for up, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.lrelu(up(x)) + skip
        x = self.lrelu(self.conv_tail1(x))
        return self.conv_tail2(x)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> UNetDiscriminator:
    return UNetDiscriminator(cfg)


class PerceptualExtractor(nn.Module):
    """Frozen random conv pyramid used as the perceptual feature space."""

    def __init__(self, seed: int = 0, in_channels: int = 3,
                 widths: tuple[int, ...] = (16, 32, 32, 64, 64),
                 strides: tuple[int, ...] = (1, 2, 1, 2, 1)):
        super().__init__()
        if len(widths) != len(strides):
            raise ValueError("widths and strides must align")
        gen = torch.Generator(device="cpu").manual_seed(seed)
        layers = []
        c = in_channels
        for width, stride in zip(widths, strides):
            conv = nn.Conv2d(c, width, 3, stride, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (1.0 / math.sqrt(9 * c)))
                conv.bias.zero_()
            layers.append(conv)
            c = width
        self.layers = nn.ModuleList(layers)
        self.lrelu = nn.LeakyReLU(0.2)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        for layer in self.layers:
            x = self.lrelu(layer(x))
            feats.append(x)
        return feats


def perceptual_loss(sr: Tensor, hr: Tensor, extractor: PerceptualExtractor,
                    layer_weights: tuple[float, ...] | None = None) -> Tensor:
    """Weighted L1 distance between frozen feature maps of sr and hr."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    fs, fh = extractor.features(sr), extractor.features(hr)
    if layer_weights is None:
        layer_weights = (1.0,) * len(fs)
    if len(layer_weights) != len(fs):
        raise ValueError("one weight per extractor layer required")
    total = sr.new_zeros(())
    for w, a, b in zip(layer_weights, fs, fh):
        total = total + w * F.l1_loss(a, b)
    return total


def gan_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Non-saturating logistic GAN losses averaged over realness-map pixels.

    loss_d = E[softplus(-d_real)] + E[softplus(d_fake)]
    loss_g = E[softplus(-d_fake)]
    """
    if d_real.shape != d_fake.shape:
        raise ValueError("realness maps must share a shape")
    loss_d = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    loss_g = F.softplus(-d_fake).mean()
    return loss_d, loss_g
