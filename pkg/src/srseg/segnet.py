"""Multimodal binary segmentation at the 1 m grid.

Three backbone families cover the ablation axis: a U-Net encoder-decoder, a
small attention encoder, and a query-based mask-classification head where
learned queries emit (class, mask) pairs matched to ground truth by
minimum-cost assignment. Inputs are 1 m RGB, the 12-band 10 m cube, or both
(nearest-upsampled and concatenated, or fused as branch features); output is
always a per-pixel 2-class probability field on the 1 m grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

__all__ = [
    "ModalityConfig", "SegConfig", "SegOutput", "SegModel",
    "build_seg_model", "fuse_modalities", "forward_seg",
    "hungarian_match", "solve_assignment", "seg_loss", "NO_OBJECT",
]

NO_OBJECT = 2  # class index for unmatched queries (internal to the query head)


@dataclass(frozen=True)
class ModalityConfig:
    mode: str = "RGB+S2"          # S2 | RGB | RGB+S2
    fusion: str = "input-concat"  # input-concat | feature-concat
    s2_upsample: str = "nearest"

    def __post_init__(self):
        if self.mode not in ("S2", "RGB", "RGB+S2"):
            raise ValueError(f"unknown modality mode {self.mode!r}")
        if self.fusion not in ("input-concat", "feature-concat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def in_channels(self) -> int:
        return {"S2": 12, "RGB": 3, "RGB+S2": 15}[self.mode]


@dataclass(frozen=True)
class SegConfig:
    backbone: str = "encoder-decoder"  # encoder-decoder | attention-encoder | query-mask
    classes: int = 2                   # fixed: ISA vs non-ISA
    base_channels: int = 16
    depth: int = 3
    n_queries: int = 8
    embed_dim: int = 64
    n_heads: int = 4
    decoder_layers: int = 2
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    modality: ModalityConfig = field(default_factory=ModalityConfig)

    def __post_init__(self):
        if self.classes != 2:
            raise ValueError("this model family is binary (classes = 2)")
        if self.backbone not in ("encoder-decoder", "attention-encoder", "query-mask"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.n_queries < self.classes:
            raise ValueError("n_queries must be >= number of classes")


@dataclass
class SegOutput:
    """Per-pixel class probabilities plus optional query-head internals."""

    prob: Tensor                      # [n, 2, H, W], rows sum to 1
    logits: Tensor | None = None      # pixel backbones only
    query_cls: Tensor | None = None   # [n, Q, classes+1]
    query_masks: Tensor | None = None  # [n, Q, h', w'] (mask-grid logits)


def fuse_modalities(rgb: Tensor, s2: Tensor, cfg: ModalityConfig) -> Tensor:
    """Nearest-upsample the cube x10 and concatenate onto the RGB channels."""
    if cfg.mode != "RGB+S2":
        raise ValueError("fuse_modalities applies to RGB+S2 mode")
    if rgb.shape[-2:] != (s2.shape[-2] * 10, s2.shape[-1] * 10):
        raise ValueError(
            f"misaligned modalities: rgb {tuple(rgb.shape[-2:])} vs "
            f"s2 {tuple(s2.shape[-2:])} (expected exact x10)")
    up = F.interpolate(s2, scale_factor=10, mode="nearest")
    return torch.cat([rgb, up], dim=1)


def _pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, int, int]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, ph, pw


class _DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNetBackbone(nn.Module):
    """Encoder-decoder with skip connections; pads internally to 2^depth."""

    def __init__(self, in_ch: int, classes: int, base: int, depth: int):
        super().__init__()
        self.depth = depth
        widths = [base * 2 ** i for i in range(depth + 1)]
        self.stem = _DoubleConv(in_ch, widths[0])
        self.down = nn.ModuleList([nn.Conv2d(widths[i], widths[i + 1], 4, 2, 1)
                                   for i in range(depth)])
        self.enc = nn.ModuleList([_DoubleConv(widths[i + 1], widths[i + 1])
                                  for i in range(depth)])
        self.up = nn.ModuleList([nn.Conv2d(widths[i + 1], widths[i], 3, 1, 1)
                                 for i in reversed(range(depth))])
        self.dec = nn.ModuleList([_DoubleConv(2 * widths[i], widths[i])
                                  for i in reversed(range(depth))])
        self.head = nn.Conv2d(widths[0], classes, 3, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        x, ph, pw = _pad_to_multiple(x, 2 ** self.depth)
        h, w = x.shape[-2:]
        x = self.stem(x)
        skips = []
        for down, enc in zip(self.down, self.enc):
            skips.append(x)
            x = enc(F.leaky_relu(down(x), 0.2))
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = dec(torch.cat([up(x), skip], dim=1))
        out = self.head(x)
        return out[..., :h - ph if ph else h, :w - pw if pw else w]

    def receptive_field_radius(self) -> int:
        r = 2.0  # stem
        for i in range(self.depth):
            r += 1.5 * 2 ** i + 2 * 2 ** (i + 1)   # down conv + enc block
        for i in reversed(range(self.depth)):
            r += 2 ** i + 3 * 2 ** i               # upsample + up conv + dec block
        return math.ceil(r + 1)

    @property
    def grid_multiple(self) -> int:
        return 2 ** self.depth


def _sincos_position(h: int, w: int, dim: int, device, dtype) -> Tensor:
    """Fixed 2D sin/cos positional features, [h*w, dim]."""
    half = dim // 2
    freqs = torch.exp(torch.arange(0, half, 2, device=device, dtype=dtype)
                      * (-math.log(1e4) / max(half - 1, 1)))
    ys = torch.arange(h, device=device, dtype=dtype)[:, None] * freqs[None]
    xs = torch.arange(w, device=device, dtype=dtype)[:, None] * freqs[None]
    enc_y = torch.cat([ys.sin(), ys.cos()], dim=1)  # [h, half]
    enc_x = torch.cat([xs.sin(), xs.cos()], dim=1)  # [w, half]
    out = torch.cat([
        enc_y[:, None, :].expand(h, w, enc_y.shape[1]),
        enc_x[None, :, :].expand(h, w, enc_x.shape[1]),
    ], dim=2)
    if out.shape[2] < dim:
        out = F.pad(out, (0, dim - out.shape[2]))
    return out[:, :, :dim].reshape(h * w, dim)


class _TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(),
                                 nn.Linear(dim * 2, dim))

    def forward(self, x):
        a, _ = self.attn(self.norm1(x), self.norm1(x), self.norm1(x),
                         need_weights=False)
        x = x + a
        return x + self.mlp(self.norm2(x))


class AttentionBackbone(nn.Module):
    """Patch-embedding encoder with global self-attention blocks."""

    patch = 4

    def __init__(self, in_ch: int, classes: int, embed: int, heads: int,
                 blocks: int = 2):
        super().__init__()
        self.embed = embed
        self.stem = nn.Conv2d(in_ch, embed, self.patch, self.patch)
        self.blocks = nn.ModuleList([_TransformerBlock(embed, heads)
                                     for _ in range(blocks)])
        self.head = nn.Sequential(nn.Conv2d(embed, embed, 3, 1, 1),
                                  nn.LeakyReLU(0.2, inplace=True),
                                  nn.Conv2d(embed, classes, 3, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        x, ph, pw = _pad_to_multiple(x, self.patch)
        h, w = x.shape[-2:]
        feat = self.stem(x)
        gh, gw = feat.shape[-2:]
        tokens = feat.flatten(2).transpose(1, 2)
        tokens = tokens + _sincos_position(gh, gw, self.embed, x.device, x.dtype)
        for block in self.blocks:
            tokens = block(tokens)
        feat = tokens.transpose(1, 2).reshape(-1, self.embed, gh, gw)
        out = self.head(feat)
        out = F.interpolate(out, scale_factor=self.patch, mode="bilinear",
                            align_corners=False)
        return out[..., :h - ph if ph else h, :w - pw if pw else w]

    @property
    def grid_multiple(self) -> int:
        return self.patch


class QueryMaskBackbone(nn.Module):
    """Mask-classification head: queries emit (class, mask) pairs.

    Two decoder layers with masked cross-attention: each query attends only
    to pixels its previous mask rates above 0.5, falling back to the full
    grid when that set is empty.
    """

    stride = 4

    def __init__(self, in_ch: int, classes: int, embed: int, heads: int,
                 n_queries: int, layers: int = 2):
        super().__init__()
        self.embed, self.heads, self.classes = embed, heads, classes
        self.encoder = nn.Sequential(
            nn.Conv2d(in_ch, embed // 2, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(embed // 2, embed, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(embed, embed, 3, 1, 1),
        )
        self.queries = nn.Embedding(n_queries, embed)
        self.cross = nn.ModuleList([nn.MultiheadAttention(embed, heads, batch_first=True)
                                    for _ in range(layers)])
        self.self_attn = nn.ModuleList([nn.MultiheadAttention(embed, heads, batch_first=True)
                                        for _ in range(layers)])
        self.ffn = nn.ModuleList([nn.Sequential(nn.Linear(embed, embed * 2), nn.GELU(),
                                                nn.Linear(embed * 2, embed))
                                  for _ in range(layers)])
        self.norms = nn.ModuleList([nn.LayerNorm(embed) for _ in range(3 * layers)])
        self.cls_head = nn.Linear(embed, classes + 1)  # +1 no-object
        self.mask_embed = nn.Linear(embed, embed)

    def _predict(self, q: Tensor, pixel: Tensor) -> tuple[Tensor, Tensor]:
        cls = self.cls_head(q)
        masks = torch.einsum("nqe,nehw->nqhw", self.mask_embed(q), pixel)
        return cls, masks

    def forward(self, x: Tensor) -> dict:
        x, ph, pw = _pad_to_multiple(x, self.stride)
        pixel = self.encoder(x)
        n, _, gh, gw = pixel.shape
        pos = _sincos_position(gh, gw, self.embed, x.device, x.dtype)
        tokens = pixel.flatten(2).transpose(1, 2) + pos
        q = self.queries.weight[None].expand(n, -1, -1)
        cls, masks = self._predict(q, pixel)
        for i, (cross, self_a, ffn) in enumerate(zip(self.cross, self.self_attn,
                                                     self.ffn)):
            with torch.no_grad():
                allow = masks.sigmoid().flatten(2) > 0.5          # [n, Q, hw]
                empty = ~allow.any(dim=2, keepdim=True)
                allow = allow | empty                             # fallback: attend all
                attn_mask = ~allow                                 # True = blocked
                attn_mask = attn_mask.repeat_interleave(self.heads, dim=0)
            a, _ = cross(self.norms[3 * i](q), tokens, tokens,
                         attn_mask=attn_mask, need_weights=False)
            q = q + a
            s, _ = self_a(self.norms[3 * i + 1](q), self.norms[3 * i + 1](q),
                          self.norms[3 * i + 1](q), need_weights=False)
            q = q + s
            q = q + ffn(self.norms[3 * i + 2](q))
            cls, masks = self._predict(q, pixel)
        return {"cls": cls, "masks": masks, "pad": (ph, pw)}

    @property
    def grid_multiple(self) -> int:
        return self.stride


class _DualBranchNet(nn.Module):
    """Feature-level fusion: RGB and cube branches meet on the 10 m grid."""

    def __init__(self, classes: int, base: int):
        super().__init__()
        self.rgb_stem = nn.Sequential(
            nn.Conv2d(3, base, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base, base * 2, 5, 5), nn.LeakyReLU(0.2, inplace=True),
        )
        self.s2_stem = nn.Sequential(
            nn.Conv2d(12, base * 2, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.body = _DoubleConv(base * 4, base * 4)
        self.up1 = nn.Sequential(nn.Conv2d(base * 4, base * 2, 3, 1, 1),
                                 nn.LeakyReLU(0.2, inplace=True))
        self.up2 = nn.Sequential(nn.Conv2d(base * 2, base, 3, 1, 1),
                                 nn.LeakyReLU(0.2, inplace=True))
        self.head = nn.Conv2d(base, classes, 3, 1, 1)

    def forward(self, rgb: Tensor, s2: Tensor) -> Tensor:
        fr = self.rgb_stem(rgb)          # 1 m -> 10 m grid
        fs = self.s2_stem(s2)
        x = self.body(torch.cat([fr, fs], dim=1))
        x = self.up1(F.interpolate(x, scale_factor=2, mode="bilinear",
                                   align_corners=False))
        x = self.up2(F.interpolate(x, scale_factor=5, mode="bilinear",
                                   align_corners=False))
        return self.head(x)

    @property
    def grid_multiple(self) -> int:
        return 10


class SegModel(nn.Module):
    """Modality handling + backbone + probability composition."""

    def __init__(self, cfg: SegConfig = SegConfig()):
        super().__init__()
        self.cfg = cfg
        mode, fusion = cfg.modality.mode, cfg.modality.fusion
        self.dual = mode == "RGB+S2" and fusion == "feature-concat"
        if self.dual:
            self.net: nn.Module = _DualBranchNet(cfg.classes, cfg.base_channels)
        elif cfg.backbone == "encoder-decoder":
            self.net = UNetBackbone(cfg.modality.in_channels, cfg.classes,
                                    cfg.base_channels, cfg.depth)
        elif cfg.backbone == "attention-encoder":
            self.net = AttentionBackbone(cfg.modality.in_channels, cfg.classes,
                                         cfg.embed_dim, cfg.n_heads)
        else:
            self.net = QueryMaskBackbone(cfg.modality.in_channels, cfg.classes,
                                         cfg.embed_dim, cfg.n_heads,
                                         cfg.n_queries, cfg.decoder_layers)

    def _prepare(self, rgb: Tensor | None, s2: Tensor | None) -> Tensor:
        mode = self.cfg.modality.mode
        if mode == "RGB":
            if rgb is None:
                raise ValueError("RGB mode needs an rgb input")
            return rgb
        if mode == "S2":
            if s2 is None:
                raise ValueError("S2 mode needs the band cube")
            return s2
        if rgb is None or s2 is None:
            raise ValueError("RGB+S2 mode needs both inputs")
        return fuse_modalities(rgb, s2, self.cfg.modality)

    def forward(self, rgb: Tensor | None = None, s2: Tensor | None = None) -> SegOutput:
        if self.dual:
            if rgb is None or s2 is None:
                raise ValueError("feature-concat fusion needs both inputs")
            logits = self.net(rgb, s2)
            return SegOutput(prob=F.softmax(logits, dim=1), logits=logits)
        x = self._prepare(rgb, s2)
        if isinstance(self.net, QueryMaskBackbone):
            out = self.net(x)
            prob = compose_query_probs(out["cls"], out["masks"],
                                       x.shape[-2:], out["pad"])
            if self.cfg.modality.mode == "S2":
                prob = F.interpolate(prob, scale_factor=10, mode="bilinear",
                                     align_corners=False)
                prob = prob / prob.sum(dim=1, keepdim=True)
            return SegOutput(prob=prob, query_cls=out["cls"],
                             query_masks=out["masks"])
        logits = self.net(x)
        if self.cfg.modality.mode == "S2":
            logits = F.interpolate(logits, scale_factor=10, mode="bilinear",
                                   align_corners=False)
        return SegOutput(prob=F.softmax(logits, dim=1), logits=logits)

    def receptive_field_radius(self) -> int | None:
        """Output-grid radius; None for globally attending backbones."""
        if isinstance(self.net, UNetBackbone):
            return self.net.receptive_field_radius()
        return None

    @property
    def grid_multiple(self) -> int:
        return getattr(self.net, "grid_multiple", 1)


def build_seg_model(cfg: SegConfig = SegConfig()) -> SegModel:
    return SegModel(cfg)


def forward_seg(model: SegModel, rgb: Tensor | None = None,
                s2: Tensor | None = None) -> SegOutput:
    return model(rgb=rgb, s2=s2)


def compose_query_probs(cls: Tensor, masks: Tensor, full_hw: tuple[int, int],
                        pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Blend per-query sigmoid masks with class weights into pixel probs."""
    n, q, gh, gw = masks.shape
    p_cls = F.softmax(cls, dim=-1)[..., :-1]        # drop no-object
    m = masks.sigmoid()
    scores = torch.einsum("nqc,nqhw->nchw", p_cls, m) + 1e-8
    up = F.interpolate(scores, scale_factor=QueryMaskBackbone.stride,
                       mode="bilinear", align_corners=False)
    ph, pw = pad
    h = up.shape[-2] - ph if ph else up.shape[-2]
    w = up.shape[-1] - pw if pw else up.shape[-1]
    up = up[..., :h, :w]
    return up / up.sum(dim=1, keepdim=True)


def _dice_cost(pred: Tensor, gt: Tensor, eps: float = 1.0) -> Tensor:
    inter = (pred * gt).sum()
    return 1 - (2 * inter + eps) / (pred.sum() + gt.sum() + eps)


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injection of columns (segments) into rows (queries)."""
    if cost.shape[1] > cost.shape[0]:
        raise ValueError(f"cost matrix needs rows >= columns, got {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    return sorted(((int(r), int(c)) for r, c in zip(rows, cols)), key=lambda rc: rc[1])


def hungarian_match(class_logits: Tensor, query_masks: Tensor,
                    gt_segments: list[tuple[int, Tensor]],
                    w_class: float = 1.0, w_dice: float = 1.0) -> list[tuple[int, int]]:
    """Minimum-cost assignment of queries to ground-truth segments.

    Cost is class negative log-likelihood plus mask dice cost. Returns
    (query_index, segment_index) pairs; every segment is matched.
    """
    n_q = class_logits.shape[0]
    if len(gt_segments) > n_q:
        raise ValueError(f"{len(gt_segments)} segments exceed {n_q} queries")
    if not gt_segments:
        return []
    log_p = F.log_softmax(class_logits.detach().double(), dim=-1)
    probs = query_masks.detach().double().sigmoid()
    cost = np.zeros((n_q, len(gt_segments)))
    for g, (cls_id, gt_mask) in enumerate(gt_segments):
        gm = gt_mask.double()
        for qi in range(n_q):
            cost[qi, g] = (w_class * (-log_p[qi, cls_id].item())
                           + w_dice * _dice_cost(probs[qi], gm).item())
    return solve_assignment(cost)


def _soft_dice(prob: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    inter = (prob * target).sum(dim=(-2, -1))
    total = prob.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (total + eps)).mean()


def _check_label(label: Tensor) -> Tensor:
    if not torch.isin(label.unique(), torch.tensor([0, 1], device=label.device)).all():
        raise ValueError("label contains values outside {0, 1}")
    return label.long()


def seg_loss(output: SegOutput, label: Tensor, cfg: SegConfig) -> Tensor:
    """Training loss for any backbone.

    Pixel backbones: cross-entropy + soft dice. Query head: Hungarian-matched
    per-query mask BCE + dice + class cross-entropy (unmatched -> no-object).
    """
    label = _check_label(label)
    if output.query_cls is not None:
        return _query_loss(output, label, cfg)
    if output.logits is None:
        raise ValueError("pixel loss needs logits")
    logits = output.logits
    if logits.shape[-2:] != label.shape[-2:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs "
                         f"label {tuple(label.shape)}")
    ce = F.cross_entropy(logits, label)
    onehot = F.one_hot(label, cfg.classes).permute(0, 3, 1, 2).to(logits.dtype)
    dice = _soft_dice(F.softmax(logits, dim=1), onehot)
    return cfg.ce_weight * ce + cfg.dice_weight * dice


def _query_loss(output: SegOutput, label: Tensor, cfg: SegConfig) -> Tensor:
    cls, masks = output.query_cls, output.query_masks
    n, n_q = cls.shape[:2]
    gh, gw = masks.shape[-2:]
    total = cls.new_zeros(())
    for b in range(n):
        small = F.adaptive_avg_pool2d(label[b][None, None].to(masks.dtype),
                                      (gh, gw))[0, 0]
        segments = []
        for cls_id in range(cfg.classes):
            gt = small if cls_id == 1 else 1 - small
            if (gt > 0.5).any():
                segments.append((cls_id, (gt > 0.5).to(masks.dtype)))
        pairs = hungarian_match(cls[b], masks[b], segments)
        targets = torch.full((n_q,), NO_OBJECT, dtype=torch.long, device=cls.device)
        mask_terms = cls.new_zeros(())
        for qi, g in pairs:
            cls_id, gt_mask = segments[g]
            targets[qi] = cls_id
            mask_terms = mask_terms + F.binary_cross_entropy_with_logits(
                masks[b, qi], gt_mask)
            mask_terms = mask_terms + _dice_cost(masks[b, qi].sigmoid(), gt_mask)
        class_term = F.cross_entropy(cls[b], targets)
        total = total + class_term + mask_terms / max(len(pairs), 1)
    return total / n
