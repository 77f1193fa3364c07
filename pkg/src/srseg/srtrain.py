"""Two-phase SR training: L1 pretraining, then adversarial fine-tuning.

Phase one optimizes the generator alone with L1 supervision on both stages.
Phase two initializes from a phase-one checkpoint and alternates updates
between two U-Net discriminators (one per stage) and the generator, whose
total loss is l1 + perceptual + the two per-stage GAN terms. All loops are
resumable: optimizer moments and RNG states ride inside the checkpoint, so
a restored run reproduces the loss trace bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoint import Checkpoint
from .geotiff import read_geotiff
from .metrics import SSIMConfig, psnr as psnr_metric, ssim as ssim_metric
from .raster import _area_weights
from .srnet import (DiscriminatorConfig, GeneratorConfig, LossWeights,
                    PerceptualExtractor, ProgressiveGenerator,
                    build_discriminator, build_generator, gan_losses,
                    perceptual_loss)
from .synth import DatasetManifest

__all__ = [
    "SRTrainConfig", "SceneCache", "train_psnr_phase", "train_gan_phase",
    "validate_sr", "PSNR_CAP", "RGB_BAND_INDICES",
]

PSNR_CAP = 100.0  # identical images report this instead of +inf when averaged
RGB_BAND_INDICES = (3, 2, 1)  # B4, B3, B2 in the 12-band cube


@dataclass(frozen=True)
class SRTrainConfig:
    phase: str = "psnr"  # psnr | gan
    steps: int = 2000
    batch_size: int = 2
    crop_lr: int = 12
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    supervise_stage1: bool = True
    seed: int = 0
    log_every: int = 50
    val_every: int = 500
    checkpoint_every: int = 0  # 0: only final/best
    ema_decay: float = 0.0
    deterministic: bool = True

    def __post_init__(self):
        if self.phase not in ("psnr", "gan"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.lr_generator, self.lr_discriminator) <= 0:
            raise ValueError("learning rates must be positive")
        if self.crop_lr % 2:
            raise ValueError("crop_lr must be even")


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


class SceneCache:
    """Lazy in-memory access to a manifest's rasters as float32 arrays."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    def _load(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            self._cache[rel] = read_geotiff(self.manifest.resolve(rel)).data
        return self._cache[rel]

    def lr_rgb(self, rec) -> np.ndarray:
        """[3, h, w] RGB (B4/B3/B2) slice of the cube."""
        return self._load(rec.s2_path)[list(RGB_BAND_INDICES)].astype(np.float32)

    def cube(self, rec) -> np.ndarray:
        return self._load(rec.s2_path).astype(np.float32)

    def hr_rgb(self, rec) -> np.ndarray:
        return self._load(rec.rgb_path).astype(np.float32)

    def sr_rgb(self, rec) -> np.ndarray:
        if not getattr(rec, "sr_path", None):
            raise ValueError(f"scene {rec.scene_id} has no SR raster attached")
        return self._load(rec.sr_path).astype(np.float32)

    def label(self, rec) -> np.ndarray:
        return self._load(rec.label_path).astype(np.int64)


_AREA_W: dict[tuple[int, int], np.ndarray] = {}


def area_resize(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Exact box-overlap area resize of a [c, h, w] array."""
    c, h, w = img.shape
    key_r, key_c = (h, oh), (w, ow)
    if key_r not in _AREA_W:
        _AREA_W[key_r] = _area_weights(h, oh)
    if key_c not in _AREA_W:
        _AREA_W[key_c] = _area_weights(w, ow)
    wr, wc = _AREA_W[key_r], _AREA_W[key_c]
    return np.einsum("oh,chw,pw->cop", wr, img, wc).astype(np.float32)


def _sample_sr_batch(cache: SceneCache, records, rng: np.random.Generator,
                     cfg: SRTrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    lrs, hrs, t4s = [], [], []
    for _ in range(cfg.batch_size):
        rec = records[int(rng.integers(len(records)))]
        lr = cache.lr_rgb(rec)
        hr = cache.hr_rgb(rec)
        c = min(cfg.crop_lr, lr.shape[1], lr.shape[2])
        r0 = int(rng.integers(lr.shape[1] - c + 1))
        c0 = int(rng.integers(lr.shape[2] - c + 1))
        lr_crop = lr[:, r0:r0 + c, c0:c0 + c]
        hr_crop = hr[:, 10 * r0:10 * (r0 + c), 10 * c0:10 * (c0 + c)]
        lrs.append(lr_crop)
        hrs.append(hr_crop)
        t4s.append(area_resize(hr_crop, 4 * c, 4 * c))
    return (torch.from_numpy(np.stack(lrs)), torch.from_numpy(np.stack(hrs)),
            torch.from_numpy(np.stack(t4s)))


def content_loss(sr4: Tensor, sr10: Tensor, hr: Tensor, target4: Tensor,
                 supervise_stage1: bool) -> Tensor:
    loss = F.l1_loss(sr10, hr)
    if supervise_stage1:
        loss = loss + F.l1_loss(sr4, target4)
    return loss


def _rng_meta(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _restore_rng(meta: str) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta)
    return rng


def _opt_arrays(name: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for i, state in opt.state_dict()["state"].items():
        for key, val in state.items():
            arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
            out[f"{name}.{i}.{key}"] = arr
    return out


def _load_opt(name: str, opt: torch.optim.Optimizer, arrays: dict) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for full, arr in arrays.items():
        if not full.startswith(f"{name}."):
            continue
        _, idx, key = full.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    if state:
        sd["state"] = state
        opt.load_state_dict(sd)


def _guard_finite(module: torch.nn.Module, what: str) -> None:
    for pname, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise RuntimeError(f"non-finite parameter {pname} in {what}")


class _JsonlLogger:
    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_psnr_phase(manifest: DatasetManifest, gen_cfg: GeneratorConfig,
                     train_cfg: SRTrainConfig, log_path=None,
                     resume_from: Checkpoint | None = None,
                     ) -> tuple[Checkpoint, list[dict]]:
    """L1-supervised pretraining; returns the best-validation checkpoint."""
    records = manifest.split("train")
    if not records:
        raise ValueError("training split is empty")
    set_determinism(train_cfg.seed, train_cfg.deterministic)
    cache = SceneCache(manifest)
    gen = build_generator(gen_cfg)
    opt = torch.optim.Adam(gen.parameters(), lr=train_cfg.lr_generator,
                           betas=(0.9, 0.99))
    rng = np.random.default_rng(train_cfg.seed)
    start_step = 0
    if resume_from is not None:
        gen.load_state_dict({k[4:]: v for k, v in
                             resume_from.to_state_dict().items()
                             if k.startswith("cur.")})
        _load_opt("opt_g", opt, resume_from.arrays)
        torch.set_rng_state(torch.from_numpy(
            resume_from.arrays["torch_rng"].copy()).to(torch.uint8))
        rng = _restore_rng(resume_from.meta["np_rng"])
        start_step = int(resume_from.meta["step"])

    logger = _JsonlLogger(log_path)
    history: list[dict] = []
    best = {"psnr": -math.inf, "state": None, "step": 0}
    for step in range(start_step, train_cfg.steps):
        lr, hr, t4 = _sample_sr_batch(cache, records, rng, train_cfg)
        sr4, sr10 = gen(lr)
        loss = content_loss(sr4, sr10, hr, t4, train_cfg.supervise_stage1)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at step {step}: {loss}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": float(loss.item()), "phase": "psnr"}
        history.append(rec)
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            logger.log(rec)
        if train_cfg.val_every and (step + 1) % train_cfg.val_every == 0:
            mean_psnr, _ = validate_sr(gen, manifest, "val", cache=cache)
            logger.log({"step": step, "val_psnr": mean_psnr, "phase": "psnr"})
            if mean_psnr > best["psnr"]:
                best = {"psnr": mean_psnr,
                        "state": {k: v.detach().clone() for k, v in
                                  gen.state_dict().items()},
                        "step": step}
    _guard_finite(gen, "generator")

    # "gen." carries the deliverable (best-validation) weights; "cur." plus
    # optimizer moments and RNG states make the checkpoint resumable.
    deliverable = best["state"] if best["state"] is not None else gen.state_dict()
    arrays = {f"gen.{k}": v.detach().cpu().numpy().copy()
              for k, v in deliverable.items()}
    arrays.update({f"cur.{k}": v.detach().cpu().numpy().copy()
                   for k, v in gen.state_dict().items()})
    arrays.update(_opt_arrays("opt_g", opt))
    arrays["torch_rng"] = torch.get_rng_state().numpy().copy()
    ckpt = Checkpoint(
        config={"generator": asdict(gen_cfg), "train": _cfg_dict(train_cfg)},
        meta={"phase": "psnr", "step": train_cfg.steps, "seed": train_cfg.seed,
              "best_val_psnr": None if best["state"] is None else best["psnr"],
              "best_step": best["step"], "np_rng": _rng_meta(rng),
              "parent": None},
        arrays=arrays)
    return ckpt, history


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    return d


def load_generator(ckpt: Checkpoint) -> ProgressiveGenerator:
    gen_cfg = GeneratorConfig(**ckpt.config["generator"])
    gen = build_generator(gen_cfg)
    gen.load_state_dict({k[4:]: v for k, v in ckpt.to_state_dict().items()
                         if k.startswith("gen.")})
    return gen


def train_gan_phase(init: Checkpoint, manifest: DatasetManifest,
                    train_cfg: SRTrainConfig,
                    disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
                    log_path=None,
                    resume_from: Checkpoint | None = None,
                    ) -> tuple[Checkpoint, list[dict]]:
    """Adversarial fine-tuning from a PSNR-phase checkpoint."""
    if init.meta.get("phase") != "psnr":
        raise ValueError(f"init checkpoint has phase {init.meta.get('phase')!r}, "
                         "expected a psnr-phase checkpoint")
    if init.config.get("generator") is None:
        raise ValueError("init checkpoint lacks a generator config")
    records = manifest.split("train")
    if not records:
        raise ValueError("training split is empty")
    step_mult = 2 ** disc_cfg.depth
    if (4 * train_cfg.crop_lr) % step_mult or (10 * train_cfg.crop_lr) % step_mult:
        raise ValueError(
            f"crop_lr={train_cfg.crop_lr} gives stage crops not divisible by "
            f"2^depth={step_mult}; pick a multiple of {step_mult // 2}")
    set_determinism(train_cfg.seed, train_cfg.deterministic)
    cache = SceneCache(manifest)
    gen = load_generator(init)
    gen_cfg = GeneratorConfig(**init.config["generator"])
    disc4 = build_discriminator(disc_cfg)
    disc10 = build_discriminator(disc_cfg)
    ext = PerceptualExtractor(seed=train_cfg.seed)
    w = train_cfg.loss_weights
    opt_g = torch.optim.Adam(gen.parameters(), lr=train_cfg.lr_generator,
                             betas=(0.9, 0.99))
    opt_d4 = torch.optim.Adam(disc4.parameters(), lr=train_cfg.lr_discriminator,
                              betas=(0.9, 0.99))
    opt_d10 = torch.optim.Adam(disc10.parameters(), lr=train_cfg.lr_discriminator,
                               betas=(0.9, 0.99))
    rng = np.random.default_rng(train_cfg.seed)
    start_step = 0
    if resume_from is not None:
        state = resume_from.to_state_dict()
        gen.load_state_dict({k[4:]: v for k, v in state.items()
                             if k.startswith("gen.")})
        disc4.load_state_dict({k[6:]: v for k, v in state.items()
                               if k.startswith("disc4.")})
        disc10.load_state_dict({k[7:]: v for k, v in state.items()
                                if k.startswith("disc10.")})
        for name, opt in (("opt_g", opt_g), ("opt_d4", opt_d4), ("opt_d10", opt_d10)):
            _load_opt(name, opt, resume_from.arrays)
        torch.set_rng_state(torch.from_numpy(
            resume_from.arrays["torch_rng"].copy()).to(torch.uint8))
        rng = _restore_rng(resume_from.meta["np_rng"])
        start_step = int(resume_from.meta["step"])
    logger = _JsonlLogger(log_path)
    history: list[dict] = []
    for step in range(start_step, train_cfg.steps):
        lr, hr, t4 = _sample_sr_batch(cache, records, rng, train_cfg)
        with torch.no_grad():
            fake4, fake10 = gen(lr)
        d_loss4, _ = gan_losses(disc4(t4), disc4(fake4))
        d_loss10, _ = gan_losses(disc10(hr), disc10(fake10))
        opt_d4.zero_grad()
        d_loss4.backward()
        opt_d4.step()
        opt_d10.zero_grad()
        d_loss10.backward()
        opt_d10.step()

        sr4, sr10 = gen(lr)
        loss = w.l1 * content_loss(sr4, sr10, hr, t4, train_cfg.supervise_stage1)
        if w.perceptual > 0:
            loss = loss + w.perceptual * perceptual_loss(sr10, hr, ext)
        if w.gan > 0:
            _, g4 = gan_losses(disc4(t4).detach(), disc4(sr4))
            _, g10 = gan_losses(disc10(hr).detach(), disc10(sr10))
            loss = loss + w.gan * (w.gan_stage4 * g4 + w.gan_stage10 * g10)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite generator loss at step {step}: {loss}")
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        rec = {"step": step, "loss_g": float(loss.item()),
               "loss_d4": float(d_loss4.item()), "loss_d10": float(d_loss10.item()),
               "phase": "gan"}
        history.append(rec)
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            logger.log(rec)
    for module, what in ((gen, "generator"), (disc4, "disc4"), (disc10, "disc10")):
        _guard_finite(module, what)

    arrays = {f"gen.{k}": v.detach().cpu().numpy().copy()
              for k, v in gen.state_dict().items()}
    arrays.update({f"disc4.{k}": v.detach().cpu().numpy().copy()
                   for k, v in disc4.state_dict().items()})
    arrays.update({f"disc10.{k}": v.detach().cpu().numpy().copy()
                   for k, v in disc10.state_dict().items()})
    for name, opt in (("opt_g", opt_g), ("opt_d4", opt_d4), ("opt_d10", opt_d10)):
        arrays.update(_opt_arrays(name, opt))
    arrays["torch_rng"] = torch.get_rng_state().numpy().copy()
    ckpt = Checkpoint(
        config={"generator": asdict(gen_cfg), "train": _cfg_dict(train_cfg),
                "discriminator": asdict(disc_cfg)},
        meta={"phase": "gan", "step": train_cfg.steps, "seed": train_cfg.seed,
              "parent": init.sha256(), "np_rng": _rng_meta(rng)},
        arrays=arrays)
    return ckpt, history


def validate_sr(gen_or_ckpt, manifest: DatasetManifest, split: str = "val",
                cache: SceneCache | None = None) -> tuple[float, float]:
    """Mean PSNR/SSIM of x10 outputs against HR over a manifest split."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    gen = gen_or_ckpt if isinstance(gen_or_ckpt, ProgressiveGenerator) \
        else load_generator(gen_or_ckpt)
    cache = cache or SceneCache(manifest)
    psnrs, ssims = [], []
    for rec in records:
        lr = torch.from_numpy(cache.lr_rgb(rec))[None]
        hr = cache.hr_rgb(rec)
        _, sr10 = gen.predict(lr)
        sr = sr10[0].numpy()
        p = psnr_metric(sr, hr, data_range=1.0)
        psnrs.append(min(p, PSNR_CAP))
        ssims.append(ssim_metric(sr, hr, SSIMConfig()))
    return float(np.mean(psnrs)), float(np.mean(ssims))
