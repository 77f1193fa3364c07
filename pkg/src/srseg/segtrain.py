"""Segmentation training on SR-label pairs, plus the modality ablation loop.

The segmentation stage trains on the SR network's own outputs (attached to
the manifest as extra rasters) so that inference-time statistics match
training; HR imagery can stand in for ablation runs. Inputs are normalized
per band with the dataset statistics stored in the manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .geotiff import write_geotiff
from .metrics import confusion, report
from .raster import GeoRaster
from .segnet import SegConfig, SegModel, build_seg_model, seg_loss
from .srtrain import (SceneCache, _JsonlLogger, _guard_finite, _load_opt,
                      _opt_arrays, _restore_rng, _rng_meta, load_generator,
                      set_determinism)
from .synth import DatasetManifest

__all__ = [
    "SegTrainConfig", "train_seg", "load_seg_model", "attach_sr_rasters",
    "evaluate_seg", "run_modality_ablation", "Normalizer",
]


@dataclass(frozen=True)
class SegTrainConfig:
    steps: int = 600
    batch_size: int = 4
    crop_lr: int = 10          # crops are cut on the 10 m grid, x10 on the 1 m grid
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 50
    val_every: int = 100
    rgb_source: str = "sr"     # sr | hr
    threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.rgb_source not in ("sr", "hr"):
            raise ValueError(f"unknown rgb_source {self.rgb_source!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


class Normalizer:
    """Per-band affine normalization from manifest statistics."""

    def __init__(self, stats: dict):
        self.rgb_mean = np.asarray(stats["rgb_mean"], dtype=np.float32)[:, None, None]
        self.rgb_std = np.asarray(stats["rgb_std"], dtype=np.float32)[:, None, None]
        self.s2_mean = np.asarray(stats["s2_mean"], dtype=np.float32)[:, None, None]
        self.s2_std = np.asarray(stats["s2_std"], dtype=np.float32)[:, None, None]

    def rgb(self, x: np.ndarray) -> np.ndarray:
        return (x - self.rgb_mean) / self.rgb_std

    def s2(self, x: np.ndarray) -> np.ndarray:
        return (x - self.s2_mean) / self.s2_std


def attach_sr_rasters(manifest: DatasetManifest, sr_ckpt: Checkpoint,
                      subdir: str = "sr") -> DatasetManifest:
    """Super-resolve every scene's RGB bands and attach the results.

    Scenes are small enough at desk scale for whole-image forwards; large
    scenes go through the tiled pipeline instead.
    """
    from .geotiff import read_geotiff
    gen = load_generator(sr_ckpt)
    cache = SceneCache(manifest)
    (manifest.root / subdir).mkdir(parents=True, exist_ok=True)
    records = []
    for rec in manifest.records:
        lr = torch.from_numpy(cache.lr_rgb(rec))[None]
        _, sr10 = gen.predict(lr)
        cube = read_geotiff(manifest.resolve(rec.s2_path))
        rel = f"{subdir}/{rec.scene_id}_sr.tif"
        write_geotiff(GeoRaster(sr10[0].numpy(), cube.transform.scaled(10)),
                      manifest.resolve(rel), compress=True)
        records.append(replace(rec, sr_path=rel))
    updated = DatasetManifest(root=manifest.root, seed=manifest.seed,
                              hr_size=manifest.hr_size, records=records,
                              stats=manifest.stats)
    updated.save(manifest.root / "manifest.json")
    return updated


def _rgb_for(cache: SceneCache, rec, cfg: SegTrainConfig) -> np.ndarray:
    return cache.sr_rgb(rec) if cfg.rgb_source == "sr" else cache.hr_rgb(rec)


def _sample_seg_batch(cache: SceneCache, records, rng: np.random.Generator,
                      cfg: SegTrainConfig, norm: Normalizer, mode: str):
    rgbs, cubes, labels = [], [], []
    for _ in range(cfg.batch_size):
        rec = records[int(rng.integers(len(records)))]
        cube = cache.cube(rec)
        c = min(cfg.crop_lr, cube.shape[1], cube.shape[2])
        r0 = int(rng.integers(cube.shape[1] - c + 1))
        c0 = int(rng.integers(cube.shape[2] - c + 1))
        if mode != "S2":
            rgb = _rgb_for(cache, rec, cfg)
            rgbs.append(norm.rgb(rgb[:, 10 * r0:10 * (r0 + c), 10 * c0:10 * (c0 + c)]))
        if mode != "RGB":
            cubes.append(norm.s2(cube[:, r0:r0 + c, c0:c0 + c]))
        label = cache.label(rec)[0]
        labels.append(label[10 * r0:10 * (r0 + c), 10 * c0:10 * (c0 + c)])
    rgb_t = torch.from_numpy(np.stack(rgbs)) if rgbs else None
    s2_t = torch.from_numpy(np.stack(cubes)) if cubes else None
    return rgb_t, s2_t, torch.from_numpy(np.stack(labels))


def evaluate_seg(model: SegModel, manifest: DatasetManifest, split: str,
                 cfg: SegTrainConfig, cache: SceneCache | None = None,
                 norm: Normalizer | None = None):
    """ISA-positive metrics report over whole scenes of a split."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    cache = cache or SceneCache(manifest)
    norm = norm or Normalizer(manifest.stats)
    mode = model.cfg.modality.mode
    total = None
    with torch.no_grad():
        for rec in records:
            rgb = s2 = None
            if mode != "S2":
                rgb = torch.from_numpy(norm.rgb(_rgb_for(cache, rec, cfg)))[None]
            if mode != "RGB":
                s2 = torch.from_numpy(norm.s2(cache.cube(rec)))[None]
            prob = model(rgb=rgb, s2=s2).prob[0, 1].numpy()
            pred = (prob >= cfg.threshold).astype(np.uint8)
            cm = confusion(pred, cache.label(rec)[0])
            total = cm if total is None else total + cm
    return report(total)


def train_seg(manifest: DatasetManifest, seg_cfg: SegConfig,
              train_cfg: SegTrainConfig, log_path=None,
              resume_from: Checkpoint | None = None,
              ) -> tuple[Checkpoint, list[dict]]:
    """Train a segmentation model; best checkpoint by validation ISA F1."""
    records = manifest.split("train")
    if not records:
        raise ValueError("training split is empty")
    if train_cfg.rgb_source == "sr" and seg_cfg.modality.mode != "S2":
        missing = [r.scene_id for r in manifest.records
                   if not getattr(r, "sr_path", None)]
        if missing:
            raise ValueError(
                f"{len(missing)} scenes lack SR rasters (first: {missing[0]}); "
                "run attach_sr_rasters or set rgb_source='hr'")
    set_determinism(train_cfg.seed, train_cfg.deterministic)
    cache = SceneCache(manifest)
    norm = Normalizer(manifest.stats)
    model = build_seg_model(seg_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=(0.9, 0.99))
    rng = np.random.default_rng(train_cfg.seed)
    mode = seg_cfg.modality.mode
    start_step = 0
    if resume_from is not None:
        model.load_state_dict({k[4:]: v for k, v in
                               resume_from.to_state_dict().items()
                               if k.startswith("cur.")})
        _load_opt("opt", opt, resume_from.arrays)
        torch.set_rng_state(torch.from_numpy(
            resume_from.arrays["torch_rng"].copy()).to(torch.uint8))
        rng = _restore_rng(resume_from.meta["np_rng"])
        start_step = int(resume_from.meta["step"])

    logger = _JsonlLogger(log_path)
    history: list[dict] = []
    best = {"f1": -1.0, "state": None, "step": 0}
    for step in range(start_step, train_cfg.steps):
        rgb, s2, label = _sample_seg_batch(cache, records, rng, train_cfg,
                                           norm, mode)
        out = model(rgb=rgb, s2=s2)
        loss = seg_loss(out, label, seg_cfg)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite segmentation loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": float(loss.item()), "phase": "seg",
               "modality": mode}
        history.append(rec)
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            logger.log(rec)
        if train_cfg.val_every and (step + 1) % train_cfg.val_every == 0:
            model.eval()
            rep = evaluate_seg(model, manifest, "val", train_cfg, cache, norm)
            model.train()
            f1 = rep.isa.f1 if rep.isa.f1 is not None else 0.0
            logger.log({"step": step, "val_isa_f1": f1, "phase": "seg"})
            if f1 > best["f1"]:
                best = {"f1": f1, "state": {k: v.detach().clone() for k, v in
                                            model.state_dict().items()},
                        "step": step}
    _guard_finite(model, "segmentation model")

    deliverable = best["state"] if best["state"] is not None else model.state_dict()
    arrays = {f"seg.{k}": v.detach().cpu().numpy().copy()
              for k, v in deliverable.items()}
    arrays.update({f"cur.{k}": v.detach().cpu().numpy().copy()
                   for k, v in model.state_dict().items()})
    arrays.update(_opt_arrays("opt", opt))
    arrays["torch_rng"] = torch.get_rng_state().numpy().copy()
    ckpt = Checkpoint(
        config={"seg": _seg_cfg_dict(seg_cfg), "train": asdict(train_cfg)},
        meta={"phase": "seg", "step": train_cfg.steps, "seed": train_cfg.seed,
              "best_val_f1": None if best["state"] is None else best["f1"],
              "best_step": best["step"], "np_rng": _rng_meta(rng),
              "stats": manifest.stats, "parent": None},
        arrays=arrays)
    return ckpt, history


def _seg_cfg_dict(cfg: SegConfig) -> dict:
    d = asdict(cfg)
    return d


def load_seg_model(ckpt: Checkpoint) -> SegModel:
    from .segnet import ModalityConfig
    raw = dict(ckpt.config["seg"])
    raw["modality"] = ModalityConfig(**raw["modality"])
    model = build_seg_model(SegConfig(**raw))
    model.load_state_dict({k[4:]: v for k, v in ckpt.to_state_dict().items()
                           if k.startswith("seg.")})
    model.eval()
    return model


def run_modality_ablation(manifest: DatasetManifest, seg_cfg: SegConfig,
                          train_cfg: SegTrainConfig,
                          modes: tuple[str, ...] = ("S2", "RGB", "RGB+S2"),
                          seeds: tuple[int, ...] = (0,),
                          split: str = "test", log_dir=None) -> list[dict]:
    """Train per (modality, seed) and report Table-style rows on a split."""
    from .segnet import ModalityConfig
    rows = []
    for mode in modes:
        for seed in seeds:
            cfg = replace(seg_cfg, modality=ModalityConfig(
                mode=mode, fusion=seg_cfg.modality.fusion))
            tcfg = replace(train_cfg, seed=seed)
            log = (Path(log_dir) / f"seg_{mode}_{seed}.jsonl") if log_dir else None
            ckpt, _ = train_seg(manifest, cfg, tcfg, log_path=log)
            model = load_seg_model(ckpt)
            rep = evaluate_seg(model, manifest, split, tcfg)
            for row in rep.to_rows():
                rows.append({"Model": seg_cfg.backbone, "Input modality": mode,
                             "Seed": seed, **row})
    return rows
