"""Train the progressive x10 super-resolution network at demo scale.

Phase one fits the generator with L1 supervision (the PSNR-oriented model);
phase two fine-tunes it adversarially with two spectrally normalized U-Net
discriminators, one per stage. A couple of minutes on one CPU core.
"""

import pathlib
import tempfile

from srseg.srnet import DiscriminatorConfig, GeneratorConfig
from srseg.srtrain import (SRTrainConfig, train_gan_phase, train_psnr_phase,
                           validate_sr)
from srseg.synth import SceneSpec, build_dataset

out_dir = pathlib.Path(tempfile.mkdtemp(prefix="srseg_demo_"))
manifest = build_dataset(24, SceneSpec(seed=0, hr_size=160), out_dir / "dataset",
                         fractions=(0.75, 0.125, 0.125), seed=2)

gen_cfg = GeneratorConfig(n_rrdb_stage1=2, n_rrdb_stage2=2, feat_width=16,
                          growth_channels=8)
print(f"generator: {gen_cfg.n_rrdb_stage1}+{gen_cfg.n_rrdb_stage2} blocks, "
      f"{gen_cfg.feat_width} channels")

psnr_cfg = SRTrainConfig(steps=300, batch_size=1, crop_lr=8, val_every=100,
                         log_every=50, seed=0)
ckpt, history = train_psnr_phase(manifest, gen_cfg, psnr_cfg,
                                 log_path=out_dir / "psnr.jsonl")
print(f"psnr phase: L1 {history[0]['loss']:.3f} -> {history[-1]['loss']:.3f} "
      f"over {len(history)} steps")
mean_psnr, mean_ssim = validate_sr(ckpt, manifest, "val")
print(f"  val PSNR {mean_psnr:.2f} dB, SSIM {mean_ssim:.3f}")
ckpt.save(out_dir / "sr_psnr.ckpt")

gan_cfg = SRTrainConfig(phase="gan", steps=60, batch_size=1, crop_lr=8,
                        val_every=0, log_every=20, seed=0, lr_generator=5e-5)
disc_cfg = DiscriminatorConfig(depth=2, base_channels=16)
gan_ckpt, gan_history = train_gan_phase(ckpt, manifest, gan_cfg, disc_cfg,
                                        log_path=out_dir / "gan.jsonl")
print(f"gan phase: generator loss {gan_history[0]['loss_g']:.3f} -> "
      f"{gan_history[-1]['loss_g']:.3f}, parent checkpoint "
      f"{gan_ckpt.meta['parent'][:12]}…")
gan_ckpt.save(out_dir / "sr_gan.ckpt")
mean_psnr, mean_ssim = validate_sr(gan_ckpt, manifest, "val")
print(f"  val PSNR {mean_psnr:.2f} dB, SSIM {mean_ssim:.3f}")
print(f"\ncheckpoints + JSONL logs in {out_dir}")
