"""Operator entry point: one executable, subcommands over all modules.

Exit codes: 0 success, 2 usage/configuration problems, 3 runtime failure.
Every command accepts a config file plus ``--set section.key=value``
overrides (flags win over environment, environment over file) and writes a
resolved config snapshot into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis as ana
from .checkpoint import Checkpoint
from .config import ConfigError, RunConfig, load_config
from .geotiff import read_geotiff
from .metrics import confusion, report
from .pipeline import PipelineError, run_isa_pipeline
from .segtrain import (SegTrainConfig, attach_sr_rasters, evaluate_seg,
                       load_seg_model, run_modality_ablation, train_seg)
from .srtrain import train_gan_phase, train_psnr_phase, validate_sr
from .synth import SceneSpec, build_dataset, load_manifest

log = logging.getLogger("srseg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", type=Path, default=None,
                   help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config entry "
                   "(e.g. --set train.seg.steps=100)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--workers", type=int, default=None,
                   help="parallel workers (default: machine cores)")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=str(args.output_dir))
    if args.deterministic is not None:
        cfg = replace(cfg, deterministic=args.deterministic)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.snapshot(out)
    return out


def _scene_template(cfg: RunConfig) -> SceneSpec:
    d = cfg.data
    return SceneSpec(seed=cfg.seed, hr_size=d.hr_size, n_buildings=d.n_buildings,
                     n_roads=d.n_roads, n_water=d.n_water,
                     building_size_range=d.building_size_range,
                     road_width_range=d.road_width_range,
                     color_jitter=d.color_jitter, pixel_noise=d.pixel_noise,
                     vegetation_texture_scale=d.vegetation_texture_scale,
                     soil_fraction=d.soil_fraction)


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _maybe_sync_train_seed(train_cfg, cfg: RunConfig):
    return replace(train_cfg, seed=cfg.seed, deterministic=cfg.deterministic)


def cmd_synth_data(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    data_dir = out / "dataset"
    workers = cfg.workers or os.cpu_count() or 1
    manifest = build_dataset(cfg.data.n_scenes, _scene_template(cfg), data_dir,
                             cfg.data.fractions, seed=cfg.seed,
                             degradation=cfg.degradation, workers=workers)
    log.info("dataset with %d scenes at %s", len(manifest.records), data_dir)
    print(data_dir / "manifest.json")
    return EXIT_OK


def cmd_train_sr(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    manifest = load_manifest(args.manifest)
    if args.phase == "psnr":
        train_cfg = _maybe_sync_train_seed(cfg.train.sr_psnr, cfg)
        ckpt, _ = train_psnr_phase(manifest, cfg.sr.generator, train_cfg,
                                   log_path=out / "logs" / "sr_psnr.jsonl")
    else:
        if args.init is None:
            raise ConfigError("gan phase needs --init with a psnr checkpoint")
        init = Checkpoint.load(args.init)
        train_cfg = _maybe_sync_train_seed(cfg.train.sr_gan, cfg)
        ckpt, _ = train_gan_phase(init, manifest, train_cfg, cfg.sr.discriminator,
                                  log_path=out / "logs" / "sr_gan.jsonl")
    path = out / f"sr_{args.phase}.ckpt"
    ckpt.save(path)
    mean_psnr, mean_ssim = validate_sr(ckpt, manifest, "val")
    (out / f"sr_{args.phase}_val.json").write_text(json.dumps(
        {"psnr": mean_psnr, "ssim": mean_ssim}, indent=2, sort_keys=True))
    log.info("phase %s done: val PSNR %.3f SSIM %.4f", args.phase, mean_psnr,
             mean_ssim)
    print(path)
    return EXIT_OK


def cmd_train_seg(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    manifest = load_manifest(args.manifest)
    train_cfg = _maybe_sync_train_seed(cfg.train.seg, cfg)
    if args.sr_checkpoint is not None:
        manifest = attach_sr_rasters(manifest, Checkpoint.load(args.sr_checkpoint))
    if args.ablation:
        rows = run_modality_ablation(manifest, cfg.seg, train_cfg,
                                     seeds=(cfg.seed,), split="test",
                                     log_dir=out / "logs")
        _write_csv(out / "ablation.csv", rows)
        print(out / "ablation.csv")
        return EXIT_OK
    ckpt, _ = train_seg(manifest, cfg.seg, train_cfg,
                        log_path=out / "logs" / "seg.jsonl")
    path = out / "seg.ckpt"
    ckpt.save(path)
    rep = evaluate_seg(load_seg_model(ckpt), manifest, "test", train_cfg)
    _write_csv(out / "seg_test_report.csv", rep.to_rows())
    print(path)
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    sr_ckpt = Checkpoint.load(args.sr_checkpoint)
    seg_ckpt = Checkpoint.load(args.seg_checkpoint)
    cube = read_geotiff(args.input)
    infer_cfg = replace(cfg.infer, deterministic=cfg.deterministic)
    out_path = args.output if args.output.is_absolute() else out / args.output
    run_isa_pipeline(cube, sr_ckpt, seg_ckpt, infer_cfg, out_path)
    print(out_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    pred = read_geotiff(args.pred)
    ref = read_geotiff(args.ref)
    nd = None
    for r in (pred, ref):
        m = r.nodata_mask()
        if m is not None:
            nd = m if nd is None else (nd | m)
    pred_data = pred.data
    if pred.nodata is not None:
        import numpy as np
        pred_data = np.where(pred_data == pred.nodata, 0, pred_data)
    ref_data = ref.data
    if ref.nodata is not None:
        import numpy as np
        ref_data = np.where(ref_data == ref.nodata, 0, ref_data)
    rep = report(confusion(pred_data, ref_data, nd))
    _write_csv(out / "eval.csv", rep.to_rows())
    (out / "eval.json").write_text(json.dumps(rep.to_dict(), indent=2,
                                              sort_keys=True))
    print(out / "eval.csv")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    if len(args.names) != len(args.products):
        raise ConfigError("--names must match --products one to one")
    reference = read_geotiff(args.reference)
    products = [read_geotiff(p) for p in args.products]
    reports = ana.compare_products(products, reference, args.names)
    rows = []
    for name, rep in reports.items():
        for row in rep.to_rows():
            rows.append({"Product": name, **row})
    _write_csv(out / "compare.csv", rows)
    (out / "compare.json").write_text(json.dumps(
        {name: rep.to_dict() for name, rep in reports.items()},
        indent=2, sort_keys=True))
    if args.plot:
        _plot_compare(reports, out / "compare.png")
    print(out / "compare.csv")
    return EXIT_OK


def cmd_change(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(cfg)
    if args.areas is None:
        areas = ana.reference_biennial_areas()
    else:
        payload = json.loads(Path(args.areas).read_text())
        raw = payload.get("areas", payload)
        areas = {region: {int(e): float(v) for e, v in series.items()}
                 for region, series in raw.items()}
    table = ana.biennial_table(areas)
    rows = ana.biennial_table_rows(table)
    _write_csv(out / "change.csv", rows)
    (out / "change.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    if args.plot:
        _plot_change(table, out / "change.png")
    print(out / "change.csv")
    return EXIT_OK


def _plot_compare(reports, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    names = list(reports)
    f1 = [reports[n].isa.f1 or 0.0 for n in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, f1, color="#3468a0")
    ax.set_ylabel("ISA F1-score")
    ax.set_ylim(0, 1)
    ax.set_title("Product comparison")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_change(table, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 4))
    for region in table["regions"]:
        xs, ys = [], []
        for row in table["rows"]:
            cell = row["cells"][region]
            if not cell["missing"]:
                xs.append(row["epoch"])
                ys.append(cell["area_km2"])
        ax.plot(xs, ys, marker="o", label=region)
    ax.set_xlabel("epoch")
    ax.set_ylabel("ISA area (km$^2$)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srseg",
        description="x10 super-resolution + segmentation ISA mapping toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train-sr", help="train the super-resolution network")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--phase", choices=("psnr", "gan"), default="psnr")
    p.add_argument("--init", type=Path, default=None,
                   help="psnr checkpoint initializing the gan phase")
    p.set_defaults(fn=cmd_train_sr)

    p = sub.add_parser("train-seg", help="train the segmentation network")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--sr-checkpoint", type=Path, default=None,
                   help="attach SR rasters from this checkpoint first")
    p.add_argument("--ablation", action="store_true",
                   help="train all three input modalities and emit a CSV")
    p.set_defaults(fn=cmd_train_seg)

    p = sub.add_parser("infer", help="run the joint pipeline on a scene")
    _add_common(p)
    p.add_argument("--input", type=Path, required=True, help="12-band GeoTIFF")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--sr-checkpoint", type=Path, required=True)
    p.add_argument("--seg-checkpoint", type=Path, required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score a mask against a reference")
    _add_common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="compare products against a reference")
    _add_common(p)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--products", type=Path, nargs="+", required=True)
    p.add_argument("--names", nargs="+", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("change", help="biennial area/change-rate table")
    _add_common(p)
    p.add_argument("--areas", type=Path, default=None,
                   help="areas JSON (default: bundled reference series)")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_change)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (PipelineError, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
