"""``vqtl`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__, plotting
from .ablation import OPTIONS, format_table, run_ablation
from .dataset import (DatasetManifest, build_manifest, load_entry_pairs, load_hdr, save_hdr,
                      scan_directory, write_synthetic_set)
from .evalkit import aggregate, evaluate_pair
from .inference import EstimatorBundle, estimate_lighting, time_inference
from .training import DETERMINISTIC_ENV, TrainConfig, compute_labels, seed_everything, train_vit, train_vqvae
from .vit import build_estimator
from .vqvae import VQVAENet, load_vqvae

log = logging.getLogger("vqtl")

SUBCOMMANDS = ("prepare", "train-vqvae", "train-vit", "infer", "evaluate", "time", "ablate")


@dataclass
class RunConfig:
    """Everything needed to repeat a run; serialised as ``run.json``."""
    subcommand: str
    out: str
    seed: int = 0
    paths: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    num_embeddings: int = 128
    feature_res: int = 32
    backbone: str = "vit"
    class_tokens: bool = False
    train_config: dict | None = None
    fingerprints: dict = field(default_factory=dict)
    deterministic: bool = False

    def write(self, extra: dict | None = None) -> Path:
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        record = asdict(self)
        record["environment"] = {
            "vqtlight": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "argv": sys.argv,
            "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if extra:
            record.update(extra)
        path = out / "run.json"
        path.write_text(json.dumps(record, indent=2, default=str))
        return path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _positive(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _add_common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--out", default=out_default, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true",
                   help=f"force deterministic kernels (same as {DETERMINISTIC_ENV}=1)")


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--epochs", type=_positive)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--warmup-steps", type=int, help="linear lr ramp over the first N optimizer steps")
    p.add_argument("--clip-grad-norm", type=float, help="cap on the global gradient norm")
    p.add_argument("--num-embeddings", type=int, choices=(64, 128, 256))
    p.add_argument("--feature-res", type=int, choices=(16, 32, 64))


def _add_bundle(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vit", required=True, help="estimator checkpoint")
    p.add_argument("--vqvae", required=True, help="VQVAE checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqtl", description="Lighting estimation with a vector-quantized sphere codebook.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("prepare", help="build a dataset manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=_positive, metavar="N", help="generate N synthetic panoramas")
    src.add_argument("--hdr-dir", help="directory of HDR equirectangular panoramas")
    p.add_argument("--n-test", type=int, help="panoramas held out for testing")
    p.add_argument("--height", type=int, default=128, help="synthetic panorama height (and SP side)")
    _add_common(p, "runs/data")

    p = sub.add_parser("train-vqvae", help="stage 1: fit the VQVAE on the training panoramas")
    p.add_argument("--manifest", required=True)
    _add_train_overrides(p)
    _add_common(p, "runs/vqvae")

    p = sub.add_parser("train-vit", help="stage 2: fit the estimator on codebook labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vqvae", required=True, help="frozen stage 1 checkpoint")
    p.add_argument("--backbone", choices=("vit", "cnn"))
    p.add_argument("--class-tokens", choices=("off", "on"))
    p.add_argument("--views-per-panorama", type=int, choices=range(1, 11), metavar="1..10")
    _add_train_overrides(p)
    _add_common(p, "runs/vit")

    p = sub.add_parser("infer", help="predict an HDR panorama from one LDR crop")
    _add_bundle(p)
    p.add_argument("--input", required=True, help="256x256 LDR crop (.png/.jpg or .npy in [0,1])")
    p.add_argument("--height", type=int, help="output panorama height (default: SP side)")
    _add_common(p, "runs/infer")

    p = sub.add_parser("evaluate", help="render-based metrics on a manifest split")
    _add_bundle(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--views", type=int, default=10, choices=range(1, 11), metavar="1..10",
                   help="crops per panorama")
    p.add_argument("--render-size", type=int, default=64)
    p.add_argument("--limit", type=_positive, help="evaluate only the first N panoramas")
    _add_common(p, "runs/evaluate")

    p = sub.add_parser("time", help="single-image inference latency")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--vit", help="estimator checkpoint (requires --vqvae)")
    src.add_argument("--random-init", action="store_true", help="time untrained default models")
    p.add_argument("--vqvae")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--threads", type=int, help="torch intra-op threads")
    _add_common(p, "runs/time")

    p = sub.add_parser("ablate", help="train and score the five codebook/estimator variants")
    p.add_argument("--option", type=int, action="append", choices=sorted(OPTIONS),
                   help="option to run (repeatable; default all)")
    p.add_argument("--manifest", help="existing manifest (default: synthetic)")
    p.add_argument("--panoramas", type=int, default=4, help="synthetic panoramas when no manifest is given")
    p.add_argument("--vqvae-epochs", type=_positive, default=1)
    p.add_argument("--vit-epochs", type=_positive, default=1)
    p.add_argument("--views-per-panorama", type=int, default=1, choices=range(1, 11), metavar="1..10")
    p.add_argument("--timing-runs", type=int, default=10)
    p.add_argument("--render-size", type=int, default=32)
    p.add_argument("--resolution-sweep", action="store_true",
                   help="also train VQVAEs at 16, 32 and 64 latent resolution")
    _add_common(p, "runs/ablate")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _train_config(args, stage: str) -> TrainConfig:
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "gamma": args.gamma,
        "warmup_steps": args.warmup_steps, "clip_grad_norm": args.clip_grad_norm,
        "num_embeddings": args.num_embeddings, "feature_res": args.feature_res, "seed": args.seed,
    }
    if stage == "vit":
        overrides["backbone"] = args.backbone
        overrides["class_tokens"] = None if args.class_tokens is None else args.class_tokens == "on"
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        return TrainConfig.from_file(args.config, stage=stage, **overrides)
    return TrainConfig.for_stage(stage, **overrides)


def _run_config(args, cfg: TrainConfig | None = None, **kw) -> RunConfig:
    rc = RunConfig(args.command, str(args.out), args.seed, deterministic=args.deterministic, **kw)
    if cfg is not None:
        rc.train_config = cfg.to_dict()
        rc.num_embeddings, rc.feature_res = cfg.num_embeddings, cfg.feature_res
        rc.backbone, rc.class_tokens = cfg.backbone, cfg.class_tokens
    return rc


def cmd_prepare(args) -> int:
    out = Path(args.out)
    if args.synthetic:
        manifest = write_synthetic_set(out, args.synthetic, args.seed, args.n_test, args.height)
    else:
        paths = scan_directory(args.hdr_dir)
        if not paths:
            raise FileNotFoundError(f"no HDR panoramas in {args.hdr_dir}")
        manifest = build_manifest([p.resolve() for p in paths], args.seed, args.n_test,
                                  sp_side=load_hdr(paths[0]).shape[0])
        out.mkdir(parents=True, exist_ok=True)
        manifest.save(out / "manifest.json")
    n_pairs = sum(len(e.views) for e in manifest.entries)
    counts = {s: len(manifest.select(s)) for s in ("train", "test")}
    _run_config(args, paths={"manifest": str(out / "manifest.json")}).write(
        {"panoramas": len(manifest.entries), "pairs": n_pairs, "splits": counts})
    print(f"{len(manifest.entries)} panoramas ({counts['train']} train, {counts['test']} test), "
          f"{n_pairs} pairs -> {out / 'manifest.json'}")
    return 0


def cmd_train_vqvae(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    cfg = _train_config(args, "vqvae")
    if cfg.side != manifest.sp_side:
        cfg = TrainConfig(**{**cfg.to_dict(), "side": manifest.sp_side})
    out = Path(args.out)
    rc = _run_config(args, cfg, paths={"manifest": str(Path(args.manifest).resolve())})
    rc.write()
    net, report = train_vqvae(manifest, cfg, out)
    rc.fingerprints = {"vqvae": net.fingerprint}
    rc.paths["checkpoint"] = report.checkpoint
    rc.write()
    plotting.training_curves(report, out / "training.png")
    plotting.codebook_usage(report.codebook_usage, out / "codebook_usage.png")
    used = sum(c > 0 for c in report.codebook_usage)
    print(f"final reconstruction {report.rows[-1]['reconstruction']:.5f}, "
          f"{used}/{cfg.num_embeddings} codes used -> {report.checkpoint}")
    return 0


def cmd_train_vit(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    vqvae = load_vqvae(args.vqvae)
    cfg = _train_config(args, "vit")
    if cfg.num_embeddings != vqvae.cfg.num_embeddings or cfg.feature_res != vqvae.cfg.latent:
        if args.num_embeddings is not None or args.feature_res is not None:
            raise ValueError(f"requested K={cfg.num_embeddings}/{cfg.feature_res}x{cfg.feature_res} but the VQVAE has "
                             f"K={vqvae.cfg.num_embeddings}/{vqvae.cfg.latent}x{vqvae.cfg.latent}")
        cfg = TrainConfig(**{**cfg.to_dict(), "num_embeddings": vqvae.cfg.num_embeddings,
                             "feature_res": vqvae.cfg.latent})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc = _run_config(args, cfg, paths={"manifest": str(Path(args.manifest).resolve()),
                                       "vqvae": str(Path(args.vqvae).resolve())})
    rc.fingerprints = {"vqvae": vqvae.fingerprint}
    rc.write()
    labels = compute_labels(manifest, vqvae, cache=out / "labels.npz")
    model, report = train_vit(manifest, labels, cfg, out, args.views_per_panorama)
    rc.fingerprints["vit"] = model.cfg.fingerprint()
    rc.paths["checkpoint"] = report.checkpoint
    rc.write({"token_accuracy": report.token_accuracy, "accuracy_split": report.accuracy_split})
    plotting.training_curves(report, out / "training.png")
    print(f"token accuracy {report.token_accuracy:.4f} ({report.accuracy_split}) -> {report.checkpoint}")
    return 0


def read_crop(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.float32)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def cmd_infer(args) -> int:
    bundle = EstimatorBundle.load(args.vit, args.vqvae)
    crop = read_crop(args.input)
    if crop.shape != (256, 256, 3):
        raise ValueError(f"crop must be 256x256x3, got {crop.shape}")
    if not np.all(np.isfinite(crop)) or crop.min() < 0 or crop.max() > 1:
        raise ValueError("crop values must be finite and lie in [0, 1]")
    out = Path(args.out)
    rc = _run_config(args, paths={"vit": str(Path(args.vit).resolve()), "vqvae": str(Path(args.vqvae).resolve()),
                                  "input": str(Path(args.input).resolve())},
                     fingerprints=bundle.fingerprints)
    rc.num_embeddings, rc.feature_res = bundle.vqvae.cfg.num_embeddings, bundle.vqvae.cfg.latent
    rc.backbone, rc.class_tokens = bundle.vit.cfg.backbone, bundle.vit.cfg.class_tokens
    pano = estimate_lighting(crop, bundle, args.height)
    rc.write()
    save_hdr(pano, out / "panorama.hdr")
    plotting.panorama_comparison(pano, None, out / "panorama.png", crop=crop)
    print(f"{pano.shape[0]}x{pano.shape[1]} panorama -> {out / 'panorama.hdr'}")
    return 0


def cmd_evaluate(args) -> int:
    bundle = EstimatorBundle.load(args.vit, args.vqvae)
    manifest = DatasetManifest.load(args.manifest)
    entries = manifest.select(args.split)[:args.limit]
    if not entries:
        raise ValueError(f"manifest has no {args.split} panoramas")
    out = Path(args.out)
    rc = _run_config(args, paths={"vit": str(Path(args.vit).resolve()), "vqvae": str(Path(args.vqvae).resolve()),
                                  "manifest": str(Path(args.manifest).resolve())},
                     fingerprints=bundle.fingerprints)
    rc.write()
    rows, records = [], []
    for e in entries:
        gt = load_hdr(manifest.resolve(e))
        for v, pair in enumerate(load_entry_pairs(manifest, e, e.views[:args.views])):
            pred = estimate_lighting(pair.crop, bundle, gt.shape[0])
            rec, p_img, g_img = evaluate_pair(pred, gt, args.render_size, return_images=True)
            records.append(rec)
            rows.append(rec.as_row({"panorama": e.path, "view": v}))
            if len(rows) == 1:
                plotting.render_comparison(p_img, g_img, out / "renders.png", title=f"{e.path} view 0")
                plotting.panorama_comparison(pred, gt, out / "panorama.png", crop=pair.crop.pixels)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    summary = aggregate(records)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean"])
        writer.writerows(summary.items())
    plotting.metric_summary(rows, out / "metrics.png")
    rc.write({"summary": summary, "pairs": len(rows)})
    print(f"{len(rows)} pairs: RMSE {summary['rmse']:.4f}  SSIM {summary['ssim']:.4f}  "
          f"angular {summary['angular_error_deg']:.3f} deg")
    return 0


def cmd_time(args) -> int:
    if args.threads:
        torch.set_num_threads(args.threads)
    if args.random_init:
        seed_everything(args.seed)
        vit_cfg = TrainConfig.for_stage("vit").vit_config()
        bundle = EstimatorBundle.from_models(build_estimator(vit_cfg), VQVAENet(TrainConfig().vqvae_config()))
        paths = {}
    else:
        if not args.vqvae:
            raise ValueError("--vit requires --vqvae")
        bundle = EstimatorBundle.load(args.vit, args.vqvae)
        paths = {"vit": str(Path(args.vit).resolve()), "vqvae": str(Path(args.vqvae).resolve())}
    out = Path(args.out)
    rc = _run_config(args, paths=paths, fingerprints=bundle.fingerprints)
    stats = time_inference(bundle, args.warmup, args.runs, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "seconds"])
        writer.writerows(enumerate(stats["samples"]))
    summary = {k: v for k, v in stats.items() if k != "samples"}
    summary["p95_over_p50"] = stats["p95"] / stats["p50"]
    summary["threads"] = torch.get_num_threads()
    rc.write({"timing": summary})
    plotting.latency_histogram(stats["samples"], out / "latency.png", stats["reference_latency_s"])
    print(f"mean {stats['mean'] * 1e3:.1f} ms  p50 {stats['p50'] * 1e3:.1f} ms  p95 {stats['p95'] * 1e3:.1f} ms  "
          f"({stats['fps']:.1f} FPS; reference {stats['reference_latency_s'] * 1e3:.0f} ms on a TITAN XP)")
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    manifest = DatasetManifest.load(args.manifest) if args.manifest else None
    options = args.option or sorted(OPTIONS)
    rc = _run_config(args, paths={"manifest": args.manifest} if args.manifest else {},
                     overrides={"options": options, "vqvae_epochs": args.vqvae_epochs, "vit_epochs": args.vit_epochs,
                                "panoramas": args.panoramas, "views_per_panorama": args.views_per_panorama})
    if len(options) == 1:
        opt = OPTIONS[options[0]]
        rc.num_embeddings, rc.backbone, rc.class_tokens = opt.num_embeddings, opt.backbone, opt.class_tokens
    rc.write()
    rows = run_ablation(out, options, manifest, n_panoramas=args.panoramas, seed=args.seed,
                        vqvae_epochs=args.vqvae_epochs, vit_epochs=args.vit_epochs,
                        views_per_panorama=args.views_per_panorama, timing_runs=args.timing_runs,
                        render_size=args.render_size,
                        resolution_sweep=(16, 32, 64) if args.resolution_sweep else ())
    rc.write({"results": rows})
    print(format_table(rows))
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train-vqvae": cmd_train_vqvae,
    "train-vit": cmd_train_vit,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "time": cmd_time,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.deterministic:
        os.environ[DETERMINISTIC_ENV] = "1"
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # surfaced as a one-line diagnostic
        log.debug("failure", exc_info=True)
        print(f"vqtl {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
