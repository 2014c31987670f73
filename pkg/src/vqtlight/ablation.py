"""Desk-scale sweep over the five estimator/codebook variants."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

from . import plotting
from .dataset import DatasetManifest, load_entry_pairs, load_hdr, write_synthetic_set
from .evalkit import aggregate, evaluate_pair
from .inference import EstimatorBundle, estimate_lighting, time_inference
from .training import TrainConfig, compute_labels, fit_vqvae, manifest_sp_maps, train_vit
from .vit import count_parameters

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Option:
    number: int
    num_embeddings: int
    backbone: str = "vit"
    class_tokens: bool = False

    @property
    def label(self) -> str:
        net = "CNNs instead of ViT" if self.backbone == "cnn" else \
            ("ViT w/ extra class tokens" if self.class_tokens else "ViT w/o extra class tokens")
        return f"K={self.num_embeddings} +{net}"


OPTIONS = {
    1: Option(1, 64),
    2: Option(2, 128),
    3: Option(3, 256),
    4: Option(4, 128, backbone="cnn"),
    5: Option(5, 128, class_tokens=True),
}


def run_ablation(out_dir, options=None, manifest: DatasetManifest | None = None, n_panoramas: int = 4,
                 n_test: int = 1, seed: int = 0, vqvae_epochs: int = 1, vit_epochs: int = 1,
                 views_per_panorama: int = 1, timing_runs: int = 10, render_size: int = 32,
                 resolution_sweep: tuple = ()) -> list[dict]:
    """Train and score every requested option; writes ``ablation.csv`` and a bar chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    options = sorted(options or OPTIONS)
    if manifest is None:
        manifest = write_synthetic_set(out_dir / "data", n_panoramas, seed, n_test=n_test)
    train_maps = manifest_sp_maps(manifest, "train")
    test_entries = manifest.select("test") or manifest.select("train")[:1]

    vqvaes = {}
    for k in sorted({OPTIONS[o].num_embeddings for o in options}):
        cfg = TrainConfig.for_stage("vqvae", epochs=vqvae_epochs, num_embeddings=k, seed=seed,
                                    batch_size=min(16, len(train_maps)))
        net, _ = fit_vqvae(train_maps, cfg, out_dir / f"vqvae_K{k}")
        vqvaes[k] = (net, compute_labels(manifest, net))

    rows = []
    for number in options:
        opt = OPTIONS[number]
        net, labels = vqvaes[opt.num_embeddings]
        cfg = TrainConfig.for_stage("vit", epochs=vit_epochs, num_embeddings=opt.num_embeddings,
                                    backbone=opt.backbone, class_tokens=opt.class_tokens, seed=seed,
                                    batch_size=4)
        model, report = train_vit(manifest, labels, cfg, out_dir / f"option{number}",
                                  views_per_panorama=views_per_panorama)
        bundle = EstimatorBundle.from_models(model, net)
        records = []
        for e in test_entries:
            gt = load_hdr(manifest.resolve(e))
            for pair in load_entry_pairs(manifest, e, e.views[:views_per_panorama]):
                records.append(evaluate_pair(estimate_lighting(pair.crop, bundle), gt, size=render_size))
        timing = time_inference(bundle, n_warm=1, n_runs=timing_runs)
        agg = aggregate(records)
        rows.append({
            "option": number,
            "description": opt.label,
            "K": opt.num_embeddings,
            "backbone": opt.backbone,
            "class_tokens": opt.class_tokens,
            "sequence_length": model.cfg.sequence_length,
            "parameters": count_parameters(model),
            "token_accuracy": report.token_accuracy,
            "rmse": agg["rmse"],
            "ssim": agg["ssim"],
            "angular_error_deg": agg["angular_error_deg"],
            "fps": timing["fps"],
        })
        log.info("option %d done: %s", number, rows[-1])

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plotting.ablation_bars(rows, out_dir / "ablation.png")

    if resolution_sweep:
        reports = {}
        for res in resolution_sweep:
            cfg = TrainConfig.for_stage("vqvae", epochs=vqvae_epochs, feature_res=res, seed=seed,
                                        batch_size=min(16, len(train_maps)))
            reports[res] = fit_vqvae(train_maps, cfg)[1]
        plotting.resolution_curves(reports, out_dir / "feature_resolution.png")
        with open(out_dir / "feature_resolution.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature_res", "epoch", "reconstruction"])
            for res, rep in sorted(reports.items()):
                writer.writerows([res, r["epoch"], r["reconstruction"]] for r in rep.rows)
    return rows


def format_table(rows: list[dict]) -> str:
    cols = ("option", "description", "sequence_length", "parameters", "rmse", "ssim", "angular_error_deg", "fps")
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines)
