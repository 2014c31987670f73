"""Two-stage optimisation: VQVAE-Net on SP maps, then ViT-Net on codebook labels."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import random
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import DatasetManifest, load_entry_pairs, load_hdr
from .projection import build_mapping, ep_to_sp
from .vit import ViTConfig, build_estimator, count_parameters, patchify, predict_indices, save_estimator, vit_loss
from .vqvae import FingerprintMismatch, VQVAEConfig, VQVAENet, load_vqvae, map_to_indices, save_vqvae, to_log_tensor

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "VQTL_DETERMINISTIC"

STAGE_DEFAULTS = {
    "vqvae": {"epochs": 20, "batch_size": 16, "lr": 5e-4, "schedule": "exponential", "gamma": 0.92,
              "milestones": []},
    "vit": {"epochs": 25, "batch_size": 16, "lr": 1e-3, "schedule": "multistep", "gamma": 0.1,
            "milestones": [15, 20]},
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "vqvae"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "exponential"
    gamma: float = 0.92
    milestones: list = field(default_factory=list)
    seed: int = 0
    # model variant
    num_embeddings: int = 128
    feature_res: int = 32
    backbone: str = "vit"
    class_tokens: bool = False
    embedding_dim: int = 256
    hidden: int = 128
    side: int = 128
    beta: float = 0.25
    codebook_init: str = "data"
    # linear ramp over the first optimizer steps and global gradient-norm cap (off by default)
    warmup_steps: int = 0
    clip_grad_norm: float | None = None
    # optional early exit once a training target is met
    stop_reconstruction: float | None = None
    stop_accuracy: float | None = None

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.schedule not in ("exponential", "multistep"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.codebook_init not in ("data", "uniform"):
            raise ValueError(f"unknown codebook_init {self.codebook_init!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.warmup_steps < 0 or (self.clip_grad_norm is not None and self.clip_grad_norm <= 0):
            raise ValueError("warmup_steps must be >= 0 and clip_grad_norm positive")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        return cls(stage=stage, **{**STAGE_DEFAULTS[stage], **overrides})

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        stage = overrides.get("stage", data.get("stage", "vqvae"))
        merged = {**STAGE_DEFAULTS[stage], **data, **{k: v for k, v in overrides.items() if v is not None}}
        merged["stage"] = stage
        return cls(**merged)

    def to_dict(self) -> dict:
        return asdict(self)

    def vqvae_config(self) -> VQVAEConfig:
        return VQVAEConfig(side=self.side, latent=self.feature_res, num_embeddings=self.num_embeddings,
                           embedding_dim=self.embedding_dim, hidden=self.hidden, beta=self.beta)

    def vit_config(self) -> ViTConfig:
        return ViTConfig(grid=self.feature_res, num_classes=self.num_embeddings, backbone=self.backbone,
                         class_tokens=self.class_tokens)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used during ``epoch`` (0-based)."""
    if cfg.schedule == "exponential":
        return cfg.lr * cfg.gamma ** epoch
    return cfg.lr * cfg.gamma ** sum(epoch >= m for m in cfg.milestones)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0"):
        torch.use_deterministic_algorithms(True)


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainReport:
    stage: str
    config: dict
    rows: list = field(default_factory=list)
    checkpoint: str | None = None
    best_checkpoint: str | None = None
    codebook_usage: list | None = None
    token_accuracy: float | None = None
    accuracy_split: str | None = None
    parameters: int = 0
    initial_loss: float | None = None

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    @property
    def lr_trace(self) -> list[float]:
        return [r["lr"] for r in self.rows]

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.rows:
            with open(out_dir / "train_log.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
                writer.writeheader()
                writer.writerows(self.rows)
        summary = {k: v for k, v in asdict(self).items() if k != "rows"}
        (out_dir / "report.json").write_text(json.dumps(summary, indent=2))


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor, cfg: TrainConfig, lr: float, step: int) -> float:
    """One update; returns the learning rate actually applied."""
    if cfg.warmup_steps:
        lr = lr * min(1.0, (step + 1) / cfg.warmup_steps)
    for g in opt.param_groups:
        g["lr"] = lr
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.clip_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], cfg.clip_grad_norm)
    opt.step()
    return lr


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


@torch.no_grad()
def init_codebook_from_data(net: VQVAENet, x_log: torch.Tensor, seed: int) -> None:
    """Seed the codebook with encoder outputs drawn from the training set."""
    z = net.encode_log(x_log).reshape(-1, net.cfg.embedding_dim)
    gen = torch.Generator().manual_seed(seed)
    k = net.cfg.num_embeddings
    pick = torch.randperm(len(z), generator=gen)[:k]
    if len(pick) < k:
        pick = torch.cat([pick, torch.randint(len(z), (k - len(pick),), generator=gen)])
    net.codebook.weight.copy_(z[pick])


def fit_vqvae(sp_maps: np.ndarray, cfg: TrainConfig, out_dir=None, val_maps: np.ndarray | None = None,
              net: VQVAENet | None = None) -> tuple[VQVAENet, TrainReport]:
    """Train on linear-radiance SP maps of shape (B, S, S, 3)."""
    if cfg.stage != "vqvae":
        raise ValueError("fit_vqvae needs a stage='vqvae' config")
    if len(sp_maps) == 0:
        raise ValueError("empty training set")
    seed_everything(cfg.seed)
    x = to_log_tensor(sp_maps)
    x_val = to_log_tensor(val_maps) if val_maps is not None and len(val_maps) else None
    if net is None:
        net = VQVAENet(cfg.vqvae_config())
        if cfg.codebook_init == "data":
            init_codebook_from_data(net, x[: cfg.batch_size * 4], cfg.seed)
    opt = _adam(net.parameters(), cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    report = TrainReport("vqvae", cfg.to_dict(), parameters=count_parameters(net))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best, step = float("inf"), 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        net.train()
        t0 = time.perf_counter()
        sums = {"loss": 0.0, "reconstruction": 0.0, "embedding": 0.0, "commitment": 0.0}
        for idx in _batches(len(x), cfg.batch_size, gen):
            total, terms, _ = net.loss(x[idx])
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite VQVAE loss at epoch {epoch}")
            lr = _step(opt, total, cfg, lr_at(cfg, epoch), step)
            step += 1
            w = len(idx) / len(x)
            sums["loss"] += total.item() * w
            for k, v in terms.items():
                sums[k] += v.item() * w
        row = {"epoch": epoch, "lr": lr, **sums, "seconds": time.perf_counter() - t0}
        if x_val is not None:
            net.eval()
            with torch.no_grad():
                row["val_loss"] = net.loss(x_val)[0].item()
        report.rows.append(row)
        log.info("vqvae epoch %d lr %.3g loss %.5f rec %.5f", epoch, lr, sums["loss"], sums["reconstruction"])
        if out_dir is not None:
            save_vqvae(out_dir / "last.pt", net, {"epoch": epoch})
            report.checkpoint = str(out_dir / "last.pt")
            score = row.get("val_loss", row["loss"])
            if score < best:
                best = score
                save_vqvae(out_dir / "best.pt", net, {"epoch": epoch})
                report.best_checkpoint = str(out_dir / "best.pt")
        if cfg.stop_reconstruction is not None and sums["reconstruction"] <= cfg.stop_reconstruction:
            break
    net.eval()
    with torch.no_grad():
        idx = map_to_indices(sp_maps, net)
    report.codebook_usage = np.bincount(idx.ravel(), minlength=net.cfg.num_embeddings).tolist()
    if out_dir is not None:
        report.write(out_dir)
    return net, report


def manifest_sp_maps(manifest: DatasetManifest, split: str | None = "train") -> np.ndarray:
    m = build_mapping(manifest.sp_side)
    maps = [ep_to_sp(load_hdr(manifest.resolve(e)), m) for e in manifest.select(split)]
    return np.stack(maps) if maps else np.zeros((0, manifest.sp_side, manifest.sp_side, 3), np.float32)


def train_vqvae(manifest: DatasetManifest, cfg: TrainConfig, out_dir=None) -> tuple[VQVAENet, TrainReport]:
    """Stage 1 on the manifest's training panoramas (one SP map per panorama)."""
    if cfg.side != manifest.sp_side:
        raise ValueError(f"config side {cfg.side} does not match manifest SP side {manifest.sp_side}")
    train = manifest_sp_maps(manifest, "train")
    if len(train) == 0:
        raise ValueError("manifest has no training panoramas")
    val = manifest_sp_maps(manifest, "test")
    return fit_vqvae(train, cfg, out_dir, val_maps=val)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def compute_labels(manifest: DatasetManifest, vqvae: VQVAENet | str | Path, cache=None) -> dict[str, np.ndarray]:
    """Flattened codebook indices of every panorama, keyed by manifest path.

    All ten crops of a panorama share its label sequence.  With ``cache`` the
    labels are written to (or reused from) an ``.npz`` next to the manifest.
    """
    if not isinstance(vqvae, VQVAENet):
        vqvae = load_vqvae(vqvae)
    if vqvae.cfg.side != manifest.sp_side:
        raise FingerprintMismatch(f"VQVAE side {vqvae.cfg.side} does not match manifest SP side {manifest.sp_side}")
    fp = json.dumps(vqvae.fingerprint, sort_keys=True)
    checksum = state_checksum(vqvae)
    if cache is not None and Path(cache).exists():
        data = np.load(cache, allow_pickle=False)
        if str(data["fingerprint"]) == fp and str(data["checksum"]) == checksum:
            return {str(p): data["labels"][i] for i, p in enumerate(data["paths"])}
    vqvae.eval()
    m = build_mapping(manifest.sp_side)
    labels = {}
    for e in manifest.entries:
        sp = ep_to_sp(load_hdr(manifest.resolve(e)), m)
        labels[e.path] = map_to_indices(sp, vqvae)[0]
    if cache is not None:
        paths = list(labels)
        stacked = np.stack([labels[p] for p in paths]) if paths else np.zeros((0, vqvae.cfg.tokens), np.int64)
        hist = np.bincount(stacked.ravel(), minlength=vqvae.cfg.num_embeddings)
        np.savez(cache, paths=np.array(paths), labels=stacked, histogram=hist, fingerprint=fp, checksum=checksum)
    return labels


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


@torch.no_grad()
def token_accuracy(model: torch.nn.Module, patches: torch.Tensor, labels: torch.Tensor, batch_size: int = 8) -> float:
    model.eval()
    hits = 0
    for i in range(0, len(patches), batch_size):
        hits += (predict_indices(model(patches[i:i + batch_size])) == labels[i:i + batch_size]).sum().item()
    return hits / labels.numel()


@torch.no_grad()
def mean_loss(model: torch.nn.Module, patches: torch.Tensor, labels: torch.Tensor, batch_size: int = 8) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(patches), batch_size):
        total += vit_loss(model(patches[i:i + batch_size]), labels[i:i + batch_size]).item() * len(patches[i:i + batch_size])
    return total / len(patches)


def fit_vit(crops: np.ndarray, labels: np.ndarray, cfg: TrainConfig, out_dir=None,
            val: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[torch.nn.Module, TrainReport]:
    """Train the estimator on LDR crops (B, 256, 256, 3) and labels (B, N)."""
    if cfg.stage != "vit":
        raise ValueError("fit_vit needs a stage='vit' config")
    if len(crops) == 0:
        raise ValueError("empty training set")
    vcfg = cfg.vit_config()
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.shape[1] != vcfg.num_patches:
        raise ValueError(f"labels have {labels.shape[1]} tokens, model expects {vcfg.num_patches}")
    if labels.min() < 0 or labels.max() >= vcfg.num_classes:
        raise ValueError(f"labels exceed the head's {vcfg.num_classes} classes")
    seed_everything(cfg.seed)
    model = build_estimator(vcfg)
    x = patchify(torch.as_tensor(np.asarray(crops, dtype=np.float32)), vcfg.patch)
    model.input_norm.fit(x)
    if val is not None and len(val[0]):
        xv = patchify(torch.as_tensor(np.asarray(val[0], dtype=np.float32)), vcfg.patch)
        yv = torch.as_tensor(np.asarray(val[1]), dtype=torch.long)
        split = "test"
    else:
        xv, yv, split = x, labels, "train"
    opt = _adam(model.parameters(), cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    report = TrainReport("vit", cfg.to_dict(), parameters=count_parameters(model), accuracy_split=split)
    report.initial_loss = mean_loss(model, x, labels)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    best, step = float("inf"), 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        model.train()
        t0 = time.perf_counter()
        total = 0.0
        hits = 0
        for idx in _batches(len(x), cfg.batch_size, gen):
            logits = model(x[idx])
            loss = vit_loss(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite ViT loss at epoch {epoch}")
            lr = _step(opt, loss, cfg, lr_at(cfg, epoch), step)
            step += 1
            total += loss.item() * len(idx) / len(x)
            hits += (predict_indices(logits.detach()) == labels[idx]).sum().item()
        # accuracy of the logits seen during the epoch, i.e. before each batch's update
        row = {"epoch": epoch, "lr": lr, "loss": total, "train_accuracy": hits / labels.numel(),
               "seconds": time.perf_counter() - t0}
        if split == "test":
            row["val_loss"] = mean_loss(model, xv, yv)
        stop = cfg.stop_accuracy is not None and row["train_accuracy"] >= cfg.stop_accuracy
        report.rows.append(row)
        log.info("vit epoch %d lr %.3g loss %.5f acc %.4f", epoch, lr, total, row["train_accuracy"])
        if out_dir is not None:
            save_estimator(out_dir / "last.pt", model, {"epoch": epoch})
            report.checkpoint = str(out_dir / "last.pt")
            score = row.get("val_loss", row["loss"])
            if score < best:
                best = score
                save_estimator(out_dir / "best.pt", model, {"epoch": epoch})
                report.best_checkpoint = str(out_dir / "best.pt")
        if stop:
            break
    report.token_accuracy = token_accuracy(model, xv, yv)
    model.eval()
    if out_dir is not None:
        report.write(out_dir)
    return model, report


def manifest_crops(manifest: DatasetManifest, labels: dict, split: str | None = "train",
                   views_per_panorama: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    crops, ys = [], []
    for e in manifest.select(split):
        if e.path not in labels:
            raise KeyError(f"no labels for {e.path}")
        views = e.views if views_per_panorama is None else e.views[:views_per_panorama]
        for pair in load_entry_pairs(manifest, e, views):
            crops.append(pair.crop.pixels)
            ys.append(labels[e.path])
    if not crops:
        return np.zeros((0, 256, 256, 3), np.float32), np.zeros((0, 0), np.int64)
    return np.stack(crops), np.stack(ys)


def train_vit(manifest: DatasetManifest, labels: dict, cfg: TrainConfig, out_dir=None,
              views_per_panorama: int | None = None) -> tuple[torch.nn.Module, TrainReport]:
    """Stage 2 on every training crop of the manifest."""
    crops, ys = manifest_crops(manifest, labels, "train", views_per_panorama)
    if len(crops) == 0:
        raise ValueError("manifest has no training pairs")
    val = manifest_crops(manifest, labels, "test", views_per_panorama)
    return fit_vit(crops, ys, cfg, out_dir, val=val if len(val[0]) else None)


def derive_config(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
