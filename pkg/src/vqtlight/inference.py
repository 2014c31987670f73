"""Deployed path: crop -> logits -> indices -> codebook -> frozen decoder -> EP map."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import CropImage
from .projection import SphereMapping, build_mapping, sp_to_ep
from .vit import check_crop, load_estimator, patchify, predict_indices, vit_forward
from .vqvae import FingerprintMismatch, VQVAENet, load_vqvae, log_to_linear

# single-image latency on a TITAN XP (40 FPS), quoted for context only
REFERENCE_LATENCY_S = 0.025


@dataclass(frozen=True)
class EstimatorBundle:
    vit: torch.nn.Module
    vqvae: VQVAENet
    mapping: SphereMapping
    fingerprints: dict = field(default_factory=dict)

    def __post_init__(self):
        check_bundle(self.vit, self.vqvae)
        if self.mapping.side != self.vqvae.cfg.side:
            raise FingerprintMismatch("mapping side does not match the VQVAE input side")
        self.vit.eval()
        self.vqvae.eval()

    @classmethod
    def from_models(cls, vit: torch.nn.Module, vqvae: VQVAENet) -> "EstimatorBundle":
        return cls(vit, vqvae, build_mapping(vqvae.cfg.side),
                   {"vit": vit.cfg.fingerprint(), "vqvae": vqvae.fingerprint})

    @classmethod
    def load(cls, vit_path, vqvae_path) -> "EstimatorBundle":
        return cls.from_models(load_estimator(vit_path), load_vqvae(vqvae_path))


def check_bundle(vit: torch.nn.Module, vqvae: VQVAENet) -> None:
    if vit.cfg.num_classes != vqvae.cfg.num_embeddings:
        raise FingerprintMismatch(f"estimator head has K={vit.cfg.num_classes}, codebook has K={vqvae.cfg.num_embeddings}")
    if vit.cfg.num_patches != vqvae.cfg.tokens:
        raise FingerprintMismatch(f"estimator emits {vit.cfg.num_patches} tokens, latent grid has {vqvae.cfg.tokens} cells")


def lookup_embeddings(indices, codebook) -> torch.Tensor:
    """(h*w,) or (B, h*w) indices -> (h, w, D) / (B, h, w, D) latent grid, row-major."""
    cb = codebook.weight if isinstance(codebook, torch.nn.Embedding) else torch.as_tensor(codebook)
    idx = torch.as_tensor(indices, dtype=torch.long)
    single = idx.ndim == 1
    if single:
        idx = idx[None]
    side = int(round(idx.shape[1] ** 0.5))
    if side * side != idx.shape[1]:
        raise ValueError(f"index sequence of length {idx.shape[1]} is not a square grid")
    if idx.min() < 0 or idx.max() >= cb.shape[0]:
        raise ValueError(f"indices must lie in [0, {cb.shape[0]})")
    z = cb[idx].reshape(idx.shape[0], side, side, cb.shape[1])
    return z[0] if single else z


def _crop_array(crop) -> np.ndarray:
    return crop.pixels if isinstance(crop, CropImage) else np.asarray(crop)


@torch.no_grad()
def predict_crop_indices(crops, bundle: EstimatorBundle) -> torch.Tensor:
    imgs = np.stack([check_crop(_crop_array(c)) for c in crops]).astype(np.float32)
    patches = patchify(torch.from_numpy(imgs), bundle.vit.cfg.patch)
    return predict_indices(vit_forward(patches, bundle.vit))


@torch.no_grad()
def decode_indices(indices, bundle: EstimatorBundle, out_h: int | None = None) -> np.ndarray:
    """Indices (B, h*w) -> EP panoramas (B, out_h, 2*out_h, 3)."""
    idx = torch.as_tensor(indices, dtype=torch.long)
    if idx.ndim == 1:
        idx = idx[None]
    if idx.shape[1] != bundle.vqvae.cfg.tokens:
        raise ValueError(f"expected {bundle.vqvae.cfg.tokens} indices, got {idx.shape[1]}")
    z_q = lookup_embeddings(idx, bundle.vqvae.codebook)
    sp = log_to_linear(bundle.vqvae.decode_log(z_q))
    if not np.all(np.isfinite(sp)):
        bad = int((~np.isfinite(sp)).sum())
        raise FloatingPointError(f"decoder produced {bad} non-finite values")
    return np.stack([sp_to_ep(m, bundle.mapping, out_h) for m in sp])


def estimate_lighting(crop, bundle: EstimatorBundle, out_h: int | None = None) -> np.ndarray:
    """HDR equirectangular panorama predicted from one 256x256 LDR crop."""
    return estimate_lighting_batch([crop], bundle, out_h)[0]


def estimate_lighting_batch(crops, bundle: EstimatorBundle, out_h: int | None = None) -> np.ndarray:
    return decode_indices(predict_crop_indices(crops, bundle), bundle, out_h)


def time_inference(bundle: EstimatorBundle, n_warm: int = 3, n_runs: int = 100, crop=None, seed: int = 0) -> dict:
    """Wall-clock statistics of ``estimate_lighting`` (model load excluded)."""
    if n_runs < 10:
        raise ValueError("n_runs must be at least 10")
    if crop is None:
        crop = np.random.default_rng(seed).uniform(0, 1, (256, 256, 3)).astype(np.float32)
    for _ in range(n_warm):
        estimate_lighting(crop, bundle)
    samples = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        estimate_lighting(crop, bundle)
        samples.append(time.perf_counter() - t0)
    s = np.array(samples)
    return {
        "n_warm": n_warm,
        "n_runs": n_runs,
        "samples": samples,
        "mean": float(s.mean()),
        "p50": float(np.percentile(s, 50)),
        "p95": float(np.percentile(s, 95)),
        "fps": float(1.0 / s.mean()),
        "reference_latency_s": REFERENCE_LATENCY_S,
    }
