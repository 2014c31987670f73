"""ViT-Net: class-token-free vision transformer emitting per-token codebook logits.

Token ``n`` classifies latent cell ``n`` of the VQVAE grid (row-major), so the
patch grid and the latent grid share one flattening order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .vqvae import FingerprintMismatch

CHECKPOINT_VERSION = 2


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 256
    grid: int = 32
    num_classes: int = 128
    dim: int = 256
    depth: int = 6
    heads: int = 8
    mlp_dim: int = 1024
    backbone: str = "vit"
    class_tokens: bool = False
    cnn_blocks: int = 4

    def __post_init__(self):
        if self.image_size % self.grid:
            raise ValueError("image_size must be a multiple of the token grid")
        if self.backbone not in ("vit", "cnn"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.class_tokens and self.backbone != "vit":
            raise ValueError("extra class tokens only apply to the transformer backbone")

    @property
    def patch(self) -> int:
        return self.image_size // self.grid

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def sequence_length(self) -> int:
        return self.num_patches * (2 if self.class_tokens else 1)

    def fingerprint(self) -> dict:
        return {"N": self.num_patches, "K": self.num_classes, "depth": self.depth, "heads": self.heads,
                "dim": self.dim, "backbone": self.backbone, "class_tokens": self.class_tokens}


def patchify(img, patch: int = 8):
    """(H, W, 3) or (B, H, W, 3) image -> (N, P*P*3) / (B, N, P*P*3) patches.

    Patch ``r * (W // P) + c`` holds pixels ``[rP, rP+P) x [cP, cP+P)``
    flattened row-major with channels last.
    """
    single = img.ndim == 3
    x = img[None] if single else img
    h, w = x.shape[1:3]
    if h % patch or w % patch or x.shape[-1] != 3:
        raise ValueError(f"image shape {tuple(x.shape[1:])} cannot be cut into {patch}x{patch}x3 patches")
    out = rearrange(x, "b (h p1) (w p2) c -> b (h w) (p1 p2 c)", p1=patch, p2=patch)
    return out[0] if single else out


def unpatchify(patches, grid: int, patch: int = 8):
    single = patches.ndim == 2
    x = patches[None] if single else patches
    out = rearrange(x, "b (h w) (p1 p2 c) -> b (h p1) (w p2) c", h=grid, w=grid, p1=patch, p2=patch)
    return out[0] if single else out


def check_crop(img: np.ndarray, size: int = 256) -> np.ndarray:
    img = np.asarray(img)
    if img.shape[-3:] != (size, size, 3):
        raise ValueError(f"crop must be {size}x{size}x3, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("crop values must be finite and lie in [0, 1]")
    return img


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = self.to_qkv(self.norm(x)).chunk(3, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.ff = FeedForward(dim, mlp_dim)

    def forward(self, x):
        x = x + self.attn(x)
        return x + self.ff(x)


class InputNorm(nn.Module):
    """Per-channel standardisation of channels-last patch vectors.

    The statistics are buffers, set once from the training crops and stored
    with the checkpoint, so inference applies exactly the training transform.
    """

    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.full((3,), 0.5))
        self.register_buffer("std", torch.full((3,), 0.25))

    @torch.no_grad()
    def fit(self, patches: torch.Tensor) -> None:
        px = patches.reshape(-1, 3).double()
        self.mean.copy_(px.mean(0))
        self.std.copy_(px.std(0).clamp_min(1e-3))

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        reps = patches.shape[-1] // 3
        return (patches - self.mean.repeat(reps)) / self.std.repeat(reps)


def _init_linear(m: nn.Module) -> None:
    # small logits at initialization, so the first loss sits near ln(K)
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class ViTNet(nn.Module):
    """Patch projection + learned positions + pre-norm encoder + per-token head."""

    def __init__(self, cfg: ViTConfig = ViTConfig()):
        super().__init__()
        if cfg.backbone != "vit":
            raise ValueError("ViTNet requires backbone='vit'")
        self.cfg = cfg
        n = cfg.num_patches
        self.input_norm = InputNorm()
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.sequence_length, cfg.dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.extra_tokens = None
        if cfg.class_tokens:
            self.extra_tokens = nn.Parameter(torch.zeros(1, n, cfg.dim))
            nn.init.trunc_normal_(self.extra_tokens, std=0.02)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_dim) for _ in range(cfg.depth))
        self.head = nn.Sequential(nn.LayerNorm(cfg.dim), nn.Linear(cfg.dim, cfg.num_classes))
        self.apply(_init_linear)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, N, D_p) patches -> (B, N, K) logits."""
        x = self.patch_embed(self.input_norm(patches))
        n = x.shape[1]
        if self.extra_tokens is not None:
            x = torch.cat([self.extra_tokens.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.head(x[:, :n])


class ConvBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class CNNNet(nn.Module):
    """Convolutional stand-in for the transformer with the same N x K output."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.input_norm = InputNorm()
        steps = int(np.log2(cfg.patch))
        chans = [max(cfg.dim >> (steps - 1 - i), 16) for i in range(steps)]
        layers: list[nn.Module] = []
        c_in = 3
        for c in chans:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.ReLU()]
            c_in = c
        layers += [ConvBlock(c_in) for _ in range(cfg.cnn_blocks)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, cfg.num_classes, 1)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        img = unpatchify(self.input_norm(patches), self.cfg.grid, self.cfg.patch)
        y = self.head(self.features(img.permute(0, 3, 1, 2)))
        return rearrange(y, "b k h w -> b (h w) k")


def build_estimator(cfg: ViTConfig) -> nn.Module:
    return CNNNet(cfg) if cfg.backbone == "cnn" else ViTNet(cfg)


def vit_forward(patches, model: nn.Module) -> torch.Tensor:
    """Logits for one (N, D_p) or a batch (B, N, D_p) of patch sequences."""
    x = torch.as_tensor(np.asarray(patches, dtype=np.float32)) if not torch.is_tensor(patches) else patches
    single = x.ndim == 2
    if single:
        x = x[None]
    cfg = model.cfg
    if tuple(x.shape[1:]) != (cfg.num_patches, cfg.patch_dim):
        raise ValueError(f"expected (N={cfg.num_patches}, D_p={cfg.patch_dim}) patches, got {tuple(x.shape[1:])}")
    if not torch.isfinite(x).all():
        raise ValueError("patches contain non-finite values")
    y = model(x)
    return y[0] if single else y


def vit_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-token cross entropy over all tokens (and batch items)."""
    k = logits.shape[-1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits.reshape(-1, k), labels.reshape(-1))


def predict_indices(logits) -> torch.Tensor:
    """Per-token argmax; ties resolve to the lowest index."""
    return torch.as_tensor(logits).argmax(dim=-1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_estimator(path, model: nn.Module, extra: dict | None = None) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "vit",
        "config": asdict(model.cfg),
        "fingerprint": model.cfg.fingerprint(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, Path(path))


def load_estimator(path, expect: dict | None = None) -> nn.Module:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "vit" or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise FingerprintMismatch(f"{path}: not a version-{CHECKPOINT_VERSION} estimator checkpoint")
    cfg = ViTConfig(**ckpt["config"])
    if cfg.fingerprint() != ckpt["fingerprint"]:
        raise FingerprintMismatch(f"{path}: stored fingerprint disagrees with its config")
    if expect is not None and any(ckpt["fingerprint"].get(k) != v for k, v in expect.items()):
        raise FingerprintMismatch(f"{path}: fingerprint {ckpt['fingerprint']} does not match {expect}")
    model = build_estimator(cfg)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
