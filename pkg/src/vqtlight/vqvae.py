"""VQVAE-Net: convolutional encoder, codebook and decoder over square HDR maps.

The network works in ``log1p`` radiance.  ``encode`` takes linear radiance
and applies the log itself; ``decode`` returns linear radiance through
``expm1`` clamped at zero.  Training uses the log-space outputs directly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VQVAEConfig:
    side: int = 128
    latent: int = 32
    num_embeddings: int = 128
    embedding_dim: int = 256
    hidden: int = 128
    beta: float = 0.25

    @property
    def num_down(self) -> int:
        n = int(round(math.log2(self.side / self.latent)))
        if n < 1 or self.latent * 2 ** n != self.side:
            raise ValueError(f"side {self.side} must be latent {self.latent} times a power of two")
        return n

    @property
    def tokens(self) -> int:
        return self.latent * self.latent

    def fingerprint(self) -> dict:
        return {"side": self.side, "h": self.latent, "w": self.latent, "K": self.num_embeddings,
                "D": self.embedding_dim, "hidden": self.hidden}


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: VQVAEConfig):
        super().__init__()
        n = cfg.num_down
        chans = [max(cfg.hidden >> (n - 2 - i), 1) for i in range(n - 1)] + [cfg.embedding_dim]
        layers: list[nn.Module] = []
        c_in = 3
        for c in chans:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.ReLU()]
            c_in = c
        layers += [ResidualBlock(c_in), nn.ReLU(), ResidualBlock(c_in)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: VQVAEConfig):
        super().__init__()
        n = cfg.num_down
        chans = [max(cfg.hidden >> i, 1) for i in range(n - 1)] + [max(cfg.hidden // 4, 1)]
        layers: list[nn.Module] = []
        c_in = cfg.embedding_dim
        for c in chans:
            layers += [nn.ConvTranspose2d(c_in, c, 4, stride=2, padding=1), nn.ReLU(),
                       ResidualBlock(c), nn.ReLU()]
            c_in = c
        layers.append(nn.Conv2d(c_in, 3, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Snap every D-vector of ``z_e`` (..., D) to its nearest codebook row.

    Returns ``(z_q, indices)``; ties go to the lowest index.  Distances are
    evaluated in float64 so the choice agrees with an exhaustive search.
    """
    if z_e.shape[-1] != codebook.shape[1]:
        raise ValueError(f"latent depth {z_e.shape[-1]} does not match codebook depth {codebook.shape[1]}")
    flat = z_e.detach().reshape(-1, z_e.shape[-1]).double()
    cb = codebook.detach().double()
    dist = (flat * flat).sum(1, keepdim=True) - 2.0 * flat @ cb.T + (cb * cb).sum(1)[None, :]
    # exact recheck of the leading candidates guards against cancellation in the expansion
    top = dist.topk(min(2, cb.shape[0]), dim=1, largest=False).indices
    exact = ((flat[:, None, :] - cb[top]) ** 2).sum(-1)
    best = exact.min(dim=1, keepdim=True).values
    cand = torch.where(exact == best, top, torch.full_like(top, cb.shape[0]))
    idx = cand.min(dim=1).values
    idx = idx.reshape(z_e.shape[:-1])
    return codebook[idx], idx


def vqvae_loss(recon: torch.Tensor, target: torch.Tensor, z_e: torch.Tensor, z_q: torch.Tensor,
               beta: float = 0.25, log_inputs: bool = False) -> tuple[torch.Tensor, dict]:
    """Reconstruction + embedding + beta * commitment, each a mean squared error.

    ``recon``/``target`` are linear radiance unless ``log_inputs`` is set, in
    which case they are already ``log1p`` values.  ``z_q`` must be the raw
    codebook lookup so the embedding term reaches the codebook.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if recon.shape != target.shape or z_e.shape != z_q.shape:
        raise ValueError("shape mismatch in vqvae_loss")
    if not log_inputs:
        recon, target = torch.log1p(recon), torch.log1p(target)
    rec = F.mse_loss(recon, target)
    embed = F.mse_loss(z_q, z_e.detach())
    commit = F.mse_loss(z_e, z_q.detach())
    total = rec + embed + beta * commit
    return total, {"reconstruction": rec, "embedding": embed, "commitment": commit}


class VQVAENet(nn.Module):
    def __init__(self, cfg: VQVAEConfig = VQVAEConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.codebook = nn.Embedding(cfg.num_embeddings, cfg.embedding_dim)
        k = cfg.num_embeddings
        nn.init.uniform_(self.codebook.weight, -1.0 / k, 1.0 / k)
        self.decoder = Decoder(cfg)

    @property
    def fingerprint(self) -> dict:
        return self.cfg.fingerprint()

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.cfg.side or x.shape[3] != self.cfg.side:
            raise ValueError(f"expected (B, 3, {self.cfg.side}, {self.cfg.side}) input, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite values")

    def encode_log(self, x_log: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) log1p radiance -> (B, h, w, D) continuous latents."""
        self._check_input(x_log)
        return self.encoder(x_log).permute(0, 2, 3, 1)

    def quantize(self, z_e: torch.Tensor):
        return quantize(z_e, self.codebook.weight)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.min() < 0 or indices.max() >= self.cfg.num_embeddings:
            raise ValueError("codebook index out of range")
        return self.codebook.weight[indices]

    def decode_log(self, z_q: torch.Tensor) -> torch.Tensor:
        """(B, h, w, D) latents -> (B, 3, S, S) log1p radiance."""
        c = self.cfg
        if z_q.ndim != 4 or tuple(z_q.shape[1:]) != (c.latent, c.latent, c.embedding_dim):
            raise ValueError(f"expected (B, {c.latent}, {c.latent}, {c.embedding_dim}) latents, got {tuple(z_q.shape)}")
        if not torch.isfinite(z_q).all():
            raise ValueError("latents contain non-finite values")
        return self.decoder(z_q.permute(0, 3, 1, 2))

    def forward(self, x_log: torch.Tensor) -> dict:
        z_e = self.encode_log(x_log)
        z_q, idx = self.quantize(z_e)
        # straight-through: decoder sees z_q, encoder receives its gradient verbatim
        z_st = z_e + (z_q - z_e).detach()
        return {"z_e": z_e, "z_q": z_q, "indices": idx, "recon_log": self.decode_log(z_st)}

    def loss(self, x_log: torch.Tensor) -> tuple[torch.Tensor, dict, dict]:
        out = self(x_log)
        total, terms = vqvae_loss(out["recon_log"], x_log, out["z_e"], out["z_q"], self.cfg.beta, log_inputs=True)
        return total, terms, out


def to_log_tensor(maps) -> torch.Tensor:
    """(S, S, 3) or (B, S, S, 3) linear radiance -> (B, 3, S, S) log1p tensor."""
    a = torch.as_tensor(np.asarray(maps, dtype=np.float32))
    if a.ndim == 3:
        a = a[None]
    if not torch.isfinite(a).all():
        raise ValueError("input contains non-finite values")
    if (a < 0).any():
        raise ValueError("input contains negative radiance")
    return torch.log1p(a.permute(0, 3, 1, 2).contiguous())


def log_to_linear(x_log: torch.Tensor) -> np.ndarray:
    """(B, 3, S, S) log1p tensor -> (B, S, S, 3) non-negative linear radiance."""
    return torch.expm1(x_log).clamp_min(0).permute(0, 2, 3, 1).detach().cpu().numpy()


@torch.no_grad()
def encode(sp_map, net: VQVAENet) -> np.ndarray:
    """Linear-radiance SP map (S, S, 3) -> continuous latent grid (h, w, D)."""
    return net.encode_log(to_log_tensor(sp_map))[0].numpy()


@torch.no_grad()
def decode(z_q, net: VQVAENet) -> np.ndarray:
    """Quantized latent grid (h, w, D) -> linear-radiance SP map (S, S, 3)."""
    z = torch.as_tensor(np.asarray(z_q, dtype=np.float32))[None]
    return log_to_linear(net.decode_log(z))[0]


@torch.no_grad()
def map_to_indices(sp_maps, net: VQVAENet) -> np.ndarray:
    """Flattened row-major codebook indices, shape (B, h*w)."""
    _, idx = net.quantize(net.encode_log(to_log_tensor(sp_maps)))
    return idx.reshape(idx.shape[0], -1).numpy()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_vqvae(path, net: VQVAENet, extra: dict | None = None) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "vqvae",
        "config": asdict(net.cfg),
        "fingerprint": net.fingerprint,
        "beta": net.cfg.beta,
        "state_dict": net.state_dict(),
        "extra": extra or {},
    }, Path(path))


class FingerprintMismatch(ValueError):
    pass


def load_vqvae(path, expect: dict | None = None) -> VQVAENet:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "vqvae" or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise FingerprintMismatch(f"{path}: not a version-{CHECKPOINT_VERSION} VQVAE checkpoint")
    cfg = VQVAEConfig(**ckpt["config"])
    if cfg.fingerprint() != ckpt["fingerprint"]:
        raise FingerprintMismatch(f"{path}: stored fingerprint disagrees with its config")
    if expect is not None and any(ckpt["fingerprint"].get(k) != v for k, v in expect.items()):
        raise FingerprintMismatch(f"{path}: fingerprint {ckpt['fingerprint']} does not match {expect}")
    net = VQVAENet(cfg)
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return net
