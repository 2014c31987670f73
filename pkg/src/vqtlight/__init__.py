"""HDR lighting estimation from a single LDR crop via a vector-quantized sphere codebook."""

__version__ = "0.1.0"

from .dataset import CropImage, DatasetManifest, crop_fov, load_hdr, save_hdr, synth_panorama, tonemap
from .evalkit import MetricsRecord, SphereRenderSpec, angular_error, evaluate_pair, render_sphere, rmse, ssim
from .inference import EstimatorBundle, estimate_lighting, time_inference
from .projection import SphereMapping, build_mapping, ep_to_sp, sp_to_ep
from .training import TrainConfig, TrainReport, fit_vit, fit_vqvae, lr_at
from .vit import ViTConfig, build_estimator, patchify, vit_forward, vit_loss
from .vqvae import VQVAEConfig, VQVAENet, decode, encode, quantize, vqvae_loss

__all__ = [
    "CropImage", "DatasetManifest", "crop_fov", "load_hdr", "save_hdr", "synth_panorama", "tonemap",
    "MetricsRecord", "SphereRenderSpec", "angular_error", "evaluate_pair", "render_sphere", "rmse", "ssim",
    "EstimatorBundle", "estimate_lighting", "time_inference",
    "SphereMapping", "build_mapping", "ep_to_sp", "sp_to_ep",
    "TrainConfig", "TrainReport", "fit_vit", "fit_vqvae", "lr_at",
    "ViTConfig", "build_estimator", "patchify", "vit_forward", "vit_loss",
    "VQVAEConfig", "VQVAENet", "decode", "encode", "quantize", "vqvae_loss",
]
