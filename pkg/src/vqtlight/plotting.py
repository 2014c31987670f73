"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


@contextmanager
def figure(path, nrows=1, ncols=1, width=6.0, height=None):
    """Yield ``(fig, axes)`` and save to ``path`` on exit."""
    height = height or width * 0.62 * nrows / ncols
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(width, height), squeeze=False)
        try:
            yield fig, axes
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path)
        finally:
            plt.close(fig)


def display(img: np.ndarray) -> np.ndarray:
    """HDR -> displayable [0, 1] via a simple gamma curve."""
    img = np.asarray(img, dtype=np.float64)
    scale = np.percentile(img, 99) or 1.0
    return np.clip(img / scale, 0, 1) ** (1 / 2.2)


def training_curves(report, path) -> None:
    rows = report.rows
    epochs = [r["epoch"] for r in rows]
    with figure(path, 1, 2, width=9) as (_, ax):
        ax[0, 0].plot(epochs, [r["loss"] for r in rows], label="total")
        if report.stage == "vqvae":
            for key in ("reconstruction", "embedding", "commitment"):
                ax[0, 0].plot(epochs, [r[key] for r in rows], label=key, lw=1)
        if "val_loss" in rows[0]:
            ax[0, 0].plot(epochs, [r["val_loss"] for r in rows], "--", label="validation")
        ax[0, 0].set_yscale("log")
        ax[0, 0].set_xlabel("epoch")
        ax[0, 0].set_ylabel("loss")
        ax[0, 0].legend()
        ax[0, 1].step(epochs, [r["lr"] for r in rows], where="post")
        ax[0, 1].set_yscale("log")
        ax[0, 1].set_xlabel("epoch")
        ax[0, 1].set_ylabel("learning rate")


def codebook_usage(counts, path) -> None:
    counts = np.asarray(counts)
    with figure(path) as (_, ax):
        ax[0, 0].bar(np.arange(len(counts)), counts, width=1.0)
        ax[0, 0].set_xlabel("codebook entry")
        ax[0, 0].set_ylabel("assigned cells")
        ax[0, 0].set_title(f"{int((counts > 0).sum())} of {len(counts)} entries in use")


def resolution_curves(reports: dict, path) -> None:
    """Reconstruction loss per epoch for several latent resolutions."""
    with figure(path) as (_, ax):
        for res, rep in sorted(reports.items()):
            ax[0, 0].plot([r["epoch"] for r in rep.rows], [r["reconstruction"] for r in rep.rows],
                          label=f"{res}x{res}")
        ax[0, 0].set_yscale("log")
        ax[0, 0].set_xlabel("epoch")
        ax[0, 0].set_ylabel("reconstruction loss (log space)")
        ax[0, 0].legend(title="features")


def metric_summary(rows: list[dict], path) -> None:
    keys = ("rmse", "ssim", "angular_error_deg")
    with figure(path, 1, 3, width=9, height=2.6) as (_, ax):
        for a, k in zip(ax[0], keys):
            vals = [r[k] for r in rows]
            a.hist(vals, bins=min(20, max(len(vals), 1)))
            a.set_xlabel(k)
        ax[0, 0].set_ylabel("pairs")


def render_comparison(pred_img, gt_img, path, title: str = "") -> None:
    with figure(path, 2, 1, width=6, height=4.2) as (fig, ax):
        for a, img, label in zip(ax[:, 0], (gt_img, pred_img), ("ground truth", "prediction")):
            a.imshow(np.clip(img, 0, 1))
            a.set_ylabel(label)
            a.set_xticks([])
            a.set_yticks([])
        if title:
            fig.suptitle(title)


def panorama_comparison(pred, gt, path, crop=None) -> None:
    panels = [("prediction", display(pred))]
    if gt is not None:
        panels.insert(0, ("ground truth", display(gt)))
    n = len(panels) + (crop is not None)
    with figure(path, 1, n, width=3.2 * n, height=2.2) as (_, ax):
        if crop is not None:
            panels.insert(0, ("input crop", np.clip(crop, 0, 1)))
        for a, (label, img) in zip(ax[0], panels):
            a.imshow(img)
            a.set_title(label)
            a.axis("off")


def ablation_bars(rows: list[dict], path) -> None:
    keys = ("rmse", "ssim", "angular_error_deg", "fps")
    labels = [str(r["option"]) for r in rows]
    with figure(path, 1, len(keys), width=11, height=2.6) as (_, ax):
        for a, k in zip(ax[0], keys):
            a.bar(labels, [r[k] for r in rows])
            a.set_title(k)
            a.set_xlabel("option")


def latency_histogram(samples, path, reference: float | None = None) -> None:
    s = np.asarray(samples) * 1e3
    with figure(path) as (_, ax):
        ax[0, 0].hist(s, bins=30)
        ax[0, 0].axvline(np.percentile(s, 50), color="k", lw=1, label="p50")
        ax[0, 0].axvline(np.percentile(s, 95), color="k", lw=1, ls="--", label="p95")
        if reference is not None:
            ax[0, 0].axvline(reference * 1e3, color="C3", lw=1, label="reference")
        ax[0, 0].set_xlabel("latency (ms)")
        ax[0, 0].set_ylabel("runs")
        ax[0, 0].legend()
