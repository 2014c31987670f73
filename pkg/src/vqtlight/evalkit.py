"""Deterministic image-based-lighting sphere renders and image metrics.

Spheres are viewed by an orthographic camera looking down world +z (the
panorama's longitude 0), so a mirror ball reflects what is behind the
camera at its centre.  Nothing here is stochastic: diffuse shading uses a
fixed icosphere quadrature and glossy shading a fixed stratified Phong lobe.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .dataset import auto_exposure, tonemap
from .projection import sample_ep, validate_radiance

MATERIALS = ("diffuse", "mirror", "glossy")
VIEW = np.array([0.0, 0.0, -1.0])  # surface -> camera


@dataclass(frozen=True)
class SphereRenderSpec:
    material: str = "diffuse"
    size: int = 128
    albedo: tuple = (1.0, 1.0, 1.0)
    phong_exponent: float = 64.0

    def __post_init__(self):
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}")
        if self.material == "glossy" and not self.phong_exponent > 0:
            raise ValueError("phong_exponent must be positive")
        if self.size < 2:
            raise ValueError("size must be at least 2")


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4)
def icosphere(subdivisions: int = 5) -> np.ndarray:
    """Unit vertices of a subdivided icosahedron (10 * 4**n + 2 of them)."""
    t = (1.0 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    out = np.array(verts)
    out.setflags(write=False)
    return out


def irradiance(env: np.ndarray, normals: np.ndarray, subdivisions: int = 5, chunk: int = 4096) -> np.ndarray:
    """Cosine-weighted hemisphere integral of ``env`` about each normal.

    The clamped-cosine kernel is normalised over the quadrature so that a
    constant environment ``c`` gives exactly ``pi * c``.
    """
    dirs = icosphere(subdivisions)
    radiance = sample_ep(env, dirs)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(normals), 3))
    for i in range(0, len(normals), chunk):
        w = np.maximum(normals[i:i + chunk] @ dirs.T, 0.0)
        out[i:i + chunk] = np.pi * (w @ radiance) / w.sum(axis=1, keepdims=True)
    return out


def _tangent_frame(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(r[:, 1:2]) < 0.9, np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    t = np.cross(helper, r)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return t, np.cross(r, t)


def phong_lobe(env: np.ndarray, axes: np.ndarray, exponent: float, n_theta: int = 12, n_phi: int = 24) -> np.ndarray:
    """Normalised Phong-lobe average of ``env`` around each axis.

    Nodes follow the lobe's inverse CDF, ``cos a = u ** (1 / (n + 1))``, on a
    fixed stratified grid, so every node carries equal weight.
    """
    axes = np.asarray(axes, dtype=np.float64).reshape(-1, 3)
    u = (np.arange(n_theta) + 0.5) / n_theta
    cos_a = u ** (1.0 / (exponent + 1.0))
    sin_a = np.sqrt(np.maximum(1.0 - cos_a ** 2, 0.0))
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    t, b = _tangent_frame(axes)
    acc = np.zeros((len(axes), 3))
    for ca, sa in zip(cos_a, sin_a):
        for p in phi:
            d = ca * axes + sa * (np.cos(p) * t + np.sin(p) * b)
            acc += sample_ep(env, d)
    return acc / (n_theta * n_phi)


# ---------------------------------------------------------------------------
# sphere rendering
# ---------------------------------------------------------------------------


def sphere_geometry(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Coverage mask and world normals of an orthographic unit sphere."""
    t = (np.arange(size) + 0.5) / size * 2 - 1
    x = t[None, :]
    y = -t[:, None]
    r2 = x * x + y * y
    mask = r2 <= 1.0
    z = -np.sqrt(np.maximum(1.0 - r2, 0.0))
    normals = np.stack(np.broadcast_arrays(x, y, z), axis=-1)
    return mask, normals


def reflect(normals: np.ndarray, view: np.ndarray = VIEW) -> np.ndarray:
    return 2.0 * (normals @ view)[..., None] * normals - view


def shade_sphere(env: np.ndarray, spec: SphereRenderSpec) -> tuple[np.ndarray, np.ndarray]:
    """Linear radiance image (size, size, 3) and its coverage mask."""
    env = validate_radiance(env, "environment").astype(np.float64)
    if env.shape[1] != 2 * env.shape[0]:
        raise ValueError("environment must be an equirectangular 2:1 panorama")
    mask, normals = sphere_geometry(spec.size)
    n = normals[mask]
    albedo = np.asarray(spec.albedo, dtype=np.float64)
    if spec.material == "diffuse":
        colour = albedo / np.pi * irradiance(env, n)
    elif spec.material == "mirror":
        colour = albedo * sample_ep(env, reflect(n))
    else:
        colour = albedo * phong_lobe(env, reflect(n), spec.phong_exponent)
    img = np.zeros((spec.size, spec.size, 3))
    img[mask] = colour
    return img, mask


def render_sphere(env: np.ndarray, spec: SphereRenderSpec, exposure: float | None = None) -> np.ndarray:
    """Tone-mapped LDR render; exposure defaults to the crop auto-exposure rule."""
    img, mask = shade_sphere(env, spec)
    if exposure is None:
        exposure = auto_exposure(img[mask])
    return tonemap(img, exposure)[0]


def render_scene(env: np.ndarray, size: int = 64, phong_exponent: float = 64.0,
                 ground_albedo: float = 0.5) -> tuple[np.ndarray, dict]:
    """Linear render of diffuse, mirror and glossy spheres over a diffuse ground.

    Returns the (size, 3 * size, 3) composite and the per-material renders.
    Ground pixels are the lower half of each tile outside the sphere, lit by
    the upward irradiance; shadows are not traced.
    """
    env = validate_radiance(env, "environment").astype(np.float64)
    ground = ground_albedo / np.pi * irradiance(env, np.array([[0.0, 1.0, 0.0]]))[0]
    tiles = {}
    composite = []
    for name in ("diffuse", "mirror", "glossy"):
        spec = SphereRenderSpec(name, size, phong_exponent=phong_exponent)
        img, mask = shade_sphere(env, spec)
        tiles[name] = img
        floor = ~mask & (np.arange(size) >= size // 2)[:, None]
        tile = img.copy()
        tile[floor] = ground
        composite.append(tile)
    return np.concatenate(composite, axis=1), tiles


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over pixels and channels (Gaussian window, reflected borders)."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(window, sigma)

    def blur(x):
        return ndimage.correlate1d(ndimage.correlate1d(x, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(m)
    return float(np.mean(vals))


def angular_error(a, b, eps: float = 1e-6) -> float:
    """Mean angle in degrees between per-pixel RGB vectors.

    Pixels where both vectors are (near) zero are skipped; a zero vector
    against a non-zero one counts as 90 degrees.
    """
    a, b = _check_pair(a, b)
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na >= eps) | (nb >= eps)
    if not keep.any():
        return 0.0
    a, b, na, nb = a[keep], b[keep], na[keep], nb[keep]
    zero = (na < eps) | (nb < eps)
    ua = a / np.where(na > 0, na, 1.0)[:, None]
    ub = b / np.where(nb > 0, nb, 1.0)[:, None]
    # half-angle form: exact zero for identical directions, no arccos clipping
    ang = 2.0 * np.arctan2(np.linalg.norm(ua - ub, axis=1), np.linalg.norm(ua + ub, axis=1))
    ang = np.where(zero, np.pi / 2, ang)
    return float(np.degrees(ang).mean())


@dataclass
class MetricsRecord:
    rmse: float
    ssim: float
    angular_error_deg: float
    per_material: dict = field(default_factory=dict)

    def as_row(self, prefix: dict | None = None) -> dict:
        row = dict(prefix or {})
        row.update(rmse=self.rmse, ssim=self.ssim, angular_error_deg=self.angular_error_deg)
        for name, m in self.per_material.items():
            for k, v in m.items():
                row[f"{name}_{k}"] = v
        return row

    def to_dict(self) -> dict:
        return asdict(self)


def _metrics(pred_lin, gt_lin, exposure):
    p = tonemap(pred_lin, exposure)[0]
    g = tonemap(gt_lin, exposure)[0]
    return {"rmse": rmse(p, g), "ssim": ssim(p, g), "angular_error_deg": angular_error(pred_lin, gt_lin)}


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, size: int = 64, return_images: bool = False):
    """Render both panoramas identically and score the renders.

    RMSE and SSIM compare tone-mapped renders (one exposure, fixed by the
    ground truth); angular error compares the linear renders.
    """
    pred = validate_radiance(pred, "prediction")
    gt = validate_radiance(gt, "ground truth")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p_scene, p_tiles = render_scene(pred, size)
    g_scene, g_tiles = render_scene(gt, size)
    exposure = auto_exposure(g_scene)
    overall = _metrics(p_scene, g_scene, exposure)
    per = {name: _metrics(p_tiles[name], g_tiles[name], exposure) for name in p_tiles}
    record = MetricsRecord(overall["rmse"], overall["ssim"], overall["angular_error_deg"], per)
    if return_images:
        return record, tonemap(p_scene, exposure)[0], tonemap(g_scene, exposure)[0]
    return record


def aggregate(records: list[MetricsRecord]) -> dict:
    rows = [r.as_row() for r in records]
    return {k: float(np.mean([row[k] for row in rows])) for k in rows[0]} if rows else {}
