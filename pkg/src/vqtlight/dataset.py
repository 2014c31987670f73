"""HDR panorama I/O, limited-FOV crops, data pairs and the synthetic generator."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .projection import (
    SphereMapping,
    build_mapping,
    dir_to_lonlat,
    ep_directions,
    ep_to_sp,
    lonlat_to_dir,
    sample_ep,
    validate_radiance,
)

CROP_SIZE = 256
DEFAULT_VFOV = np.deg2rad(60.0)
MAX_PITCH = np.deg2rad(30.0)
VIEWS_PER_PANORAMA = 10
# Laval Indoor split: 2,233 maps, 224 held out
TEST_FRACTION = 224 / 2233

RAW_MAGIC = b"VQTL"
RAW_VERSION = 1
MANIFEST_VERSION = 1

LDR_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
RGBE_SUFFIXES = {".hdr", ".pic", ".rgbe"}


class HDRFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Radiance RGBE
# ---------------------------------------------------------------------------


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    v = rgb.max(axis=-1)
    mant, exp = np.frexp(v)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = v > 1e-32
    scale = np.where(ok, mant * 256.0 / np.where(ok, v, 1.0), 0.0)
    out[..., :3] = np.where(ok[..., None], np.floor(rgb * scale[..., None]), 0).clip(0, 255)
    out[..., 3] = np.where(ok, exp + 128, 0)
    return out


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return ((rgbe[..., :3].astype(np.float64) + 0.5) * f[..., None]).astype(np.float32)


def _rle_channel(values: np.ndarray) -> bytes:
    out = bytearray()
    n = len(values)
    i = 0
    while i < n:
        # find a run of at least 4 equal bytes
        j = i
        while j < n:
            run = 1
            while j + run < n and run < 127 and values[j + run] == values[j]:
                run += 1
            if run >= 4:
                break
            j += 1
        # literal dump up to the run start
        while i < j:
            count = min(128, j - i)
            out.append(count)
            out.extend(values[i:i + count].tobytes())
            i += count
        if j < n:
            out.append(128 + run)
            out.append(int(values[j]))
            i = j + run
    return bytes(out)


def write_rgbe(path, pixels: np.ndarray) -> None:
    pixels = validate_radiance(pixels)
    h, w = pixels.shape[:2]
    rgbe = float_to_rgbe(pixels)
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n".encode()
    body = bytearray()
    rle = 8 <= w < 32768
    for row in rgbe:
        if rle:
            body.extend(bytes([2, 2, w >> 8, w & 0xFF]))
            for c in range(4):
                body.extend(_rle_channel(np.ascontiguousarray(row[:, c])))
        else:
            body.extend(row.tobytes())
    Path(path).write_bytes(header + bytes(body))


def _read_scanline(buf: memoryview, pos: int, w: int) -> tuple[np.ndarray, int]:
    if 8 <= w < 32768 and buf[pos] == 2 and buf[pos + 1] == 2 and not buf[pos + 2] & 0x80:
        if (buf[pos + 2] << 8) | buf[pos + 3] != w:
            raise HDRFormatError("scanline width mismatch")
        pos += 4
        line = np.empty((w, 4), dtype=np.uint8)
        for c in range(4):
            i = 0
            while i < w:
                count = buf[pos]
                pos += 1
                if count > 128:
                    count -= 128
                    if i + count > w:
                        raise HDRFormatError("bad run length")
                    line[i:i + count, c] = buf[pos]
                    pos += 1
                else:
                    if count == 0 or i + count > w:
                        raise HDRFormatError("bad literal length")
                    line[i:i + count, c] = np.frombuffer(buf[pos:pos + count], dtype=np.uint8)
                    pos += count
                i += count
        return line, pos
    # flat scanline
    n = 4 * w
    if pos + n > len(buf):
        raise HDRFormatError("truncated pixel data")
    return np.frombuffer(buf[pos:pos + n], dtype=np.uint8).reshape(w, 4), pos + n


def read_rgbe(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not (data.startswith(b"#?RADIANCE") or data.startswith(b"#?RGBE")):
        raise HDRFormatError(f"{path}: missing Radiance signature")
    end = data.find(b"\n\n")
    if end < 0:
        raise HDRFormatError(f"{path}: unterminated header")
    header = data[:end].decode("ascii", "replace")
    if "FORMAT=" in header and "32-bit_rle_rgbe" not in header:
        raise HDRFormatError(f"{path}: only 32-bit_rle_rgbe is supported")
    nl = data.find(b"\n", end + 2)
    m = re.fullmatch(rb"-Y (\d+) \+X (\d+)", data[end + 2:nl].strip())
    if m is None:
        raise HDRFormatError(f"{path}: unsupported resolution line")
    h, w = int(m.group(1)), int(m.group(2))
    buf = memoryview(data)
    pos = nl + 1
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    try:
        for y in range(h):
            rgbe[y], pos = _read_scanline(buf, pos, w)
    except IndexError as exc:
        raise HDRFormatError(f"{path}: truncated pixel data") from exc
    return rgbe_to_float(rgbe)


# ---------------------------------------------------------------------------
# raw float dump
# ---------------------------------------------------------------------------


def write_raw(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    h, w, c = pixels.shape
    header = RAW_MAGIC + f" {RAW_VERSION} {h} {w} {c}\n".encode()
    Path(path).write_bytes(header + pixels.astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    fields = data[:nl].split() if nl > 0 else []
    if len(fields) != 5 or fields[0] != RAW_MAGIC:
        raise HDRFormatError(f"{path}: not a VQTL raw dump")
    version, h, w, c = (int(f) for f in fields[1:])
    if version != RAW_VERSION:
        raise HDRFormatError(f"{path}: unsupported raw version {version}")
    payload = data[nl + 1:]
    if len(payload) != h * w * c * 4:
        raise HDRFormatError(f"{path}: expected {h * w * c} floats, found {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


# ---------------------------------------------------------------------------
# panorama files
# ---------------------------------------------------------------------------


def load_hdr(path, equirect: bool = True) -> np.ndarray:
    """Load an HDR panorama (Radiance ``.hdr`` or ``.vqtl`` raw dump).

    With ``equirect`` the 2:1 aspect ratio is enforced.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in LDR_SUFFIXES:
        raise HDRFormatError(f"{path}: {suffix} is an LDR format, HDR panorama required")
    if not path.exists():
        raise FileNotFoundError(path)
    if suffix in RGBE_SUFFIXES:
        pixels = read_rgbe(path)
    elif suffix == ".vqtl":
        pixels = read_raw(path)
    else:
        raise HDRFormatError(f"{path}: unknown HDR container {suffix!r}")
    try:
        validate_radiance(pixels)
    except ValueError as exc:
        raise HDRFormatError(f"{path}: {exc}") from None
    if equirect and pixels.shape[1] != 2 * pixels.shape[0]:
        raise HDRFormatError(f"{path}: equirectangular panorama must be 2:1, got {pixels.shape[0]}x{pixels.shape[1]}")
    return pixels


def save_hdr(pano: np.ndarray, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in RGBE_SUFFIXES:
        write_rgbe(path, pano)
    elif suffix == ".vqtl":
        write_raw(path, validate_radiance(pano))
    else:
        raise HDRFormatError(f"{path}: cannot write HDR data as {suffix!r}")


# ---------------------------------------------------------------------------
# tone mapping and crops
# ---------------------------------------------------------------------------


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.2126, 0.7152, 0.0722])


def auto_exposure(linear: np.ndarray, percentile: float = 90.0, key: float = 0.8, gamma: float = 2.2) -> float:
    """Exposure placing the given luminance percentile at ``key`` after gamma."""
    ref = float(np.percentile(luminance(linear), percentile))
    if ref <= 0:
        return 1.0
    return key ** gamma / ref


def tonemap(linear: np.ndarray, exposure: float | None = None, gamma: float = 2.2) -> tuple[np.ndarray, float]:
    if exposure is None:
        exposure = auto_exposure(linear, gamma=gamma)
    ldr = np.clip(np.maximum(exposure * linear, 0.0) ** (1.0 / gamma), 0.0, 1.0)
    return ldr, exposure


@dataclass(frozen=True)
class View:
    yaw: float
    pitch: float
    vfov: float = float(DEFAULT_VFOV)

    def validate(self) -> None:
        if not np.deg2rad(10.0) < self.vfov < np.deg2rad(120.0):
            raise ValueError(f"vfov must lie in (10, 120) degrees, got {np.rad2deg(self.vfov):.3f}")
        if abs(self.pitch) > np.deg2rad(60.0) + 1e-12:
            raise ValueError(f"|pitch| must be <= 60 degrees, got {np.rad2deg(self.pitch):.3f}")
        if not np.isfinite(self.yaw):
            raise ValueError("yaw must be finite")


@dataclass
class CropImage:
    pixels: np.ndarray
    view: View
    exposure: float = 1.0

    def __post_init__(self):
        if self.pixels.shape != (CROP_SIZE, CROP_SIZE, 3):
            raise ValueError(f"crop must be {CROP_SIZE}x{CROP_SIZE}x3, got {self.pixels.shape}")


def view_basis(yaw: float, pitch: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(forward, right, up) unit vectors of a camera at ``yaw``/``pitch``."""
    forward = lonlat_to_dir(yaw, pitch)
    right = lonlat_to_dir(yaw + np.pi / 2, 0.0)
    up = lonlat_to_dir(yaw, pitch + np.pi / 2)
    return forward, right, up


def crop_rays(view: View, size: int = CROP_SIZE) -> np.ndarray:
    """(size, size, 3) unit ray directions of a square rectilinear crop."""
    forward, right, up = view_basis(view.yaw, view.pitch)
    half = np.tan(view.vfov / 2)
    t = ((np.arange(size) + 0.5) / size * 2 - 1) * half
    x = t[None, :, None]
    y = -t[:, None, None]
    rays = forward + x * right + y * up
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def render_crop(pano: np.ndarray, view: View, size: int = CROP_SIZE) -> np.ndarray:
    """Linear-radiance rectilinear view of a panorama."""
    view.validate()
    return sample_ep(np.asarray(pano, dtype=np.float64), crop_rays(view, size))


def crop_fov(pano: np.ndarray, yaw: float, pitch: float, vfov: float = float(DEFAULT_VFOV),
             exposure: float | None = None) -> CropImage:
    """Tone-mapped 256x256 perspective crop of an EP panorama."""
    view = View(float(yaw), float(pitch), float(vfov))
    linear = render_crop(validate_radiance(pano), view)
    ldr, exposure = tonemap(linear, exposure)
    return CropImage(ldr.astype(np.float32), view, float(exposure))


# ---------------------------------------------------------------------------
# synthetic panoramas
# ---------------------------------------------------------------------------


def synth_panorama(seed: int, height: int = 128) -> np.ndarray:
    """Procedural indoor-like HDR panorama, deterministic per seed.

    Ambient vertical gradient + 1-4 soft area lights (10-100x ambient at the
    peak) + a low-frequency textured band around the horizon.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A17]))
    d = ep_directions(height)
    lon, lat = dir_to_lonlat(d)
    up = d[..., 1]

    floor_rgb = rng.uniform(0.15, 0.35, 3)
    ceil_rgb = rng.uniform(0.35, 0.7, 3)
    mix = 0.5 * (up + 1.0)
    ambient = floor_rgb * (1 - mix[..., None]) + ceil_rgb * mix[..., None]
    ambient_level = float(luminance(ambient).mean())

    band = np.exp(-0.5 * (lat / rng.uniform(0.25, 0.45)) ** 2)
    texture = np.zeros_like(lon)
    for _ in range(3):
        freq = rng.integers(2, 7)
        texture += rng.uniform(0.05, 0.12) * np.sin(freq * lon + rng.uniform(0, 2 * np.pi)) \
            * np.cos(rng.integers(1, 4) * lat + rng.uniform(0, 2 * np.pi))
    tint = rng.uniform(0.7, 1.3, 3)
    pano = ambient * (1.0 + band[..., None] * texture[..., None] * tint)

    for _ in range(int(rng.integers(1, 5))):
        centre = lonlat_to_dir(rng.uniform(-np.pi, np.pi), rng.uniform(np.deg2rad(5), np.deg2rad(70)))
        sharpness = rng.uniform(25.0, 60.0)
        peak = rng.uniform(10.0, 100.0) * ambient_level
        colour = rng.uniform(0.8, 1.0, 3)
        colour /= colour.max()
        lobe = np.exp(sharpness * (d @ centre - 1.0))
        pano = pano + peak * lobe[..., None] * colour
    return np.maximum(pano, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# pairs and manifests
# ---------------------------------------------------------------------------


@dataclass
class DataPair:
    pano_ep: np.ndarray
    pano_sp: np.ndarray
    crop: CropImage


def sample_views(seed: int, n: int = VIEWS_PER_PANORAMA, vfov: float = float(DEFAULT_VFOV),
                 max_pitch: float = float(MAX_PITCH)) -> list[View]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC209]))
    yaws = rng.uniform(0.0, 2 * np.pi, n)
    pitches = rng.uniform(-max_pitch, max_pitch, n)
    return [View(float(y), float(p), float(vfov)) for y, p in zip(yaws, pitches)]


def make_pairs(pano: np.ndarray, seed: int, mapping: SphereMapping | None = None,
               views: Sequence[View] | None = None) -> list[DataPair]:
    """The 10 ``{I, I', P}`` pairs of one panorama."""
    pano = validate_radiance(pano)
    if mapping is None:
        mapping = build_mapping(pano.shape[0])
    sp = ep_to_sp(pano, mapping)
    views = sample_views(seed) if views is None else views
    return [DataPair(pano, sp, crop_fov(pano, v.yaw, v.pitch, v.vfov)) for v in views]


def split_panoramas(n: int, seed: int, n_test: int | None = None) -> list[str]:
    """Panorama-level train/test assignment (no crop leakage)."""
    if n_test is None:
        n_test = int(round(n * TEST_FRACTION))
    if not 0 <= n_test <= n:
        raise ValueError("n_test out of range")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B11])).permutation(n)
    split = ["train"] * n
    for i in order[:n_test]:
        split[i] = "test"
    return split


@dataclass
class PanoramaEntry:
    path: str
    split: str
    seed: int
    views: list[View] = field(default_factory=list)


@dataclass
class DatasetManifest:
    entries: list[PanoramaEntry]
    seed: int
    vfov: float = float(DEFAULT_VFOV)
    tonemap: dict = field(default_factory=lambda: {"percentile": 90.0, "key": 0.8, "gamma": 2.2})
    sp_side: int = 128
    version: int = MANIFEST_VERSION
    root: str | None = None

    def __post_init__(self):
        for e in self.entries:
            if len(e.views) != VIEWS_PER_PANORAMA:
                raise ValueError(f"{e.path}: expected {VIEWS_PER_PANORAMA} views, got {len(e.views)}")
            if e.split not in ("train", "test"):
                raise ValueError(f"{e.path}: unknown split {e.split!r}")

    def select(self, split: str | None = None) -> list[PanoramaEntry]:
        return [e for e in self.entries if split is None or e.split == split]

    def resolve(self, entry: PanoramaEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = Path(self.root) / p
        return p

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {d.get('version')}")
        entries = [PanoramaEntry(e["path"], e["split"], e["seed"], [View(**v) for v in e["views"]])
                   for e in d.pop("entries")]
        return cls(entries=entries, root=str(path.parent), **d)


def build_manifest(paths: Iterable, seed: int, n_test: int | None = None, vfov: float = float(DEFAULT_VFOV),
                   sp_side: int = 128, root=None) -> DatasetManifest:
    paths = [str(p) for p in paths]
    split = split_panoramas(len(paths), seed, n_test)
    entries = []
    for i, (p, s) in enumerate(zip(paths, split)):
        pano_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        entries.append(PanoramaEntry(p, s, pano_seed, sample_views(pano_seed, vfov=vfov)))
    return DatasetManifest(entries, int(seed), float(vfov), sp_side=sp_side,
                           root=None if root is None else str(root))


def scan_directory(directory) -> list[Path]:
    """HDR panoramas in a directory (e.g. a local copy of the Laval set)."""
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in RGBE_SUFFIXES | {".vqtl"})


def write_synthetic_set(out_dir, n: int, seed: int, n_test: int | None = None, height: int = 128) -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / "panoramas").mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(int(seed))
    paths = []
    for i, child in enumerate(ss.generate_state(n)):
        rel = Path("panoramas") / f"synth_{i:05d}.vqtl"
        save_hdr(synth_panorama(int(child), height), out_dir / rel)
        paths.append(rel)
    manifest = build_manifest(paths, seed, n_test, sp_side=height, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_entry_pairs(manifest: DatasetManifest, entry: PanoramaEntry,
                     views: Sequence[View] | None = None) -> list[DataPair]:
    pano = load_hdr(manifest.resolve(entry))
    return make_pairs(pano, entry.seed, build_mapping(manifest.sp_side),
                      entry.views if views is None else views)
