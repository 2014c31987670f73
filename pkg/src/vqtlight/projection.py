"""Equirectangular (EP) <-> square equal-area (SP) panorama remapping.

The square layout uses the octahedral equal-area map: the sphere is split
into eight octants, each unfolded onto a triangle of the unit square so that
equal areas on the square correspond to equal solid angles on the sphere.

World frame: +y is up, longitude 0 looks down +z and longitude +pi/2 looks
down +x.  EP row 0 is the zenith; EP column centres span longitude
[-pi, pi).  SP pixel ``(row, col)`` is centred at ``((col + .5) / side,
(row + .5) / side)`` in the unit square.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

FOUR_PI = 4.0 * np.pi


# ---------------------------------------------------------------------------
# spherical coordinates
# ---------------------------------------------------------------------------


def lonlat_to_dir(lon, lat):
    """Unit vectors for longitude/latitude arrays (radians)."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def dir_to_lonlat(d):
    d = np.asarray(d, dtype=np.float64)
    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    return lon, lat


def ep_directions(h: int) -> np.ndarray:
    """(h, 2h, 3) pixel-centre directions of an equirectangular panorama."""
    w = 2 * h
    lat = np.pi / 2 - (np.arange(h) + 0.5) * np.pi / h
    lon = (np.arange(w) + 0.5) * 2 * np.pi / w - np.pi
    lon, lat = np.meshgrid(lon, lat)
    return lonlat_to_dir(lon, lat)


def ep_solid_angles(h: int) -> np.ndarray:
    """(h, 2h) exact solid angle of each equirectangular pixel."""
    w = 2 * h
    edges = np.pi / 2 - np.arange(h + 1) * np.pi / h
    band = np.sin(edges[:-1]) - np.sin(edges[1:])
    return np.repeat((band * 2 * np.pi / w)[:, None], w, axis=1)


# ---------------------------------------------------------------------------
# octahedral equal-area map
# ---------------------------------------------------------------------------


def square_to_sphere(u, v) -> np.ndarray:
    """Map unit-square coordinates to unit directions (world frame)."""
    a = 2.0 * np.asarray(u, dtype=np.float64) - 1.0
    b = 2.0 * np.asarray(v, dtype=np.float64) - 1.0
    au, av = np.abs(a), np.abs(b)
    signed = 1.0 - (au + av)
    r = 1.0 - np.abs(signed)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(r == 0, 1.0, (av - au) / np.where(r == 0, 1.0, r) + 1.0) * np.pi / 4
    z = np.copysign(1.0 - r * r, signed)
    s = r * np.sqrt(np.maximum(2.0 - r * r, 0.0))
    x = np.copysign(np.cos(phi), a) * s
    y = np.copysign(np.sin(phi), b) * s
    # octahedron pole axis is world up
    return np.stack([x, z, y], axis=-1)


def sphere_to_square(d):
    """Inverse of :func:`square_to_sphere`; returns ``(u, v)`` in [0, 1]."""
    d = np.asarray(d, dtype=np.float64)
    x, z, y = d[..., 0], d[..., 1], d[..., 2]
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    r = np.sqrt(np.maximum(1.0 - az, 0.0))
    hi = np.maximum(ax, ay)
    lo = np.minimum(ax, ay)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(hi == 0, 0.0, lo / np.where(hi == 0, 1.0, hi))
    phi = np.arctan(ratio) * 2.0 / np.pi
    phi = np.where(ax < ay, 1.0 - phi, phi)
    v = phi * r
    u = r - v
    south = z < 0
    u, v = np.where(south, 1.0 - v, u), np.where(south, 1.0 - u, v)
    u = np.copysign(u, x)
    v = np.copysign(v, y)
    return 0.5 * (u + 1.0), 0.5 * (v + 1.0)


def _triangle_solid_angle(a, b, c):
    # Van Oosterom & Strackee
    num = np.abs(np.einsum("...i,...i->...", a, np.cross(b, c)))
    den = 1.0 + np.einsum("...i,...i->...", a, b) + np.einsum("...i,...i->...", b, c) \
        + np.einsum("...i,...i->...", c, a)
    return 2.0 * np.arctan2(num, den)


def _pixel_solid_angles(side: int, sub: int) -> np.ndarray:
    n = side * sub
    t = np.arange(n + 1) / n
    vv, uu = np.meshgrid(t, t, indexing="ij")
    p = square_to_sphere(uu, vv)
    a, b = p[:-1, :-1], p[:-1, 1:]
    c, d = p[1:, :-1], p[1:, 1:]
    cell = _triangle_solid_angle(a, b, d) + _triangle_solid_angle(a, d, c)
    return cell.reshape(side, sub, side, sub).sum(axis=(1, 3))


# ---------------------------------------------------------------------------
# mapping object
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereMapping:
    """Precomputed geometry for one SP side length.

    ``inverse_lut`` holds, for every pixel of a ``side x 2*side`` EP
    panorama, the fractional ``(row, col)`` SP coordinates it samples from.
    """

    side: int
    directions: np.ndarray = field(repr=False)
    solid_angles: np.ndarray = field(repr=False)
    inverse_lut: np.ndarray = field(repr=False)

    def ep_lookup(self, out_h: int) -> np.ndarray:
        if out_h == self.side:
            return self.inverse_lut
        return _sp_coords_for_ep(self.side, out_h)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def _sp_coords_for_ep(side: int, out_h: int) -> np.ndarray:
    u, v = sphere_to_square(ep_directions(out_h))
    return _freeze(np.stack([v * side - 0.5, u * side - 0.5], axis=-1))


@lru_cache(maxsize=16)
def _ep_coords_for_sp(side: int, h: int) -> np.ndarray:
    lon, lat = dir_to_lonlat(build_mapping(side).directions)
    w = 2 * h
    rows = (np.pi / 2 - lat) / np.pi * h - 0.5
    cols = (lon + np.pi) / (2 * np.pi) * w - 0.5
    return _freeze(np.stack([rows, cols], axis=-1))


@lru_cache(maxsize=16)
def build_mapping(side: int, subdivisions: int = 8) -> SphereMapping:
    """Build the (cached, read-only) :class:`SphereMapping` for ``side``."""
    if int(side) != side or side < 4 or side % 2:
        raise ValueError(f"side must be an even integer >= 4, got {side!r}")
    side = int(side)
    t = (np.arange(side) + 0.5) / side
    vv, uu = np.meshgrid(t, t, indexing="ij")
    dirs = square_to_sphere(uu, vv)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    omega = _pixel_solid_angles(side, subdivisions)
    return SphereMapping(
        side=side,
        directions=_freeze(dirs),
        solid_angles=_freeze(omega),
        inverse_lut=_sp_coords_for_ep(side, side),
    )


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, wrap_cols: bool = False) -> np.ndarray:
    """Sample ``img`` (H, W, C) at fractional pixel coordinates.

    Rows are clamped to the image; columns wrap when ``wrap_cols`` is set and
    clamp otherwise.
    """
    h, w = img.shape[:2]
    rows = np.clip(rows, 0.0, h - 1)
    r0 = np.minimum(np.floor(rows).astype(np.int64), h - 2 if h > 1 else 0)
    fr = rows - r0
    r1 = np.minimum(r0 + 1, h - 1)
    if wrap_cols:
        c0f = np.floor(cols)
        fc = cols - c0f
        c0 = c0f.astype(np.int64) % w
        c1 = (c0 + 1) % w
    else:
        cols = np.clip(cols, 0.0, w - 1)
        c0 = np.minimum(np.floor(cols).astype(np.int64), w - 2 if w > 1 else 0)
        fc = cols - c0
        c1 = np.minimum(c0 + 1, w - 1)
    fr = fr[..., None]
    fc = fc[..., None]
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def sample_ep(pano: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinearly sample an equirectangular panorama along directions."""
    h, w = pano.shape[:2]
    lon, lat = dir_to_lonlat(dirs)
    rows = (np.pi / 2 - lat) / np.pi * h - 0.5
    cols = (lon + np.pi) / (2 * np.pi) * w - 0.5
    return bilinear(pano, rows, cols, wrap_cols=True)


def validate_radiance(pixels: np.ndarray, what: str = "panorama") -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"{what} must be H x W x 3, got shape {pixels.shape}")
    if not np.all(np.isfinite(pixels)):
        raise ValueError(f"{what} contains non-finite values")
    if np.any(pixels < 0):
        raise ValueError(f"{what} contains negative radiance")
    return pixels


def ep_to_sp(src: np.ndarray, m: SphereMapping) -> np.ndarray:
    """Resample an EP panorama (H, 2H, 3) onto the mapping's SP grid."""
    src = validate_radiance(src)
    h, w = src.shape[:2]
    if w != 2 * h:
        raise ValueError(f"equirectangular panorama must have W = 2H, got {h}x{w}")
    coords = _ep_coords_for_sp(m.side, h)
    out = bilinear(src.astype(np.float64), coords[..., 0], coords[..., 1], wrap_cols=True)
    return out.astype(src.dtype, copy=False)


def sp_to_ep(src: np.ndarray, m: SphereMapping, out_h: int | None = None) -> np.ndarray:
    """Resample an SP map (side, side, 3) to an ``out_h x 2*out_h`` panorama."""
    src = validate_radiance(src, "square map")
    if src.shape[0] != m.side or src.shape[1] != m.side:
        raise ValueError(f"square map is {src.shape[:2]}, mapping side is {m.side}")
    out_h = m.side if out_h is None else int(out_h)
    if out_h <= 0:
        raise ValueError("out_h must be positive")
    lut = m.ep_lookup(out_h)
    out = bilinear(src.astype(np.float64), lut[..., 0], lut[..., 1])
    return out.astype(src.dtype, copy=False)


def sp_energy(sp: np.ndarray, m: SphereMapping) -> np.ndarray:
    """Solid-angle weighted total radiance per channel."""
    return np.einsum("ij,ijc->c", m.solid_angles, sp.astype(np.float64))


def ep_energy(ep: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ijc->c", ep_solid_angles(ep.shape[0]), ep.astype(np.float64))
