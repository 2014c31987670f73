import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqtlight.dataset import tonemap
from vqtlight.evalkit import (SphereRenderSpec, aggregate, angular_error, evaluate_pair, icosphere, irradiance,
                              reflect, render_scene, render_sphere, rmse, shade_sphere, sphere_geometry, ssim)
from vqtlight.projection import ep_directions, lonlat_to_dir

from conftest import point_light_panorama, smooth_panorama


def ssim_oracle(a, b, L=1.0):
    """Direct per-pixel SSIM with symmetric padding and explicit window sums."""
    x = np.arange(11) - 5
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for ch in range(a.shape[2]):
        pa = np.pad(a[..., ch], 5, mode="symmetric")
        pb = np.pad(b[..., ch], 5, mode="symmetric")
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                wa, wb = pa[i:i + 11, j:j + 11], pb[i:i + 11, j:j + 11]
                ma, mb = (w * wa).sum(), (w * wb).sum()
                va = (w * wa * wa).sum() - ma * ma
                vb = (w * wb * wb).sum() - mb * mb
                cov = (w * wa * wb).sum() - ma * mb
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_icosphere_count_and_norm():
    v = icosphere(5)
    assert v.shape == (10242, 3)
    assert np.allclose(np.linalg.norm(v, axis=1), 1)


def test_constant_environment_diffuse():
    c = 0.7
    env = np.full((32, 64, 3), c)
    e = irradiance(env, np.array([[0.0, 1.0, 0.0], [0.6, 0.0, -0.8]]))
    assert np.allclose(e, np.pi * c, rtol=1e-4)
    img, mask = shade_sphere(env, SphereRenderSpec("diffuse", 32))
    # albedo 1: radiance = irradiance / pi
    assert np.allclose(img[mask], c, rtol=1e-4)


def test_irradiance_cosine_oracle():
    # env = max(0, d_y): irradiance at the zenith normal is int cos^2 over the upper hemisphere = 2pi/3
    from vqtlight.projection import ep_directions
    env = np.maximum(ep_directions(256)[..., 1], 0)[..., None].repeat(3, -1)
    e = irradiance(env, np.array([[0.0, 1.0, 0.0]]))[0, 0]
    assert np.isclose(e, 2 * np.pi / 3, rtol=5e-3)


def test_diffuse_linearity(rng):
    e1 = rng.uniform(0, 1, (16, 32, 3))
    e2 = rng.uniform(0, 3, (16, 32, 3))
    spec = SphereRenderSpec("diffuse", 24)
    a = shade_sphere(e1 + e2, spec)[0]
    b = shade_sphere(e1, spec)[0] + shade_sphere(e2, spec)[0]
    assert np.allclose(a, b, rtol=1e-6, atol=1e-12)


def test_mirror_highlight_position():
    lon, lat = 2.6, 0.35
    env = point_light_panorama(64, lon, lat, value=1e4, ambient=0.0)
    size = 128
    img, mask = shade_sphere(env, SphereRenderSpec("mirror", size))
    # analytic: normal bisects the view vector and the light direction
    n = lonlat_to_dir(lon, lat) + np.array([0.0, 0.0, -1.0])
    n /= np.linalg.norm(n)
    col = (n[0] + 1) / 2 * size - 0.5
    row = (1 - n[1]) / 2 * size - 0.5
    lum = img.sum(-1)
    rows, cols = np.indices(lum.shape)
    r, c = (lum * rows).sum() / lum.sum(), (lum * cols).sum() / lum.sum()
    assert abs(r - row) <= 1 and abs(c - col) <= 1


def test_reflect_is_mirror():
    _, normals = sphere_geometry(9)
    r = reflect(normals[4, 4][None])[0]
    # the centre faces the camera and reflects what lies behind it
    assert np.allclose(r, [0, 0, -1])


def test_glossy_converges_to_mirror():
    env = smooth_panorama(64).astype(np.float64)
    env += 5 * np.exp(30 * (np.einsum("ijk,k->ij", ep_directions(64),
                                          lonlat_to_dir(0.5, 0.2)) - 1))[..., None]
    size = 64
    mirror, mask = shade_sphere(env, SphereRenderSpec("mirror", size))
    glossy, _ = shade_sphere(env, SphereRenderSpec("glossy", size, phong_exponent=1e4))
    exp = 0.5
    diff = np.abs(tonemap(glossy, exp)[0] - tonemap(mirror, exp)[0])[mask] * 255
    assert diff.max() <= 2


def test_render_sphere_ldr_range():
    out = render_sphere(smooth_panorama(32), SphereRenderSpec("glossy", 16))
    assert out.shape == (16, 16, 3) and out.min() >= 0 and out.max() <= 1


def test_spec_validation():
    with pytest.raises(ValueError):
        SphereRenderSpec("plastic")
    with pytest.raises(ValueError):
        SphereRenderSpec("glossy", phong_exponent=0)


def test_metric_identity():
    a = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    assert rmse(a, a) == 0 and ssim(a, a) == 1.0 and angular_error(a, a) == 0


def test_rmse_ssim_angular_oracles(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    b = rng.uniform(0, 1, (8, 8, 3))
    direct = np.sqrt(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size)
    assert abs(rmse(a, b) - direct) <= 1e-9
    assert abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-6
    ang = []
    for pa, pb in zip(a.reshape(-1, 3), b.reshape(-1, 3)):
        ang.append(np.degrees(np.arccos(np.dot(pa, pb) / np.sqrt(np.dot(pa, pa) * np.dot(pb, pb)))))
    assert abs(angular_error(a, b) - np.mean(ang)) <= 1e-6


def test_angular_scale_invariance(rng):
    a = rng.uniform(0.1, 1, (6, 6, 3))
    b = rng.uniform(0.1, 1, (6, 6, 3))
    assert angular_error(a, 2 * a) == pytest.approx(0, abs=1e-6)
    s = rng.uniform(0.5, 4, (6, 6, 1))
    assert angular_error(a * s, b) == pytest.approx(angular_error(a, b), abs=1e-9)


def test_angular_zero_vectors():
    a = np.zeros((2, 2, 3))
    b = np.zeros((2, 2, 3))
    b[0, 0] = [1, 0, 0]
    assert angular_error(a, a) == 0
    assert angular_error(a, b) == pytest.approx(90.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_metric_properties(seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.uniform(0, 1, (12, 12, 3)) for _ in range(3))
    assert rmse(a, b) == pytest.approx(rmse(b, a))
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) < 1


def test_evaluate_identical_panoramas():
    env = smooth_panorama(32)
    rec = evaluate_pair(env, env, size=24)
    assert rec.rmse == 0 and rec.ssim == 1 and rec.angular_error_deg == 0
    assert set(rec.per_material) == {"diffuse", "mirror", "glossy"}


def test_evaluate_rotated_asymmetric_light():
    env = point_light_panorama(32, 1.0, 0.3, value=50.0, ambient=0.2)
    rotated = np.roll(env, env.shape[1] // 2, axis=1)
    rec = evaluate_pair(rotated, env, size=24)
    assert rec.rmse > 0 and rec.ssim < 1 and rec.angular_error_deg >= 0


def test_scene_layout():
    scene, tiles = render_scene(smooth_panorama(32), size=20)
    assert scene.shape == (20, 60, 3)
    assert list(tiles) == ["diffuse", "mirror", "glossy"]
    assert np.all(scene >= 0)


def test_aggregate_means():
    env = smooth_panorama(16)
    recs = [evaluate_pair(env, env, size=8), evaluate_pair(env * 1.5, env, size=8)]
    agg = aggregate(recs)
    assert agg["rmse"] == pytest.approx((recs[0].rmse + recs[1].rmse) / 2)
