import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqtlight.dataset import (CROP_SIZE, DatasetManifest, HDRFormatError, View, build_manifest, crop_fov,
                              crop_rays, float_to_rgbe, load_entry_pairs, load_hdr, luminance, make_pairs, render_crop,
                              read_raw, rgbe_to_float, sample_views, save_hdr, split_panoramas, synth_panorama,
                              tonemap, write_raw, write_synthetic_set)
from vqtlight.projection import build_mapping, ep_to_sp, lonlat_to_dir

from conftest import point_light_panorama


def test_raw_round_trip_is_exact(tmp_path, rng):
    pano = rng.gamma(1.0, 3.0, (16, 32, 3)).astype(np.float32)
    save_hdr(pano, tmp_path / "p.vqtl")
    assert np.array_equal(load_hdr(tmp_path / "p.vqtl"), pano)


def test_raw_header_layout(tmp_path):
    write_raw(tmp_path / "x.vqtl", np.ones((2, 4, 3), np.float32))
    data = (tmp_path / "x.vqtl").read_bytes()
    assert data.startswith(b"VQTL 1 2 4 3\n")
    assert len(data) == len(b"VQTL 1 2 4 3\n") + 2 * 4 * 3 * 4
    assert np.array_equal(read_raw(tmp_path / "x.vqtl"), np.ones((2, 4, 3), np.float32))


def test_rgbe_round_trip_within_quantization(tmp_path, rng):
    pano = rng.gamma(1.0, 3.0, (16, 32, 3)).astype(np.float32)
    pano[3, 5] = 0.0
    save_hdr(pano, tmp_path / "p.hdr")
    back = load_hdr(tmp_path / "p.hdr")
    # RGBE keeps an 8-bit mantissa relative to the pixel's largest channel
    bound = pano.max(axis=-1, keepdims=True) / 128.0
    assert np.all(np.abs(back - pano) <= bound)
    assert np.all(back[3, 5] == 0)


def test_rgbe_rle_long_runs(tmp_path):
    # constant rows exercise run-length encoding; width >= 8 and < 32768
    pano = np.full((8, 16, 3), 0.5, np.float32)
    pano[:, 7] = 4.0
    save_hdr(pano, tmp_path / "c.hdr")
    assert np.allclose(load_hdr(tmp_path / "c.hdr"), pano, rtol=1 / 128)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-20, 1e20))
def test_rgbe_scalar_codec(x):
    back = rgbe_to_float(float_to_rgbe(np.array([[x, x / 2, 0.0]])))[0]
    assert abs(back[0] - x) <= x / 128


def test_load_rejects_wrong_aspect(tmp_path):
    save_hdr(np.ones((8, 8, 3), np.float32), tmp_path / "sq.vqtl")
    with pytest.raises(ValueError, match="2:1|W = 2H|aspect"):
        load_hdr(tmp_path / "sq.vqtl")
    assert load_hdr(tmp_path / "sq.vqtl", equirect=False).shape == (8, 8, 3)


def test_load_rejects_nan(tmp_path):
    pano = np.ones((8, 16, 3), np.float32)
    pano[2, 3, 1] = np.nan
    write_raw(tmp_path / "n.vqtl", pano)
    with pytest.raises(ValueError, match="non-finite"):
        load_hdr(tmp_path / "n.vqtl")


def test_load_rejects_ldr_and_garbage(tmp_path):
    (tmp_path / "a.png").write_bytes(b"\x89PNG")
    with pytest.raises(HDRFormatError):
        load_hdr(tmp_path / "a.png")
    (tmp_path / "b.hdr").write_bytes(b"not a radiance file")
    with pytest.raises(HDRFormatError):
        load_hdr(tmp_path / "b.hdr")


def test_constant_panorama_gives_constant_crop():
    c = 0.8
    crop = crop_fov(np.full((64, 128, 3), c, np.float32), 1.0, 0.2, exposure=0.5)
    expected = (0.5 * c) ** (1 / 2.2)
    assert crop.pixels.shape == (CROP_SIZE, CROP_SIZE, 3)
    assert np.allclose(crop.pixels, expected, atol=1e-6)


@pytest.mark.parametrize("yaw,pitch", [(0.0, 0.0), (1.3, -0.4), (-2.5, 0.5)])
def test_center_ray_matches_view_direction(yaw, pitch):
    rays = crop_rays(View(yaw, pitch), size=256)
    # even size: the centre lies between the four middle pixels
    centre = rays[127:129, 127:129].mean(axis=(0, 1))
    centre /= np.linalg.norm(centre)
    assert np.linalg.norm(centre - lonlat_to_dir(yaw, pitch)) < 1e-6


def test_yaw_zero_centre_samples_forward_direction():
    # a pattern that varies only with longitude; yaw=0 crop centre must read the lon=0 value
    h = 128
    lon = (np.arange(2 * h) + 0.5) * np.pi / h - np.pi
    pano = np.repeat((2.0 + np.cos(lon))[None, :, None], h, 0).repeat(3, -1)
    crop = crop_fov(pano, 0.0, 0.0, exposure=0.1)
    centre = crop.pixels[127:129, 127:129, 0].mean()
    assert np.isclose(centre, (0.1 * 3.0) ** (1 / 2.2), atol=2e-3)


@pytest.mark.parametrize("theta", [0.0, 0.9, -2.2, 3.0])
def test_point_light_centered_in_matching_crop(theta):
    h = 256
    pano = point_light_panorama(h, theta, 0.0, value=500.0, ambient=0.0)
    # aim at the centre of the texel that actually holds the light
    r, c = np.unravel_index(np.argmax(pano[..., 0]), pano.shape[:2])
    lon = (c + 0.5) * np.pi / h - np.pi
    lat = np.pi / 2 - (r + 0.5) * np.pi / h
    img = render_crop(pano, View(lon, lat))[..., 0]
    rows, cols = np.indices(img.shape)
    assert abs((img * cols).sum() / img.sum() - 127.5) <= 1.0
    assert abs((img * rows).sum() / img.sum() - 127.5) <= 1.0


def test_light_to_the_right_appears_right():
    pano = point_light_panorama(256, 0.3, 0.0, value=500.0)
    crop = crop_fov(pano, 0.0, 0.0)
    _, c = np.unravel_index(np.argmax(crop.pixels.sum(-1)), (256, 256))
    assert c > 140


def test_tonemap_monotone_before_clamp(rng):
    x = np.sort(rng.uniform(0, 1, 200))
    rgb = np.stack([x, x, x], -1)
    ldr, _ = tonemap(rgb, exposure=0.5)
    assert np.all(np.diff(ldr[:, 0]) >= 0)
    assert ldr.min() >= 0 and ldr.max() <= 1


def test_luminance_weights():
    assert np.isclose(luminance(np.array([1.0, 1.0, 1.0])), 1.0)


def test_view_validation():
    with pytest.raises(ValueError):
        crop_fov(np.ones((8, 16, 3)), 0.0, np.deg2rad(70))
    with pytest.raises(ValueError):
        crop_fov(np.ones((8, 16, 3)), 0.0, 0.0, vfov=np.deg2rad(150))


def test_synth_panorama_deterministic_and_hdr():
    a, b = synth_panorama(3), synth_panorama(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, synth_panorama(4))
    for seed in range(6):
        p = synth_panorama(seed)
        assert p.shape == (128, 256, 3)
        assert np.all(np.isfinite(p)) and p.min() >= 0
        lum = luminance(p)
        assert lum.max() / np.median(lum) >= 10


def test_make_pairs_deterministic_and_consistent():
    pano = synth_panorama(11, height=32)
    a = make_pairs(pano, seed=5)
    b = make_pairs(pano, seed=5)
    assert len(a) == 10
    m = build_mapping(32)
    for pa, pb in zip(a, b):
        assert pa.crop.view == pb.crop.view
        assert np.array_equal(pa.crop.pixels, pb.crop.pixels)
        assert np.array_equal(pa.pano_sp, ep_to_sp(pano, m))
        assert np.array_equal(pa.crop.pixels, crop_fov(pano, pa.crop.view.yaw, pa.crop.view.pitch).pixels)


def test_sample_views_ranges():
    views = sample_views(9, n=100)
    pitches = np.array([v.pitch for v in views])
    assert np.all(np.abs(pitches) <= np.deg2rad(30))
    assert views == sample_views(9, n=100)


def test_paper_split_sizes():
    split = split_panoramas(2233, seed=0, n_test=224)
    assert split.count("train") == 2009 and split.count("test") == 224
    # default fraction reproduces the same counts
    assert split_panoramas(2233, seed=1).count("test") == 224
    assert 10 * len(split) == 22330


def test_manifest_split_at_panorama_level(tmp_path):
    paths = [f"p{i}.vqtl" for i in range(40)]
    man = build_manifest(paths, seed=2, n_test=6)
    train = {e.path for e in man.select("train")}
    test = {e.path for e in man.select("test")}
    assert not train & test
    assert train | test == set(paths)
    assert all(len(e.views) == 10 for e in man.entries)


def test_manifest_round_trip(tmp_path):
    man = write_synthetic_set(tmp_path, 3, seed=4, n_test=1, height=16)
    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert loaded.entries == man.entries
    assert json.loads((tmp_path / "manifest.json").read_text())["version"] == 1
    pairs = load_entry_pairs(loaded, loaded.entries[0])
    assert len(pairs) == 10
    assert pairs[0].pano_sp.shape == (16, 16, 3)


def test_manifest_rejects_wrong_view_count(tmp_path):
    man = build_manifest(["a.vqtl"], seed=0, n_test=0)
    d = json.loads(man.to_json())
    d["entries"][0]["views"] = d["entries"][0]["views"][:3]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ValueError, match="10 views"):
        DatasetManifest.load(tmp_path / "m.json")
