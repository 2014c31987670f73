import numpy as np
import pytest
import torch

from vqtlight.projection import lonlat_to_dir, ep_directions


def smooth_panorama(h: int = 64) -> np.ndarray:
    """Band-limited positive panorama: low-order terms in the direction cosines."""
    d = ep_directions(h)
    base = 1.0 + 0.5 * d[..., 1] + 0.3 * d[..., 0] * d[..., 2]
    return np.stack([base, 1.2 + 0.4 * d[..., 0], 0.9 - 0.2 * d[..., 2] ** 2], axis=-1).astype(np.float32)


def point_light_panorama(h: int, lon: float, lat: float, value: float = 100.0, ambient: float = 0.05) -> np.ndarray:
    pano = np.full((h, 2 * h, 3), ambient, dtype=np.float64)
    d = ep_directions(h)
    target = lonlat_to_dir(lon, lat)
    r, c = np.unravel_index(np.argmax(d @ target), (h, 2 * h))
    pano[r, c] = value
    return pano


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[str, str] = {}


def record(key: str, ok: bool, detail: str) -> bool:
    line = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[key] = line
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
