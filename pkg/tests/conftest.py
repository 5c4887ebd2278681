import numpy as np
import pytest

from tinyvlm.config import ModelSpec
from tinyvlm.image import RawImage


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(label): acceptance criterion; prints a PASS/FAIL line"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and rep.when == "call":
        label = marker.kwargs.get("label", item.name)
        verdict = "PASS" if rep.passed else "FAIL"
        print(f"\nACCEPTANCE {label}: {verdict}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model_spec(**overrides) -> ModelSpec:
    """Smallest model that exercises every component (tile 28 -> 2x2 patches)."""
    base = dict(
        fusion="self_attention",
        connector="pixel_shuffle",
        tile_side=28,
        patch_side=14,
        grid_max=3,
        vision_dim=16,
        vision_depth=1,
        vision_heads=2,
        lm_dim=32,
        lm_depth=2,
        lm_heads=2,
        vocab_size=300,
        max_seq_len=512,
        latent_count=4,
        shuffle_factor=2,
    )
    base.update(overrides)
    return ModelSpec(**base)


def quadrant_image(side: int, colors=((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0))) -> RawImage:
    """Square image of four solid-color quadrants (row-major order)."""
    half = side // 2
    px = np.zeros((side, side, 3))
    px[:half, :half] = colors[0]
    px[:half, half:] = colors[1]
    px[half:, :half] = colors[2]
    px[half:, half:] = colors[3]
    return RawImage(px)


def solid_image(h: int, w: int, color=(0.5, 0.25, 0.75)) -> RawImage:
    px = np.zeros((h, w, 3))
    px[:, :] = color
    return RawImage(px)
