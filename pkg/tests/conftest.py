import numpy as np
import pytest

from cora.denoiser import DenoiserConfig, ToyDenoiser, embed_prompt
from cora.schedule import NoiseSchedule, invert
from cora.tensor import Rng, image_to_latent


# (criterion number, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def denoiser():
    return ToyDenoiser(DenoiserConfig(weight_seed=7))


@pytest.fixture(scope="session")
def small_denoiser():
    return ToyDenoiser(DenoiserConfig(latent_hw=16, token_hw=8, d_model=32, d_feat=8, weight_seed=3))


def random_image(seed, hw=64):
    return np.random.default_rng(seed).random((hw, hw, 3))


def smooth_image(seed, hw=64):
    """Low-frequency random image (sum of a few sinusoids per channel)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    img = np.zeros((hw, hw, 3))
    for c in range(3):
        for _ in range(3):
            fy, fx, ph = rng.uniform(0.5, 3, 2).tolist() + [rng.uniform(0, 2 * np.pi)]
            img[..., c] += np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return (img - img.min()) / (img.max() - img.min())


@pytest.fixture(scope="session")
def record(schedule, denoiser):
    x0 = image_to_latent(random_image(11))
    return invert(x0, embed_prompt("a photo of a cat"), schedule, denoiser, Rng(5), prompt="a photo of a cat")


@pytest.fixture(scope="session")
def small_record(schedule, small_denoiser):
    x0 = image_to_latent(random_image(12, hw=32))
    return invert(x0, embed_prompt("a red car", 32), schedule, small_denoiser, Rng(6), prompt="a red car")
