import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_backbone():
    """Seeded untrained VGG-19 stack (first three taps) in double precision."""
    from cgrp.losses import VGGFeatures

    return VGGFeatures((2, 7, 12), weights="random", seed=0).double()


@pytest.fixture(scope="session")
def backbone_float():
    from cgrp.losses import VGGFeatures

    return VGGFeatures((2, 7, 12), weights="random", seed=0)


@pytest.fixture
def small_weights():
    from cgrp.losses import LossWeights

    return LossWeights(layer_ids=(2, 7, 12), layer_weights=(1 / 32, 1 / 16, 1 / 8))


def smooth_image(rng, h, w, sigma=1.5):
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(rng.random((h, w)), sigma)
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return img.astype(np.float64)


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record ``(number, title, passed, detail)`` for the acceptance summary."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{number}. {'PASS' if passed else 'FAIL'}  {title}  ({detail})")
