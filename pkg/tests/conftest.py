import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nirlora.model import ModelConfig, SegModel  # noqa: E402
from nirlora.vit import ViTConfig  # noqa: E402

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.load_profile("default")


def tiny_vit(patch_size: int = 16) -> ViTConfig:
    return ViTConfig(patch_size=patch_size, layers=2, hidden=32, mlp_dim=64, heads=2, image_size=32)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(tiny_vit(), head_width=16)


@pytest.fixture
def tiny_model(tiny_cfg) -> SegModel:
    return SegModel(tiny_cfg, np.random.default_rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synth_arrays(n: int, size: int = 32, seed: int = 0, bands=(3, 4, 5)):
    """``n`` normalised synthetic patches as (images, masks) arrays."""
    from nirlora.data import fit_norm_stats, gen_synthetic, normalize, patchify, select_bands, stack

    patches = []
    for img, mask in gen_synthetic(n, seed, size, size):
        patches += patchify(select_bands(img, bands), mask, size)
    stats = fit_norm_stats(patches)
    return stack([normalize(p, stats) for p in patches])


def desk_cfg() -> ModelConfig:
    """Tiny model used for the learning checks: 4-pixel patches give an 8x8 token grid."""
    return ModelConfig(tiny_vit(patch_size=4), head_width=16)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
