"""Shared fixtures built on the procedural scene in scenefix.py."""

from pathlib import Path

import numpy as np
import pytest

from scenefix import render_image, write_scene


@pytest.fixture(scope="session")
def scene_job(tmp_path_factory) -> Path:
    """Path to a ready-to-run job file in its own scene directory."""
    return write_scene(tmp_path_factory.mktemp("scene"))


@pytest.fixture()
def texture_image() -> np.ndarray:
    """A deterministic float32 grayscale image in [0, 1]."""
    rng = np.random.default_rng(21)
    return render_image(rng).astype(np.float32) / 255.0
