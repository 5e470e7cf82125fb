from __future__ import annotations

import hashlib

import numpy as np
import pytest
from PIL import Image


class StubBackend:
    """Deterministic stand-in for the model stack.

    Features are seeded from the image bytes, so identical inputs give
    identical grids without any checkpoints.
    """

    dino_input_size = 518
    sd_input_size = 512

    def __init__(self, dino_channels=1024, sd_channels=1280, grid=37):
        self.dino_channels = dino_channels
        self.sd_channels = sd_channels
        self.grid = grid
        self.calls: list[dict] = []

    def describe(self) -> dict:
        return {
            "dino": {"model": "stub-dino", "layer": 11, "input": self.dino_input_size},
            "sd": {"model": "stub-sd", "unet_tap": "stub", "input": self.sd_input_size},
        }

    def _seeded(self, image: np.ndarray, salt: bytes) -> np.random.Generator:
        digest = hashlib.sha256(salt + image.tobytes()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    def dino_features(self, image: np.ndarray) -> np.ndarray:
        rng = self._seeded(image, b"dino")
        return rng.standard_normal((self.grid, self.grid, self.dino_channels)).astype(
            np.float32
        )

    def sd_features(self, image: np.ndarray, prompt: str, timestep: int) -> np.ndarray:
        self.calls.append({"prompt": prompt, "timestep": timestep})
        rng = self._seeded(image, b"sd")
        return rng.standard_normal((32, 32, self.sd_channels)).astype(np.float32)


@pytest.fixture
def stub_backend():
    return StubBackend()


@pytest.fixture
def image_file(tmp_path):
    def make(name="img.png", size=(64, 48), seed=0):
        rng = np.random.default_rng(seed)
        data = rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
        path = tmp_path / name
        Image.fromarray(data).save(path)
        return path

    return make
