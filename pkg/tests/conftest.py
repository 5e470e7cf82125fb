from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

import oiparts as op


@pytest.fixture
def rng():
    return np.random.default_rng(20240615)


def make_feature(data, source="dino") -> op.FeatureMap:
    return op.FeatureMap(np.asarray(data, dtype=np.float32), source)


def make_masks(labels, names) -> op.PartMaskSet:
    labels = np.asarray(labels)
    planes = np.zeros((len(names), *labels.shape), dtype=np.float32)
    for c in range(len(names)):
        planes[c] = labels == c
    return op.PartMaskSet(planes, tuple(names))


def noiseless_fixture(seed=11, height=16, width=16, channels=8, parts=3) -> op.Fixture:
    spec = op.SynthSpec(
        seed=seed,
        height=height,
        width=width,
        channels_per_source={"sd": channels, "dino": channels},
        num_parts=parts,
        noise_sigma=0.0,
    )
    return op.generate(spec)
