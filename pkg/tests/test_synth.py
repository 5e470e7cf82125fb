from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

import oiparts as op
from oiparts.errors import ValidationError

from conftest import noiseless_fixture


def _fixture_equal(a: op.Fixture, b: op.Fixture) -> bool:
    if not np.array_equal(a.ref_labels, b.ref_labels):
        return False
    for source in a.ref_features:
        if not np.array_equal(a.ref_features[source].data, b.ref_features[source].data):
            return False
        if not np.array_equal(a.query_features[source].data, b.query_features[source].data):
            return False
    return np.array_equal(a.query_guide.data, b.query_guide.data)


def _pipeline_miou(fx: op.Fixture, beta=0.1, use_selection=True) -> float:
    fused_r = op.fuse(fx.ref_features["sd"], fx.ref_features["dino"])
    fused_q = op.fuse(fx.query_features["sd"], fx.query_features["dino"])
    record = None
    if use_selection:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            record = op.select_for_example(fused_r, fx.ref_masks)
    cfg = op.TransferConfig(beta=beta, use_selection=use_selection)
    scores = op.segment(fused_q, fused_r, fx.ref_masks, record, cfg)
    labels, _ = op.finalize(scores, cfg)
    cm = op.accumulate(
        op.ConfusionMatrix.empty(fx.ref_masks.num_parts), fx.query_labels, labels.labels
    )
    return op.iou_report(cm, fx.part_names).miou


def test_noiseless_fixture_is_recovered_exactly():
    fx = noiseless_fixture(seed=2, parts=4)
    assert _pipeline_miou(fx, beta=0.01) == 1.0


def test_same_seed_is_bitwise_identical():
    spec = op.SynthSpec(
        seed=99, height=12, width=10,
        channels_per_source={"sd": 8, "dino": 6},
        num_parts=3, layout="voronoi", noise_sigma=0.1, distractor_channels=2,
    )
    assert _fixture_equal(op.generate(spec), op.generate(spec))


def test_different_seeds_differ():
    base = dict(height=10, width=10, channels_per_source={"sd": 6, "dino": 6},
                num_parts=3, noise_sigma=0.2)
    a = op.generate(op.SynthSpec(seed=1, **base))
    b = op.generate(op.SynthSpec(seed=2, **base))
    assert not np.array_equal(a.ref_features["sd"].data, b.ref_features["sd"].data)


@pytest.mark.parametrize("layout", ["stripes", "rectangles", "voronoi"])
def test_every_part_present_in_every_layout(layout):
    spec = op.SynthSpec(
        seed=4, height=14, width=14, channels_per_source={"sd": 8, "dino": 8},
        num_parts=5, layout=layout,
    )
    fx = op.generate(spec)
    assert set(np.unique(fx.ref_labels)) == set(range(5))
    assert set(np.unique(fx.query_labels)) == set(range(5))
    assert len(fx.part_names) == 5


def test_distractor_scores_strictly_dominate():
    spec = op.SynthSpec(
        seed=13, height=16, width=16,
        channels_per_source={"sd": 16, "dino": 12},
        num_parts=4, noise_sigma=0.05, distractor_channels=4,
    )
    fx = op.generate(spec)
    for source, fmap in fx.ref_features.items():
        d = spec.channels_per_source[source]
        informative = d - spec.distractor_channels
        for px in op.class_pixel_sets(fmap.data, fx.ref_masks):
            scores = op.channel_scores(px, "variance")
            assert scores[:informative].max() < scores[informative:].min()


def test_miou_decreases_weakly_with_noise():
    sigmas = (0.0, 0.3, 0.8)
    means = []
    for sigma in sigmas:
        vals = []
        for seed in range(5):
            spec = op.SynthSpec(
                seed=seed, height=16, width=16,
                channels_per_source={"sd": 8, "dino": 8},
                num_parts=3, noise_sigma=sigma,
            )
            vals.append(_pipeline_miou(op.generate(spec), use_selection=False))
        means.append(float(np.mean(vals)))
    assert means[0] >= means[1] >= means[2]
    assert means[0] == 1.0


def test_query_is_shifted_reference():
    fx = noiseless_fixture(seed=6, height=12, width=12)
    assert np.array_equal(
        fx.query_labels, np.roll(fx.ref_labels, (4, 4), axis=(0, 1))
    )


def test_guides_follow_labels():
    fx = noiseless_fixture(seed=6)
    from oiparts.palette import colorize_labels

    assert np.array_equal(fx.ref_guide.data, colorize_labels(fx.ref_labels))


def test_infeasible_specs_rejected():
    with pytest.raises(ValidationError, match="angle"):
        op.SynthSpec(seed=0, height=8, width=8, prototype_separation=math.pi * 0.75)
    with pytest.raises(ValidationError, match="informative"):
        op.SynthSpec(
            seed=0, height=8, width=8,
            channels_per_source={"sd": 4, "dino": 4},
            num_parts=3, distractor_channels=2,
        )
    with pytest.raises(ValidationError, match="distractor"):
        op.SynthSpec(
            seed=0, height=8, width=8,
            channels_per_source={"sd": 4, "dino": 4}, distractor_channels=4,
        )
    with pytest.raises(ValidationError):
        op.SynthSpec(seed=0, height=8, width=8, num_parts=1)


def test_prototypes_are_orthogonal_across_parts():
    fx = noiseless_fixture(seed=8, parts=4, channels=12)
    protos = {}
    for c in range(4):
        mask = fx.ref_labels == c
        protos[c] = fx.ref_features["sd"].data[mask][0]
    for a in range(4):
        assert np.linalg.norm(protos[a]) == pytest.approx(1.0, abs=1e-6)
        for b in range(a + 1, 4):
            assert float(protos[a] @ protos[b]) == pytest.approx(0.0, abs=1e-9)
