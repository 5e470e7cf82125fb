from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oiparts as op
from oiparts.errors import DegenerateCenterWarning, ValidationError

import oracles
from conftest import make_masks


def pixel_set(in_class, out_class, part=1, name="part"):
    return op.ClassPixelSet(
        part_index=part,
        in_class=np.asarray(in_class, dtype=np.float64),
        out_class=np.asarray(out_class, dtype=np.float64),
        part_name=name,
    )


# ---------------------------------------------------------------------------
# channel scores


def test_constant_channel_scores_zero():
    px = pixel_set([[1.0], [1.0], [1.0]], [[5.0], [5.0]])
    assert op.channel_scores(px)[0] == 0.0


def test_hand_population_variance():
    px = pixel_set([[1.0], [2.0], [3.0]], [[4.0], [4.0]])
    assert op.channel_scores(px)[0] == pytest.approx(2.0 / 3.0)


def test_hand_two_channel_scores():
    px = pixel_set([[1.0, 1.0], [1.0, 2.0]], [[0.0, 0.0], [0.0, 1.0]])
    assert op.channel_scores(px).tolist() == pytest.approx([0.0, 0.5])


def test_empty_in_class_names_part():
    px = pixel_set(np.empty((0, 2)), [[0.0, 0.0]], name="plate")
    with pytest.raises(ValidationError, match="plate"):
        op.channel_scores(px)


def test_variance_scaling_is_quadratic(rng):
    in_class = rng.standard_normal((20, 4))
    out_class = rng.standard_normal((30, 4))
    base = op.channel_scores(pixel_set(in_class, out_class))
    scaled_in = in_class.copy()
    scaled_out = out_class.copy()
    scaled_in[:, 2] *= 3.0
    scaled_out[:, 2] *= 3.0
    scaled = op.channel_scores(pixel_set(scaled_in, scaled_out))
    assert scaled[2] == pytest.approx(9.0 * base[2])
    assert scaled[[0, 1, 3]].tolist() == pytest.approx(base[[0, 1, 3]].tolist())


def test_inflating_a_non_selected_channel_changes_nothing(rng):
    in_class = rng.standard_normal((20, 6))
    out_class = rng.standard_normal((25, 6))
    k = 2
    base = op.select_top_k(op.channel_scores(pixel_set(in_class, out_class)), k)
    loser = next(c for c in range(6) if c not in base)
    in_class[:, loser] *= 10.0
    out_class[:, loser] *= 10.0
    inflated = op.select_top_k(op.channel_scores(pixel_set(in_class, out_class)), k)
    assert inflated == base


@pytest.mark.parametrize("metric", ["kl", "js"])
def test_divergence_metrics_separate_separable_channels(rng, metric):
    # channel 0 separates the classes, channel 1 is shared noise
    in_class = np.column_stack([rng.normal(2.0, 0.1, 80), rng.normal(0, 1, 80)])
    out_class = np.column_stack([rng.normal(-2.0, 0.1, 80), rng.normal(0, 1, 80)])
    scores = op.channel_scores(pixel_set(in_class, out_class), metric)
    assert scores[0] > scores[1]
    assert op.metric_direction(metric) == "highest"


def test_cosine_metric_prefers_sign_consistency(rng):
    consistent = np.abs(rng.standard_normal(50)) + 0.1
    mixed = rng.standard_normal(50)
    in_class = np.column_stack([consistent, mixed])
    scores = op.channel_scores(pixel_set(in_class, rng.standard_normal((50, 2))), "cosine")
    assert scores[0] < scores[1]


# ---------------------------------------------------------------------------
# top-k ranking


def test_hand_ranking():
    assert op.select_top_k(np.array([0.5, 0.1, 0.3]), 2, "lowest") == (1, 2)


def test_full_set():
    assert op.select_top_k(np.array([3.0, 1.0, 2.0]), 3, "lowest") == (0, 1, 2)


def test_tie_break_prefers_lower_index():
    assert op.select_top_k(np.zeros(4), 2, "lowest") == (0, 1)
    assert op.select_top_k(np.zeros(4), 2, "highest") == (0, 1)


def test_k_out_of_range():
    with pytest.raises(ValidationError):
        op.select_top_k(np.ones(3), 0, "lowest")
    with pytest.raises(ValidationError):
        op.select_top_k(np.ones(3), 4, "lowest")


def test_top_k_matches_exhaustive_minimizer(rng):
    for _ in range(10):
        d = int(rng.integers(3, 13))
        k = int(rng.integers(1, min(d, 6) + 1))
        in_class = rng.standard_normal((12, d))
        out_class = rng.standard_normal((18, d))
        got = op.select_top_k(
            op.channel_scores(pixel_set(in_class, out_class)), k, "lowest"
        )
        assert got == oracles.exhaustive_min_dispersion_subset(in_class, out_class, k)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 10))
def test_permutation_equivariance(seed, d):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(d)
    k = int(rng.integers(1, d + 1))
    perm = rng.permutation(d)
    base = op.select_top_k(scores, k)
    permuted = op.select_top_k(scores[perm], k)
    assert sorted(perm[list(permuted)]) == list(base)


# ---------------------------------------------------------------------------
# K sweep


def _separable_px(n=20, d=4):
    # part pixels sit at +e0, the rest at -e0: one channel suffices
    in_class = np.zeros((n, d))
    in_class[:, 0] = 1.0
    out_class = np.zeros((n + 8, d))
    out_class[:, 0] = -1.0
    return pixel_set(in_class, out_class)


def test_separable_case_chooses_k1():
    result = op.sweep_k(_separable_px(), k_grid=range(1, 5))
    assert result.chosen_k == 1
    assert result.accuracies[0] == 1.0
    assert result.channels == (0,)


def test_full_grid_only():
    px = _separable_px(d=5)
    result = op.sweep_k(px, k_grid=[5])
    assert result.channels == (0, 1, 2, 3, 4)
    assert result.accuracies[0] == oracles.cluster_iou(
        px.in_class, px.out_class, range(5)
    )


def _sweep_fixture(seed):
    """Signed-prototype fixture in the regime where the greedy sweep is optimal."""
    rng = np.random.default_rng(seed)
    n_in, n_out, d = 48, 72, 12
    n_informative = int(rng.integers(2, 6))
    informative = rng.permutation(d)[:n_informative]
    sigma = float(rng.uniform(0.02, 0.05))
    in_class = rng.normal(0.0, sigma, (n_in, d))
    out_class = rng.normal(0.0, sigma, (n_out, d))
    distractors = np.setdiff1d(np.arange(d), informative)
    in_class[:, distractors] += rng.normal(0.0, 1.0, (n_in, distractors.size))
    out_class[:, distractors] += rng.normal(0.0, 1.0, (n_out, distractors.size))
    in_class[:, informative] += 1.0
    out_class[:, informative] -= 1.0
    return pixel_set(in_class, out_class)


def test_sweep_matches_brute_force_over_all_subsets():
    px = _sweep_fixture(0)
    result = op.sweep_k(px, k_grid=range(1, 13))
    best_k, best_channels = oracles.exhaustive_best_sweep(px.in_class, px.out_class)
    assert (result.chosen_k, result.channels) == (best_k, best_channels)


def test_sweep_never_loses_to_full_set(rng):
    for seed in range(5):
        px = _sweep_fixture(seed)
        grid = op.default_k_grid(px.channels)
        result = op.sweep_k(px, grid)
        full_accuracy = result.accuracies[result.k_grid.index(px.channels)]
        best = result.accuracies[result.k_grid.index(result.chosen_k)]
        assert best >= full_accuracy


def test_degenerate_center_falls_back_to_euclidean():
    # out-class mean is exactly zero on every channel
    px = pixel_set([[1.0, 1.0]] * 4, [[1.0, -1.0], [-1.0, 1.0]] * 3)
    with pytest.warns(DegenerateCenterWarning):
        result = op.sweep_k(px, k_grid=[2])
    assert result.accuracies[0] == 1.0


def test_bad_grid_rejected():
    px = _separable_px(d=3)
    with pytest.raises(ValidationError):
        op.sweep_k(px, k_grid=[])
    with pytest.raises(ValidationError):
        op.sweep_k(px, k_grid=[4])


def test_default_k_grid():
    assert op.default_k_grid(8) == (1, 2, 4, 8)
    assert op.default_k_grid(12) == (1, 2, 4, 8, 12)
    assert op.default_k_grid(1) == (1,)


# ---------------------------------------------------------------------------
# whole-example selection


def _two_source_fixture():
    """Source sd carries all the class signal; dino is pure shared noise."""
    rng = np.random.default_rng(5)
    h = w = 8
    labels = (np.arange(h * w).reshape(h, w) // (h * w // 2)).clip(0, 1)
    masks = make_masks(labels, ["BG", "part"])
    sd = np.zeros((h, w, 4), dtype=np.float32)
    sd[..., 0] = np.where(labels == 1, 1.0, -1.0)
    sd[..., 1:] = rng.normal(0, 0.01, (h, w, 3))
    dino = rng.normal(0, 1.0, (h, w, 6)).astype(np.float32)
    fused = op.fuse(op.FeatureMap(sd, "sd"), op.FeatureMap(dino, "dino"))
    return fused, masks


def test_signal_source_gets_small_k():
    fused, masks = _two_source_fixture()
    record = op.select_for_example(fused, masks, op.SelectionConfig())
    for part in record.parts:
        by_source = {s.source: s for s in part.per_source}
        assert set(by_source) == {"sd", "dino"}
        assert by_source["sd"].k == 1
        assert by_source["sd"].sweep_accuracy == 1.0
        assert 1 <= by_source["dino"].k <= 6
        # per-source brute force agrees with the sweep on the signal source
        sub = fused.span_data("sd")
        px = op.class_pixel_sets(sub, masks)[part_index := masks.part_names.index(part.name)]
        best_k, best_channels = oracles.exhaustive_best_sweep(px.in_class, px.out_class)
        assert (by_source["sd"].k, by_source["sd"].channels) == (best_k, best_channels)


def test_record_shape_two_parts_two_sources():
    fused, masks = _two_source_fixture()
    record = op.select_for_example(fused, masks)
    assert len(record.parts) == 2
    assert all(len(p.per_source) == 2 for p in record.parts)


def test_selection_is_deterministic(tmp_path):
    fused, masks = _two_source_fixture()
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    op.save_selection(op.select_for_example(fused, masks), a)
    op.save_selection(op.select_for_example(fused, masks), b)
    assert a.read_bytes() == b.read_bytes()


def test_empty_part_names_the_part(rng):
    sd = op.FeatureMap(rng.standard_normal((4, 4, 3)).astype(np.float32), "sd")
    dino = op.FeatureMap(rng.standard_normal((4, 4, 3)).astype(np.float32), "dino")
    fused = op.fuse(sd, dino)
    planes = np.zeros((2, 4, 4), dtype=np.float32)
    planes[0] = 1.0  # "ghost" never wins an argmax
    masks = op.PartMaskSet(planes, ("BG", "ghost"))
    with pytest.raises(ValidationError, match="ghost"):
        op.select_for_example(fused, masks)
