"""Dice / HD95 / sensitivity-specificity / parameter counting, against
brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsmoe import metrics, nn, tensor as T
from hsmoe.metrics import (
    EmptyMaskError,
    MetricError,
    UndefinedMetricError,
    count_parameters,
    dsc_per_class,
    hd95,
    mdsc,
    sensitivity_specificity,
)

from oracles import dice_naive, hd95_naive


def test_dsc_identical_masks():
    v = (T.rng(0).uniform(size=(4, 4, 4)) > 0.5).astype(int)
    assert dsc_per_class(v, v, 1) == 1.0


def test_dsc_disjoint_masks():
    a = np.zeros((3, 3, 3), dtype=int)
    b = np.zeros((3, 3, 3), dtype=int)
    a[0, 0, 0] = 1
    b[2, 2, 2] = 1
    assert dsc_per_class(a, b, 1) == 0.0


def test_dsc_counted_case():
    # |P|=4, |G|=4, |P∩G|=2 -> 0.5
    p = np.zeros((2, 2, 4), dtype=int)
    g = np.zeros((2, 2, 4), dtype=int)
    p.reshape(-1)[:4] = 1
    g.reshape(-1)[2:6] = 1
    assert dsc_per_class(p, g, 1) == 0.5


def test_dsc_empty_empty_is_one():
    z = np.zeros((2, 2, 2), dtype=int)
    assert dsc_per_class(z, z, 1) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(MetricError):
        dsc_per_class(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dsc_symmetry_and_range(seed):
    g = T.rng(seed)
    a = g.integers(0, 3, size=(3, 3, 3))
    b = g.integers(0, 3, size=(3, 3, 3))
    for c in range(3):
        d_ab = dsc_per_class(a, b, c)
        assert d_ab == dsc_per_class(b, a, c)
        assert 0.0 <= d_ab <= 1.0


def test_mdsc_perfect_and_half():
    v = T.rng(1).integers(0, 3, size=(4, 4, 4))
    assert mdsc(v, v, 3) == 1.0
    # one foreground class perfect, the other absent from pred entirely
    gt = np.zeros((2, 2, 2), dtype=int)
    gt.reshape(-1)[:2] = 1
    gt.reshape(-1)[2:4] = 2
    pred = np.where(gt == 2, 0, gt)
    assert mdsc(pred, gt, 3) == 0.5


def test_mdsc_matches_loop_oracle():
    g = T.rng(2)
    a = g.integers(0, 4, size=(4, 4, 4))
    b = g.integers(0, 4, size=(4, 4, 4))
    want = np.mean([dice_naive(a, b, c) for c in range(1, 4)])
    assert mdsc(a, b, 4) == want
    want_bg = np.mean([dice_naive(a, b, c) for c in range(0, 4)])
    assert mdsc(a, b, 4, include_background=True) == want_bg


def test_mdsc_rejects_out_of_range_ids():
    with pytest.raises(MetricError):
        mdsc(np.full((2, 2, 2), 5), np.zeros((2, 2, 2), dtype=int), 3)


# ---------------------------------------------------------------------------
# hd95


def test_hd95_identical_masks_zero():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[1:3, 1:3, 1:3] = True
    assert hd95(m, m) == 0.0


def test_hd95_two_voxels_axis_distance():
    a = np.zeros((5, 5, 5), dtype=bool)
    b = np.zeros((5, 5, 5), dtype=bool)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hd95(a, b) == 3.0


def test_hd95_respects_spacing():
    a = np.zeros((5, 3, 3), dtype=bool)
    b = np.zeros((5, 3, 3), dtype=bool)
    a[0, 1, 1] = True
    b[2, 1, 1] = True
    assert hd95(a, b, spacing=(2.5, 1.0, 1.0)) == 5.0


def test_hd95_empty_mask_raises():
    m = np.zeros((3, 3, 3), dtype=bool)
    full = np.ones((3, 3, 3), dtype=bool)
    with pytest.raises(EmptyMaskError):
        hd95(m, full)


def test_hd95_matches_bruteforce_oracle_randomized():
    g = T.rng(3)
    for _ in range(50):
        shape = tuple(int(g.integers(2, 6)) for _ in range(3))
        a = g.uniform(size=shape) > 0.6
        b = g.uniform(size=shape) > 0.6
        if not a.any() or not b.any():
            continue
        spacing = tuple(float(s) for s in g.uniform(0.5, 2.0, 3))
        assert hd95(a, b, spacing) == pytest.approx(hd95_naive(a, b, spacing), abs=1e-12)


def test_hd95_symmetric_by_construction():
    g = T.rng(4)
    a = g.uniform(size=(4, 4, 4)) > 0.5
    b = g.uniform(size=(4, 4, 4)) > 0.5
    if not (a.any() and b.any()):
        a[0, 0, 0] = b[1, 1, 1] = True
    assert hd95(a, b) == hd95(b, a)


# ---------------------------------------------------------------------------
# sensitivity / specificity


def test_sens_spec_perfect():
    assert sensitivity_specificity(["TP", "TP", "TN"]) == (1.0, 1.0)


def test_sens_spec_counted_case():
    labels = ["TP"] * 3 + ["FN"] + ["TN"] * 4 + ["FP"]
    sens, spec = sensitivity_specificity(labels)
    assert sens == 0.75
    assert spec == 0.8


def test_sens_spec_zero_denominator_raises():
    with pytest.raises(UndefinedMetricError):
        sensitivity_specificity(["TN", "FP"])  # no positives
    with pytest.raises(UndefinedMetricError):
        sensitivity_specificity(["TP", "FN"])  # no negatives


# ---------------------------------------------------------------------------
# parameter counting


def test_count_single_linear():
    lin = nn.Linear(3, 2, T.rng(5))
    assert count_parameters(lin) == 3 * 2 + 2


def test_count_tiny_routing_stage_closed_form():
    from hsmoe.config import StageConfig
    from hsmoe.routing import HierarchicalMoE

    d, E, S, r = 2, 2, 1, 2
    E2 = 2 * E
    layer = HierarchicalMoE(StageConfig(dim=d, num_experts=E, group_size=4,
                                        slots_per_expert=S, ffn_ratio=r), T.rng(6))
    ffn = (d * r * d + r * d) + (r * d * d + d)
    want = (E * S * d               # slot embeddings
            + (d * E + E)           # level-1 router
            + E * ffn               # level-1 experts
            + (d * E2 + E2)         # level-2 router
            + E2 * ffn)             # level-2 experts
    assert count_parameters(layer) == want
