import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from vesselda.errors import EmptyReport, ShapeError
from vesselda.metrics import (aggregate, cldice, dice, format_pct, format_table, label_metrics, precision_recall,
                              skeletonize)

from oracles import (cldice_oracle, dice_oracle, precision_oracle, random_tube_mask, recall_oracle,
                     reference_thin)

masks16 = arrays(np.bool_, (16, 16))
EIGHT = np.ones((3, 3), dtype=bool)


def n_components(mask):
    return ndimage.label(mask, structure=EIGHT)[1]


def test_dice_examples():
    m = np.zeros((4, 4), bool)
    m[1, 1:3] = True
    assert dice(m, m) == 1.0
    other = np.zeros_like(m)
    other[3, 3] = True
    assert dice(m, other) == 0.0
    assert dice(np.zeros_like(m), np.zeros_like(m)) == 1.0


def test_dice_hand_enumerated_overlap():
    p = np.zeros(10, bool)
    g = np.zeros(10, bool)
    p[[0, 1, 2, 3]] = True
    g[[2, 3, 4]] = True
    assert dice(p, g) == pytest.approx(4 / 7, abs=1e-12)


def test_precision_recall_examples():
    p = np.zeros(10, bool)
    g = np.zeros(10, bool)
    p[[0, 1, 2]] = True
    g[[1, 2, 5, 6]] = True
    assert precision_recall(p, g) == pytest.approx((2 / 3, 0.5))
    assert precision_recall(g, g) == (1.0, 1.0)
    flags = []
    assert precision_recall(np.zeros(10, bool), g, flags) == (0.0, 0.0)
    assert flags == ["precision_undefined_empty_prediction"]


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        cldice(np.zeros((3, 3)), np.zeros((4, 3)))


def test_skeleton_line_unchanged():
    m = np.zeros((9, 9), bool)
    m[4, 1:8] = True
    assert np.array_equal(skeletonize(m), m)
    assert not skeletonize(np.zeros((5, 5), bool)).any()


def test_skeleton_of_disk_matches_reference_thinning():
    yy, xx = np.mgrid[0:11, 0:11]
    disk = (yy - 5) ** 2 + (xx - 5) ** 2 <= 3 ** 2  # a 7 px wide disk
    sk = skeletonize(disk)
    assert np.array_equal(sk, reference_thin(disk))
    assert 0 < sk.sum() <= 7
    assert not (sk & ~disk).any()
    assert n_components(sk) == 1


def test_skeleton_matches_reference_on_random_masks(rng):
    for _ in range(200):
        m = rng.random((12, 12)) < rng.uniform(0.2, 0.8)
        assert np.array_equal(skeletonize(m), reference_thin(m))


@given(masks16)
def test_skeleton_properties(m):
    sk = skeletonize(m)
    assert not (sk & ~m).any()
    assert n_components(sk) == n_components(m)
    assert np.array_equal(skeletonize(sk), sk)


def test_skeleton_stack():
    stack = np.zeros((2, 8, 8), bool)
    stack[0, 2:6, 2:6] = True
    out = skeletonize(stack)
    assert out.shape == stack.shape
    assert np.array_equal(out[0], skeletonize(stack[0]))


def test_cldice_examples():
    tube = np.zeros((16, 16), bool)
    tube[6:9, 2:14] = True
    assert cldice(tube, tube) == 1.0
    far = np.zeros_like(tube)
    far[0, 0:3] = True
    assert cldice(far, tube) == 0.0


def test_cldice_tubes_against_set_oracle(rng):
    for _ in range(30):
        p, g = random_tube_mask(rng), random_tube_mask(rng)
        sp, sg = skeletonize(p), skeletonize(g)
        assert cldice(p, g) == cldice_oracle(p, g, sp, sg)


@given(masks16, masks16)
def test_metric_symmetries_and_bounds(p, g):
    assert dice(p, g) == dice(g, p)
    prec, rec = precision_recall(p, g)
    rp, rr = precision_recall(g, p)
    if p.any() and g.any():
        assert prec == rr and rec == rp
    for v in (dice(p, g), prec, rec, cldice(p, g)):
        assert 0.0 <= v <= 1.0


@given(masks16)
def test_cldice_self_is_one(p):
    if p.any():
        assert cldice(p, p) == 1.0


def test_metrics_against_oracles_100_pairs(rng):
    for _ in range(100):
        p = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        g = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        assert abs(dice(p, g) - dice_oracle(p, g)) <= 1e-12
        prec, rec = precision_recall(p, g)
        assert abs(prec - precision_oracle(p, g)) <= 1e-12
        assert abs(rec - recall_oracle(p, g)) <= 1e-12
        assert abs(cldice(p, g) - cldice_oracle(p, g, reference_thin(p), reference_thin(g))) <= 1e-12


def test_label_metrics_restricts_vessels_to_brain():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:6, 2:6] = 1
    gt[3, 2:6] = 2
    pred = gt.copy()
    pred[0, 0] = 2  # outside the brain; ignored for the vessel class
    res = label_metrics(pred, gt)
    assert res["vessels"]["dice"] == 1.0
    assert res["brain"]["dice"] < 1.0


def test_aggregate_population_std():
    per = {"a": {"vessels": {"dice": 0.68}}, "b": {"vessels": {"dice": 0.72}}}
    rep = aggregate(per)
    s = rep.summary["vessels"]["dice"]
    assert s["mean"] == pytest.approx(0.70)
    assert s["std"] == pytest.approx(0.02)
    assert rep.std_definition == "population"
    single = aggregate({"a": {"vessels": {"dice": 0.5}}})
    assert single.summary["vessels"]["dice"]["std"] == 0.0
    with pytest.raises(EmptyReport):
        aggregate({})


def test_format_matches_table_style():
    assert format_pct(0.704, 0.024) == "70.4 ± 2.4"
    rep = aggregate({"a": {"vessels": {"dice": 0.704}}})
    assert "70.4 ± 0.0" in format_table(rep.summary)
