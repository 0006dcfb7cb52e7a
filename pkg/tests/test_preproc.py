import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vesselda.errors import DegenerateInput, InvalidLabel
from vesselda.preproc import (PreprocConfig, Volume, clip_normalize, combine_masks, one_hot, pad_crop,
                              preprocess_volume, resample, standardize)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


def test_standardize_two_values():
    data = np.array([[0.0, 2.0], [0.0, 2.0]])
    out = standardize(Volume(data, (1, 1))).data
    assert np.allclose(out, [[-1, 1], [-1, 1]], atol=1e-12)


@given(arrays(np.float64, (4, 5, 3), elements=finite))
def test_standardize_moments_and_idempotence(data):
    if data.std() < 1e-6 * max(1.0, np.abs(data).max()):
        return
    once = standardize(Volume(data, (1, 1, 1)))
    assert abs(once.data.mean()) < 1e-6
    assert abs(once.data.std() - 1) < 1e-6
    twice = standardize(once)
    assert np.allclose(twice.data, once.data, atol=1e-6)


def test_standardize_constant_raises():
    with pytest.raises(DegenerateInput):
        standardize(Volume(np.full((3, 3), 7.0), (1, 1)))


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)), (1, 0))
    with pytest.raises(ValueError):
        Volume(np.array([[np.nan, 1.0]]), (1, 1))


def test_resample_identity_and_constant(rng):
    data = rng.normal(size=(5, 6, 7))
    vol = Volume(data, (0.5, 0.5, 0.5))
    assert np.array_equal(resample(vol, 0.5).data, data)
    const = resample(Volume(np.full((4, 4), 3.25), (1.0, 0.7)), 0.5).data
    assert np.allclose(const, 3.25)


def test_resample_linear_ramp_exact():
    a, b = 1.7, -0.3
    x = np.arange(6) * 1.0
    data = np.tile(a * x + b, (3, 1))  # ramp along axis 1, spacing 1 mm
    out = resample(Volume(data, (1.0, 1.0)), (1.0, 0.5))
    coords = np.arange(out.data.shape[1]) * 0.5
    assert out.data.shape == (3, 11)
    assert np.allclose(out.data, a * coords + b, atol=1e-12)


def test_resample_preserves_extent():
    vol = Volume(np.zeros((10, 7)), (0.8, 1.3))
    out = resample(vol, 0.5)
    for n_in, s_in, n_out in zip(vol.data.shape, vol.spacing_mm, out.data.shape):
        assert abs((n_in - 1) * s_in - (n_out - 1) * 0.5) <= 0.5


def test_clip_normalize_full_range():
    img = np.array([2.0, 4.0, 6.0])
    assert np.allclose(clip_normalize(img, 0, 100), [-1, 0, 1])


def test_clip_normalize_percentile_example():
    img = np.arange(100, dtype=np.float64)
    out = clip_normalize(img, 1, 99)
    srt = np.sort(img)
    # brute-force linear-interpolated percentiles on the sorted array
    def pct(q):
        pos = q / 100 * (len(srt) - 1)
        lo = int(np.floor(pos))
        return srt[lo] + (pos - lo) * (srt[min(lo + 1, len(srt) - 1)] - srt[lo])
    lo, hi = pct(1), pct(99)
    assert (lo, hi) == pytest.approx((0.99, 98.01))
    assert out[0] == -1.0
    assert out[50] == pytest.approx((50 - lo) / (hi - lo) * 2 - 1, abs=1e-12)
    assert out[50] == pytest.approx(0.0102, abs=2e-4)
    assert out[99] == 1.0


def test_clip_normalize_degenerate_logs(caplog):
    with caplog.at_level(logging.WARNING):
        out = clip_normalize(np.full((3, 3), 5.0))
    assert np.array_equal(out, np.zeros((3, 3)))
    assert "degenerate" in caplog.text


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=finite))
def test_clip_normalize_range(img):
    out = clip_normalize(img)
    assert out.min() >= -1 and out.max() <= 1


def test_pad_crop_examples():
    size = 8
    img = np.arange(64.0).reshape(8, 8)
    assert np.array_equal(pad_crop(img, size), img)
    short = np.ones((6, 8))
    out = pad_crop(short, size)
    assert np.all(out[0] == -1) and np.all(out[-1] == -1) and np.all(out[1:-1] == 1)
    big = np.arange(12 * 14.0).reshape(12, 14)
    out = pad_crop(big, size)
    assert np.array_equal(out, big[2:10, 3:11])


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 16))
def test_pad_crop_shape(h, w, size):
    assert pad_crop(np.zeros((h, w)), size).shape == (size, size)


def test_one_hot_examples():
    bg = one_hot(np.zeros((3, 3), int))
    assert bg[0].all() and not bg[1:].any()
    lab = np.zeros((3, 3), int)
    lab[1, 1] = 2
    assert tuple(one_hot(lab)[:, 1, 1]) == (0, 0, 1)
    with pytest.raises(InvalidLabel):
        one_hot(np.array([[3]]))
    with pytest.raises(InvalidLabel):
        one_hot(np.array([[-1]]))


@given(arrays(np.int64, (5, 6), elements=st.integers(0, 2)))
def test_one_hot_partition_and_roundtrip(lab):
    oh = one_hot(lab)
    assert np.array_equal(oh.sum(0), np.ones(lab.shape))
    assert set(np.unique(oh)) <= {0.0, 1.0}
    assert np.array_equal(oh.argmax(0), lab)


def test_combine_masks_precedence():
    brain = np.array([[1, 1, 0]], bool)
    vessel = np.array([[0, 1, 0]], bool)
    assert combine_masks(brain, vessel).tolist() == [[1, 2, 0]]


def test_preprocess_volume_shapes(rng):
    img = rng.normal(size=(3, 20, 30)) + 5
    brain = np.zeros(img.shape, bool)
    brain[:, 5:15, 5:25] = True
    vessel = brain & (rng.random(img.shape) < 0.1)
    cfg = PreprocConfig(size=16)
    x, y = preprocess_volume(img, (0.5, 0.5, 0.5), cfg, brain, vessel)
    assert x.shape == y.shape == (3, 16, 16)
    assert x.min() >= -1 and x.max() <= 1
    assert set(np.unique(y)) <= {0, 1, 2}
