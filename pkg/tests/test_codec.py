from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcooper.evalkit.codec import LossConfig, bce, delta_decode, delta_encode, loss, smooth_l1
from fcooper.geom import Box3D

boxes = st.builds(
    Box3D, st.floats(-80, 80), st.floats(-80, 80), st.floats(-3, 3),
    st.floats(0.1, 10), st.floats(0.1, 5), st.floats(0.1, 4), st.floats(-3.1, 3.1),
)


def test_delta_examples():
    p = Box3D(0, 0, 0, 4, 2, 1.5, 0)
    assert np.array_equal(delta_encode(p, p), np.zeros(7))
    d = delta_encode(p, Box3D(1, 1, 0, 4, 2, 1.5, 0))
    assert d[0] == pytest.approx(1 / math.sqrt(20), abs=1e-6) and d[1] == pytest.approx(0.223607, abs=1e-6)
    assert np.allclose(d[2:], 0)
    doubled = delta_decode(p, [0, 0, 0, math.log(2), 0, 0, 0])
    assert doubled.l == pytest.approx(8.0, rel=1e-15)
    with pytest.raises(ValueError):
        delta_encode(p, SimpleNamespace(cx=0, cy=0, cz=0, l=0.0, w=1, h=1, yaw=0))


@given(boxes, boxes)
def test_delta_round_trip(p, g):
    back = delta_decode(p, delta_encode(p, g))
    assert np.allclose(back.as_array(), g.as_array(), rtol=1e-6, atol=1e-9)


def test_smooth_l1_values_and_kink():
    assert smooth_l1(0.5) == pytest.approx(0.125)
    assert smooth_l1(2.0) == pytest.approx(1.5)
    assert smooth_l1(-2.0) == pytest.approx(1.5)
    h = 1e-7
    assert smooth_l1(1 - h) == pytest.approx(smooth_l1(1 + h), abs=1e-6)
    left = (smooth_l1(1.0) - smooth_l1(1 - h)) / h
    right = (smooth_l1(1 + h) - smooth_l1(1.0)) / h
    assert left == pytest.approx(1.0, abs=1e-5) and right == pytest.approx(1.0, abs=1e-5)


def test_bce_and_loss_spot_values():
    assert bce(0.5, 0) == pytest.approx(math.log(2))
    assert loss([], [0.5], np.zeros((0, 7)), np.zeros((0, 7))) == pytest.approx(0.6931, abs=1e-4)
    assert loss([1 - 1e-12], [1e-12], np.ones((1, 7)), np.ones((1, 7))) < 1e-6
    assert np.isfinite(bce(0.0, 1)) and np.isfinite(bce(1.0, 0))


def test_loss_weights_and_errors():
    base = loss([0.7], [0.2], np.zeros((1, 7)), np.zeros((1, 7)))
    heavy = loss([0.7], [0.2], np.zeros((1, 7)), np.zeros((1, 7)), LossConfig(alpha=2.0, beta=1.0))
    assert heavy - base == pytest.approx(-math.log(0.8))
    with pytest.raises(ValueError):
        loss([], [0.3], np.zeros((2, 7)), np.zeros((2, 7)))
    with pytest.raises(ValueError):
        loss([0.5], [], np.zeros((1, 7)), np.zeros((2, 7)))
    with pytest.raises(ValueError):
        LossConfig(alpha=0)


def naive_loss(pos, neg, pred, truth, a=1.0, b=1.0):
    total = 0.0
    if neg:
        total += a * sum(-math.log(1 - min(max(p, 1e-7), 1 - 1e-7)) for p in neg) / len(neg)
    if pos:
        total += b * sum(-math.log(min(max(p, 1e-7), 1 - 1e-7)) for p in pos) / len(pos)
        reg = 0.0
        for r_p, r_t in zip(pred, truth):
            for x in np.asarray(r_p) - np.asarray(r_t):
                reg += 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5
        total += reg / len(pos)
    return total


def test_loss_matches_scalar_oracle_and_is_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        npos, nneg = int(rng.integers(0, 6)), int(rng.integers(0, 6))
        pos, neg = rng.random(npos).tolist(), rng.random(nneg).tolist()
        pred, truth = rng.standard_normal((npos, 7)) * 2, rng.standard_normal((npos, 7)) * 2
        a, b = rng.uniform(0.1, 3, 2)
        v = loss(pos, neg, pred, truth, LossConfig(a, b))
        assert v >= 0
        assert v == pytest.approx(naive_loss(pos, neg, pred, truth, a, b), rel=1e-9, abs=1e-12)
