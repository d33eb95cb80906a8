import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gcote.numeric import (
    GradientCheckError,
    check_gradients,
    group_distance,
    l2_norm,
    log_sigmoid,
    matvec,
    sigmoid,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matvec_matches_manual_sum():
    M = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    x = np.array([0.5, -1.0])
    assert matvec(M, x).tolist() == [sum(M[i, j] * x[j] for j in range(2)) for i in range(3)]


def test_matvec_dimension_mismatch():
    with pytest.raises(ValueError):
        matvec(np.eye(3), np.ones(2))


def test_l2_norm_pythagorean():
    assert l2_norm(np.array([3.0, 4.0])) == 5.0


@given(arrays(np.float64, 5, elements=finite), st.floats(-100, 100))
def test_l2_norm_is_homogeneous(x, c):
    assert l2_norm(c * x) == pytest.approx(abs(c) * l2_norm(x), rel=1e-9, abs=1e-9)


def test_group_distance_sum_and_zero_subgradient():
    diff = np.array([[3.0, 4.0], [0.0, 0.0]])
    dist, unit = group_distance(diff)
    assert dist == 5.0
    assert unit.tolist() == [[0.6, 0.8], [0.0, 0.0]]


def test_log_sigmoid_is_stable_at_extremes():
    assert log_sigmoid(800.0) == 0.0
    assert log_sigmoid(-800.0) == pytest.approx(-800.0)
    assert log_sigmoid(0.0) == pytest.approx(-math.log(2))
    assert sigmoid(0.0) == pytest.approx(0.5)


@settings(max_examples=50)
@given(finite)
def test_sigmoid_symmetry(x):
    assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-12)


def _quadratic(params):
    x = params["x"]
    return float(np.sum(x**3) + 2 * x[0] * x[1]), {"x": 3 * x**2 + 2 * np.array([x[1], x[0], 0.0])}


def test_check_gradients_accepts_correct_gradient():
    report = check_gradients(_quadratic, {"x": np.array([0.3, -1.2, 2.0])})
    assert report.passed, str(report)
    assert report.checked == 3


def test_check_gradients_rejects_wrong_gradient():
    def wrong(params):
        loss, grads = _quadratic(params)
        return loss, {"x": grads["x"] * 1.01}

    report = check_gradients(wrong, {"x": np.array([0.3, -1.2, 2.0])})
    assert not report.passed
    assert report.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_check_gradients_flags_nonfinite_loss():
    with pytest.raises(GradientCheckError):
        check_gradients(lambda p: (float("nan"), {"x": p["x"]}), {"x": np.ones(2)})


def test_check_gradients_flags_shape_mismatch():
    with pytest.raises(GradientCheckError):
        check_gradients(lambda p: (0.0, {"x": np.ones(3)}), {"x": np.ones(2)})


def test_check_gradients_samples_large_blocks():
    report = check_gradients(lambda p: (float(np.sum(p["x"] ** 2)), {"x": 2 * p["x"]}), {"x": np.ones(500)}, max_coords=20)
    assert report.checked == 20 and report.passed
