import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumeplace.plume import (NoiseModel, PlumeParams, Source, SourceField, WindSample, forward_jacobian,
                              forward_matrix, kernel, kernel_grad, kernel_pair_grad, kernel_values, observe)


def _manual(s, x, H, w, u, K, factor=True):
    d = np.asarray(s, float) - x
    rpar = d @ w
    if rpar <= 1e-9:
        return 0.0
    rperp2 = d @ d - rpar**2
    f = u if factor else 1.0
    return np.exp(-f * (rperp2 + H**2) / (4 * K * rpar)) / (2 * np.pi * K * rpar)


def test_unit_downwind_value():
    # one unit downwind with no offset and no stack height: 1 / (2 pi)
    p = PlumeParams(1.0)
    val = kernel(Source([0.0, 0.0], 0.0), [1.0, 0.0], WindSample([1.0, 0.0], 1.0), p)
    np.testing.assert_allclose(val, 1 / (2 * np.pi), rtol=1e-14)
    np.testing.assert_allclose(val, 0.159155, atol=1e-6)


def test_upwind_and_crosswind_are_zero():
    p = PlumeParams(1.0)
    w = WindSample([1.0, 0.0], 2.0)
    src = Source([0.0, 0.0], 1.0)
    assert kernel(src, [-3.0, 0.0], w, p) == 0.0
    assert kernel(src, [0.0, 5.0], w, p) == 0.0
    np.testing.assert_array_equal(kernel_grad(src, [-3.0, 1.0], w, p), 0.0)


def test_speed_factor_switch():
    w = WindSample([0.0, -1.0], 3.0)
    src = Source([1.0, 5.0], 2.0)
    s = np.array([2.0, -4.0])
    on = kernel(src, s, w, PlumeParams(0.7, True))
    off = kernel(src, s, w, PlumeParams(0.7, False))
    np.testing.assert_allclose(on, _manual(s, src.position, 2.0, w.direction, 3.0, 0.7), rtol=1e-13)
    np.testing.assert_allclose(off, _manual(s, src.position, 2.0, w.direction, 3.0, 0.7, False), rtol=1e-13)
    assert on < off


def test_peak_along_downwind_ray():
    # maximiser of exp(-uH^2/(4Kr))/r is r = uH^2/(4K)
    K, u, H = 0.5, 2.0, 3.0
    p = PlumeParams(K)
    w = WindSample([1.0, 0.0], u)
    src = Source([0.0, 0.0], H)
    r = np.linspace(0.5, 40, 20001)
    vals = [kernel(src, [ri, 0.0], w, p) for ri in r]
    np.testing.assert_allclose(r[int(np.argmax(vals))], u * H**2 / (4 * K), atol=5e-3)


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0, 2 * np.pi), st.floats(0.5, 3), st.floats(0, 3))
def test_gradient_matches_central_differences(sx, sy, ang, u, H):
    p = PlumeParams(1.3)
    w = WindSample.from_angle(ang, u)
    src = Source([0.5, -1.0], H)
    s = np.array([sx, sy])
    rpar = (s - src.position) @ w.direction
    if rpar < 0.5:
        return
    h = 1e-6
    fd = np.array([(kernel(src, s + h * e, w, p) - kernel(src, s - h * e, w, p)) / (2 * h) for e in np.eye(2)])
    g = kernel_grad(src, s, w, p)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-10)


def test_pair_gradient_is_product_rule():
    p = PlumeParams(1.0)
    w = WindSample.from_angle(-1.2, 1.5)
    a, b = Source([0.0, 10.0], 1.0), Source([3.0, 8.0], 0.5)
    s = np.array([2.0, -5.0])
    expected = kernel_grad(a, s, w, p) * kernel(b, s, w, p) + kernel(a, s, w, p) * kernel_grad(b, s, w, p)
    np.testing.assert_allclose(kernel_pair_grad(a, b, s, w, p), expected, rtol=1e-10)


def test_forward_matrix_matches_scalar_kernel(field3, params):
    w = WindSample.from_angle(-np.pi / 2, 1.7)
    sensors = np.array([[-8.0, 0.0], [1.0, -6.0], [9.0, 2.0]])
    F = forward_matrix(field3, sensors, w, params)
    ref = np.array([[kernel(field3.source(j), s, w, params) for j in range(3)] for s in sensors])
    np.testing.assert_allclose(F, ref, rtol=1e-14)
    F2, dF = forward_jacobian(field3, sensors, w, params)
    np.testing.assert_array_equal(F, F2)
    assert dF.shape == (3, 3, 2)


def test_batched_kernel_broadcasts(field3, params, rng):
    dirs = rng.standard_normal((4, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    speeds = rng.uniform(1, 2, 4)
    sensors = rng.uniform(-20, 20, (2, 2))
    A = kernel_values(field3.positions, field3.heights, sensors, dirs, speeds, params)
    for b in range(4):
        np.testing.assert_allclose(A[b], forward_matrix(field3, sensors, WindSample(dirs[b], speeds[b]), params))


def test_validation():
    with pytest.raises(ValueError):
        PlumeParams(0.0)
    with pytest.raises(ValueError):
        WindSample([1.0, 1.0], 1.0)
    with pytest.raises(ValueError):
        WindSample([1.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        NoiseModel(0.0)
    with pytest.raises(ValueError):
        Source([0, 0], -1.0)
    with pytest.raises(ValueError):
        observe(np.eye(2), np.array([1.0, -1.0]), NoiseModel(1.0), np.random.default_rng(0))


def test_wind_vector_roundtrip():
    w = WindSample.from_vector([0.0, -5.0])
    np.testing.assert_allclose(w.direction, [0.0, -1.0])
    assert w.speed == 5.0
    np.testing.assert_allclose(w.vector, [0.0, -5.0])


def test_observe_noise_statistics(rng):
    F = np.array([[1.0, 2.0]])
    obs = np.array([observe(F, [1.0, 1.0], NoiseModel(0.5), rng)[0] for _ in range(20000)])
    np.testing.assert_allclose(obs.mean(), 3.0, atol=0.02)
    np.testing.assert_allclose(obs.std(), 0.5, atol=0.01)


def test_for_domain_eps():
    p = PlumeParams.for_domain(1.0, [0, 0], [3, 4])
    np.testing.assert_allclose(p.downwind_eps, 5e-6)


def test_sourcefield_heights_broadcast():
    f = SourceField(np.zeros((3, 2)), 2.0)
    np.testing.assert_array_equal(f.heights, [2.0, 2.0, 2.0])
    assert len(f) == 3
