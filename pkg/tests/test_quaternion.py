import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffrope import quaternion as Q

finite = st.floats(-10, 10, allow_nan=False)
vec4 = arrays(float, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
vec3 = arrays(float, 3, elements=finite)


def unit(q):
    return q / np.linalg.norm(q)


def test_identity_is_neutral(rng):
    q = unit(rng.normal(size=4))
    assert np.allclose(Q.quat_multiply(Q.IDENTITY, q), q)
    assert np.allclose(Q.quat_multiply(q, Q.IDENTITY), q)


def test_i_times_j_is_k():
    i = np.array([0.0, 1, 0, 0])
    j = np.array([0.0, 0, 1, 0])
    assert np.array_equal(Q.quat_multiply(i, j), [0.0, 0, 0, 1])


@given(vec4, vec4)
def test_product_matches_composed_rotation_matrices(a, b):
    a, b = unit(a), unit(b)
    lhs = Q.rotation_matrix(Q.quat_multiply(a, b))
    rhs = Q.rotation_matrix(a) @ Q.rotation_matrix(b)
    assert np.allclose(lhs, rhs, atol=1e-12)


@given(vec4, vec4, vec4)
def test_multiply_is_associative(a, b, c):
    lhs = Q.quat_multiply(Q.quat_multiply(a, b), c)
    rhs = Q.quat_multiply(a, Q.quat_multiply(b, c))
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


@given(vec4)
def test_conjugate_properties(q):
    q = unit(q)
    assert np.array_equal(Q.quat_conjugate(Q.quat_conjugate(q)), q)
    assert np.allclose(Q.quat_multiply(q, Q.quat_conjugate(q)), Q.IDENTITY, atol=1e-12)


def test_conjugate_of_identity():
    assert np.array_equal(Q.quat_conjugate(Q.IDENTITY), Q.IDENTITY)


def test_rotate_basis3_examples():
    assert np.allclose(Q.rotate_basis3(Q.IDENTITY), [0, 0, 1])
    qx = Q.axis_angle([1, 0, 0], np.pi / 2)
    assert np.allclose(Q.rotate_basis3(qx), [0, -1, 0], atol=1e-15)


@given(vec4)
def test_rotate_basis3_matches_sandwich_product(q):
    q = unit(q)
    sandwich = Q.quat_multiply(Q.quat_multiply(q, Q.pure(Q.E3)), Q.quat_conjugate(q))[1:]
    r = Q.rotate_basis3(q)
    assert np.allclose(r, sandwich, atol=1e-12)
    assert abs(np.linalg.norm(r) - 1.0) <= 1e-12


def test_rotate_basis3_rejects_non_unit():
    with pytest.raises(ValueError):
        Q.rotate_basis3(np.array([1.0, 0.1, 0, 0]))


def test_skew_examples():
    assert np.array_equal(Q.skew(np.zeros(3)), np.zeros((3, 3)))
    assert np.array_equal(Q.skew(Q.E3) @ Q.E1, Q.E2)


@given(vec3, vec3)
def test_skew_matches_cross(v, u):
    assert np.allclose(Q.skew(v) @ u, np.cross(v, u), atol=1e-12)
    assert np.array_equal(Q.skew(v).T, -Q.skew(v))


@settings(max_examples=50)
@given(vec3, vec3)
def test_from_two_vectors(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    q = Q.from_two_vectors(a, b)
    assert np.allclose(Q.rotate(q, unit(a)), unit(b), atol=1e-9)


def test_from_two_vectors_antiparallel():
    q = Q.from_two_vectors(Q.E3, -Q.E3)
    assert np.allclose(Q.rotate_basis3(q), -Q.E3)
