import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrope import autodiff as ad
from diffrope import quaternion as Q


def grad_of(fn, *xs):
    tape = ad.Tape()
    leaves = [tape.leaf(x) for x in xs]
    g = ad.backward(fn(*leaves))
    return [g[v] for v in leaves]


def check_fd(fn, x, rtol=1e-6):
    (g,) = grad_of(fn, x)
    fd = ad.finite_difference(lambda z: float(fn(z)), x)
    assert np.allclose(g, fd, rtol=rtol, atol=1e-8), (g, fd)


def test_square():
    (g,) = grad_of(lambda a: a * a, 3.0)
    assert g == 6.0


def test_product_rule():
    ga, gb = grad_of(lambda a, b: a * b, 2.0, 5.0)
    assert (ga, gb) == (5.0, 2.0)


def test_unused_leaf_and_constant_loss():
    tape = ad.Tape()
    a, b = tape.leaf(1.0), tape.leaf(2.0)
    g = ad.backward(a * 3.0)
    assert g[b] == 0.0
    c = ad.Tape().leaf(np.ones(3))
    g = ad.backward(ad.sum(c * 0.0))
    assert np.array_equal(g[c], np.zeros(3))


def test_leaf_on_finalized_tape_raises():
    tape = ad.Tape()
    x = tape.leaf(1.0)
    ad.backward(x * x)
    with pytest.raises(ad.TapeError):
        tape.leaf(2.0)


def test_backward_needs_a_taped_loss():
    with pytest.raises(ad.TapeError):
        ad.backward(3.0)


def test_backward_is_repeatable():
    tape = ad.Tape()
    x = tape.leaf(np.array([0.3, -1.2, 2.0]))
    loss = ad.sum(ad.sqrt(x * x + 1.0) * ad.clip(x, -1, 1))
    g1, g2 = ad.backward(loss)[x], ad.backward(loss)[x]
    assert np.array_equal(g1, g2)


def test_rotation_then_norm_matches_fd(rng):
    v = rng.normal(size=3)
    q = rng.normal(size=4)
    check_fd(lambda z: ad.norm(ad.qrotate(z, v) + 0.3), q)
    check_fd(lambda z: ad.norm(ad.qrotate(q, z) - 1.0), v)


ELEMENTARY = {
    "add": lambda a, b: ad.sum((a + b) ** 2),
    "mul": lambda a, b: ad.sum(a * b * a),
    "div": lambda a, b: ad.sum(a / (b * b + 1.0)),
    "dot": lambda a, b: ad.sum(ad.dot(a, b) ** 2),
    "cross": lambda a, b: ad.sum(ad.cross(a, b) * a),
    "qmul": lambda a, b: ad.sum(ad.qmul(ad.concatenate([a, b[:1]]), ad.concatenate([b, a[:1]])) ** 2),
    "matmul": lambda a, b: ad.sum(ad.matmul(ad.reshape(ad.stack([a, b]), (2, 3)), b) ** 2),
    "norm": lambda a, b: ad.norm(a - b),
    "where": lambda a, b: ad.sum(ad.where(np.array([True, False, True]), a, b) * a),
    "getitem": lambda a, b: ad.sum(a[np.array([0, 2, 2])] * b[1]),
    "pad": lambda a, b: ad.sum(ad.pad_rows(a * b, 1, 2) * np.arange(6.0)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTARY))
def test_elementary_ops_match_fd(name, rng):
    fn = ELEMENTARY[name]
    a, b = rng.normal(size=3), rng.normal(size=3)
    check_fd(lambda z: fn(z, b), a)
    check_fd(lambda z: fn(a, z), b)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_tridiagonal_solve_value_and_gradient(n, seed):
    rng = np.random.default_rng(seed)
    lower = rng.uniform(-1, 1, n)
    upper = rng.uniform(-1, 1, n)
    diag = 3.0 + rng.uniform(0, 1, n)  # diagonally dominant
    rhs = rng.normal(size=n)
    lower[0] = upper[-1] = 0.0
    A = np.diag(diag) + np.diag(lower[1:], -1) + np.diag(upper[:-1], 1)
    assert np.allclose(ad.thomas(lower, diag, upper, rhs), np.linalg.solve(A, rhs), atol=1e-12)
    w = rng.normal(size=n)
    for k in range(4):
        args = [lower, diag, upper, rhs]

        def f(z, k=k):
            a = list(args)
            a[k] = z
            return ad.sum(ad.tridiag_solve(*a) * w)

        check_fd(f, args[k], rtol=1e-5)


def test_linearity_of_gradients(rng):
    x0 = rng.normal(size=4)
    f1 = lambda z: ad.sum(ad.sqrt(z * z + 2.0))
    f2 = lambda z: ad.norm(z) ** 3
    (g1,) = grad_of(f1, x0)
    (g2,) = grad_of(f2, x0)
    (g12,) = grad_of(lambda z: 2.0 * f1(z) - 0.5 * f2(z), x0)
    assert np.allclose(g12, 2.0 * g1 - 0.5 * g2, rtol=1e-14, atol=1e-14)


def test_norm_grad_floor_gives_zero_subgradient_at_origin():
    (g,) = grad_of(lambda z: ad.norm(z, grad_floor=1e-7), np.zeros(3))
    assert np.array_equal(g, np.zeros(3))


def test_plain_arrays_skip_the_tape():
    out = ad.qmul(Q.IDENTITY, Q.IDENTITY)
    assert isinstance(out, np.ndarray)


def test_checkpoint_policy_validation():
    assert ad.checkpoint_policy().unrolled
    assert ad.checkpoint_policy({"every": 5}).segment_length(100) == 5
    with pytest.raises(ValueError):
        ad.checkpoint_policy({"bogus": 1})
    with pytest.raises(ad.MemoryBudgetError):
        ad.checkpoint_policy({"max_tape_nodes": 10}).segment_length(100)
