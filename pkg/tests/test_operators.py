import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sobolevlab.basis import make_basis
from sobolevlab.operators import (
    ToeplitzSpec,
    TruncatedOperator,
    abs_derivative,
    ad_power,
    commutator,
    conjugate_by_free_flow,
    fourier_multiplier,
    fourier_projectors,
    identity,
    interior_mask,
    k0_operator,
    masked_max,
    multiplication_op,
    order_diagnostic,
    shift_power,
    toeplitz,
)


def random_hermitian(basis, seed, band=3):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((basis.dim, basis.dim)) + 1j * rng.standard_normal((basis.dim, basis.dim))
    m = np.triu(np.tril(m, band), -band)
    return TruncatedOperator(basis, 0.5 * (m + m.conj().T), True, 0.0)


def test_shift_matrix_small():
    s = shift_power(make_basis("Harmonic", 3), 1).toarray()
    np.testing.assert_array_equal(s, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_shift_power_rejects_large_k():
    with pytest.raises(ValueError):
        shift_power(make_basis("Harmonic", 4), 4)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_shift_products(k):
    b = make_basis("Harmonic", 20)
    s = shift_power(b, k)
    sts = (s.adjoint() @ s).toarray()
    sst = (s @ s.adjoint()).toarray()
    # S*^k S^k is the identity except on the last k modes lost to truncation
    np.testing.assert_allclose(np.diag(sts)[: 20 - k], 1.0)
    # S^k S*^k = 1 - projector on the first k modes
    np.testing.assert_allclose(np.diag(sst), [0.0] * k + [1.0] * (20 - k))
    assert np.count_nonzero(sst - np.diag(np.diag(sst))) == 0


def test_toeplitz_examples():
    b = make_basis("Harmonic", 12)
    s = shift_power(b, 1)
    np.testing.assert_array_equal(toeplitz(b, ToeplitzSpec({1: 1, -1: 1})).toarray(), (s + s.adjoint()).toarray())
    np.testing.assert_array_equal(toeplitz(b, ToeplitzSpec({0: 2.5})).toarray(), 2.5 * np.eye(12))
    t = toeplitz(b, ToeplitzSpec({2: 1j, -2: -1j}))
    assert t.hermitian and t.is_hermitian()
    assert not toeplitz(b, ToeplitzSpec({2: 1j})).hermitian


def test_toeplitz_ignores_offsets_beyond_dimension():
    b = make_basis("Harmonic", 4)
    with pytest.warns(UserWarning):
        t = toeplitz(b, ToeplitzSpec({0: 1.0, 5: 1.0, -5: 1.0}))
    np.testing.assert_array_equal(t.toarray(), np.eye(4))


def test_multiplication_examples():
    b = make_basis("HalfWave", 21)
    m = multiplication_op(b, {2: 1, -2: 1})
    nat = b.natural_order
    dense = m.toarray()[np.ix_(nat, nat)]
    expect = np.eye(21, k=2) + np.eye(21, k=-2)
    np.testing.assert_array_equal(dense, expect)
    np.testing.assert_array_equal(multiplication_op(b, {0: 1}).toarray(), np.eye(21))
    w = multiplication_op(b, {1: (1 + 2j) / 2j, -1: -(1 - 2j) / 2j})
    assert w.hermitian and w.is_hermitian()


@given(seed=st.integers(0, 10**6))
def test_multiplication_is_convolution_on_interior(seed):
    rng = np.random.default_rng(seed)
    b = make_basis("HalfWave", 41)
    v = {j: complex(*rng.standard_normal(2)) for j in range(-2, 3)}
    w = {j: complex(*rng.standard_normal(2)) for j in range(-3, 4)}
    conv = {}
    for i, a in v.items():
        for j, c in w.items():
            conv[i + j] = conv.get(i + j, 0) + a * c
    lhs = (multiplication_op(b, v) @ multiplication_op(b, w)).toarray()
    rhs = multiplication_op(b, conv).toarray()
    inner = np.abs(b.labels) <= 20 - 5
    assert np.abs((lhs - rhs)[np.ix_(inner, inner)]).max() < 1e-12


def test_fourier_multipliers():
    b = make_basis("HalfWave", 15)
    np.testing.assert_array_equal(np.diag(abs_derivative(b).toarray()).real, np.abs(b.labels))
    plus, minus, zero_ = fourier_projectors(b)
    np.testing.assert_array_equal((plus + minus + zero_).toarray(), np.eye(15))
    np.testing.assert_array_equal(fourier_multiplier(b, lambda j: np.ones_like(j)).toarray(), np.eye(15))


def test_free_flow_conjugation_special_times():
    b = make_basis("Harmonic", 16)
    a = random_hermitian(b, 1)
    np.testing.assert_allclose(conjugate_by_free_flow(a, 0.0).toarray(), a.toarray())
    np.testing.assert_allclose(conjugate_by_free_flow(a, 2 * np.pi).toarray(), a.toarray(), atol=1e-13)
    # S raises the K0 eigenvalue by one, so its entries pick up e^{+is}
    s = shift_power(b, 1)
    np.testing.assert_allclose(conjugate_by_free_flow(s, 0.7).toarray(), np.exp(0.7j) * s.toarray(), atol=1e-15)


@given(s=st.floats(-20, 20), t=st.floats(-20, 20), seed=st.integers(0, 10**6))
def test_free_flow_conjugation_group_law(s, t, seed):
    b = make_basis("HalfWave", 15)
    a = random_hermitian(b, seed)
    lhs = conjugate_by_free_flow(conjugate_by_free_flow(a, s), t).toarray()
    rhs = conjugate_by_free_flow(a, s + t).toarray()
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@given(s=st.floats(-20, 20), seed=st.integers(0, 10**6))
def test_free_flow_conjugation_is_unitary(s, seed):
    b = make_basis("Harmonic", 12)
    a = random_hermitian(b, seed)
    c = conjugate_by_free_flow(a, s)
    assert c.is_hermitian()
    assert np.linalg.norm(c.toarray(), 2) == pytest.approx(np.linalg.norm(a.toarray(), 2), rel=1e-10)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_shift_commutes_with_k0_up_to_k(k):
    b = make_basis("Harmonic", 40)
    s = shift_power(b, k)
    k0 = k0_operator(b)
    mask = interior_mask(b, k, low_edge=k)
    assert masked_max(commutator(s, k0).toarray() + k * s.toarray(), mask) < 1e-12
    assert masked_max(commutator(s.adjoint(), k0).toarray() - k * s.adjoint().toarray(), mask) < 1e-12


@given(seed=st.integers(0, 10**6))
def test_commutator_of_hermitians_is_antihermitian(seed):
    b = make_basis("Harmonic", 10)
    a, c = random_hermitian(b, seed), random_hermitian(b, seed + 1)
    m = commutator(a, c).toarray()
    np.testing.assert_allclose(m.conj().T, -m, atol=1e-12)
    assert commutator(a, a).max_abs() < 1e-12


def test_ad_power_iterates():
    b = make_basis("Harmonic", 10)
    a, c = random_hermitian(b, 3), random_hermitian(b, 4)
    np.testing.assert_allclose(ad_power(a, c, 2).toarray(), commutator(commutator(c, a), a).toarray(), atol=1e-12)
    np.testing.assert_allclose(ad_power(a, c, 0).toarray(), c.toarray())


def test_order_diagnostic_examples():
    c_k0 = [order_diagnostic(k0_operator(make_basis("Harmonic", n)), 1.0) for n in (64, 128, 256)]
    # (n - 1/2) / (1 + 2n) tends to 1/2 from below
    assert max(c_k0) == pytest.approx(0.5, abs=0.01)
    assert max(c_k0) - min(c_k0) < 0.01
    c_ss = [order_diagnostic(toeplitz(make_basis("Harmonic", n), ToeplitzSpec({1: 1, -1: 1})), 0.0) for n in (64, 128, 256)]
    assert max(c_ss) == pytest.approx(min(c_ss)) and max(c_ss) < 3
    c_bad = [order_diagnostic(k0_operator(make_basis("Harmonic", n)), 0.0) for n in (64, 128, 256)]
    assert c_bad[2] / c_bad[1] == pytest.approx(2.0, rel=0.05)


def test_identity_and_hermitian_flag():
    b = make_basis("Harmonic", 5)
    assert identity(b).is_hermitian()
    with pytest.raises(ValueError):
        identity(b) + identity(make_basis("Harmonic", 6))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert (identity(b) * 2j).hermitian is False
