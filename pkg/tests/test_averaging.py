import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sobolevlab.averaging import (
    AliasingWarning,
    TimePeriodicOperator,
    averaged_op,
    averaged_series,
    cos_drive,
    entry_decay_exponent,
    free_conjugated,
    halfwave_potential,
    halfwave_remainder,
    quadrature_avg,
    resonant_avg,
    static,
)
from sobolevlab.basis import make_basis
from sobolevlab.mourre import harmonic_average
from sobolevlab.operators import (
    ToeplitzSpec,
    TruncatedOperator,
    commutator,
    conjugate_by_free_flow,
    diagonal,
    interior_mask,
    k0_operator,
    masked_max,
    multiplication_op,
    shift_power,
    toeplitz,
)


def smooth_toeplitz(basis, seed, width=6):
    rng = np.random.default_rng(seed)
    diags = {0: rng.standard_normal()}
    for d in range(1, width + 1):
        z = complex(*rng.standard_normal(2)) / (1 + d * d)
        diags[d], diags[-d] = z, z.conjugate()
    return toeplitz(basis, ToeplitzSpec(diags)), diags


def random_drive(basis, seed):
    """A selfadjoint two-harmonic potential with a generic dense source."""
    rng = np.random.default_rng(seed)
    n = basis.dim
    m1 = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    m0 = rng.standard_normal((n, n))
    v1 = TruncatedOperator(basis, m1, False)
    v0 = TruncatedOperator(basis, 0.5 * (m0 + m0.T).astype(complex), True)
    return TimePeriodicOperator(basis, {-2: v1.adjoint(), 0: v0, 2: v1})


@pytest.mark.parametrize("k", [1, 2, 3])
def test_cos_drive_average_closed_form(k):
    b = make_basis("Harmonic", 64)
    src, diags = smooth_toeplitz(b, k)
    avg = resonant_avg(cos_drive(src, k))
    expect = harmonic_average(b, k, diags[k])
    assert masked_max(avg.toarray() - expect.toarray(), interior_mask(b, 8)) < 1e-15
    assert avg.is_hermitian()


def test_free_conjugated_shift_sum_averages_to_itself():
    b = make_basis("Harmonic", 50)
    src = toeplitz(b, ToeplitzSpec({1: 1, -1: 1}))
    v = free_conjugated(src)
    # S moves up by one level, so it rotates like e^{-it}
    assert sorted(v.harmonics) == [-1, 1]
    np.testing.assert_array_equal(v.harmonics[-1].toarray(), shift_power(b, 1).toarray())
    np.testing.assert_array_equal(resonant_avg(v).toarray(), src.toarray())


def test_static_average_keeps_degenerate_blocks():
    b = make_basis("HalfWave", 9)
    rng = np.random.default_rng(2)
    m = rng.standard_normal((9, 9))
    m = m + m.T
    avg = resonant_avg(static(TruncatedOperator(b, m.astype(complex), True))).toarray()
    same = b.eigenvalues[:, None] == b.eigenvalues[None, :]
    np.testing.assert_allclose(avg, np.where(same, m, 0.0))


def test_static_diagonal_average_is_constant_in_time():
    b = make_basis("Harmonic", 12)
    d = diagonal(b, np.linspace(-1, 1, 12))
    for t in (0.0, 0.9, 4.4):
        np.testing.assert_array_equal(averaged_op(static(d), t).toarray(), d.toarray())


@given(seed=st.integers(0, 10**6))
def test_quadrature_oracle_matches_closed_form(seed):
    b = make_basis("HalfWave", 15)
    v = random_drive(b, seed)
    for t in (0.0, 1.3):
        closed = averaged_op(v, t).toarray()
        quad = quadrature_avg(v, t, 64).toarray()
        assert np.abs(closed - quad).max() < 1e-10


def test_flow_identity_and_initial_value():
    b = make_basis("Harmonic", 20)
    v = random_drive(b, 7)
    avg = resonant_avg(v).toarray()
    np.testing.assert_allclose(averaged_op(v, 0.0).toarray(), avg, atol=1e-13)
    for t in (0.3, 1.7, 5.1):
        back = conjugate_by_free_flow(averaged_op(v, t), t).toarray()
        np.testing.assert_allclose(back, avg, atol=1e-12)


def test_averaged_op_is_hermitian():
    b = make_basis("Harmonic", 20)
    v = random_drive(b, 8)
    for t in (0.0, 2.2, 4.0):
        assert averaged_op(v, t).is_hermitian()


def test_commutation_identity_converges_quadratically():
    b = make_basis("Harmonic", 16)
    v = random_drive(b, 9)
    k0 = k0_operator(b)
    t = 0.8
    errs = []
    for eps in (1e-2, 5e-3):
        dv = (averaged_op(v, t + eps).toarray() - averaged_op(v, t - eps).toarray()) / (2 * eps)
        errs.append(np.abs(1j * dv - commutator(k0, averaged_op(v, t)).toarray()).max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_average_is_idempotent():
    b = make_basis("Harmonic", 20)
    v = random_drive(b, 10)
    np.testing.assert_allclose(resonant_avg(averaged_series(v)).toarray(), resonant_avg(v).toarray(), atol=1e-14)


def test_quadrature_aliasing_is_flagged():
    b = make_basis("Harmonic", 12)
    src = toeplitz(b, ToeplitzSpec({5: 1.0, -5: 1.0}))
    v = cos_drive(src, 1)
    with pytest.warns(AliasingWarning):
        quad = quadrature_avg(v, 0.0, 4)
    assert np.abs(quad.toarray() - resonant_avg(v).toarray()).max() > 0.1


def test_quadrature_constant_potential_exact_with_few_nodes():
    b = make_basis("Harmonic", 8)
    d = diagonal(b, np.arange(8.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        np.testing.assert_allclose(quadrature_avg(static(d), 0.4, 4).toarray(), d.toarray())


def test_quadrature_rejects_non_integer_frequency():
    b = make_basis("Harmonic", 8)
    v = cos_drive(toeplitz(b, ToeplitzSpec({1: 1, -1: 1})), 1, (1 + 5**0.5) / 2)
    with pytest.raises(ValueError):
        quadrature_avg(v, 0.0, 16)


def test_golden_ratio_drive_has_zero_average():
    b = make_basis("Harmonic", 64)
    v = cos_drive(toeplitz(b, ToeplitzSpec({1: 1, -1: 1})), 1, (1 + 5**0.5) / 2)
    assert resonant_avg(v).max_abs() == 0.0


def test_halfwave_average_and_remainder():
    b = make_basis("HalfWave", 101)
    v = halfwave_potential(b, {1: 1.0, -1: 1.0}, 1)
    avg = resonant_avg(v)
    assert avg.is_hermitian()
    rem = halfwave_remainder(avg, 1.0, 1)
    assert rem.max_abs() < 1e-15
    assert entry_decay_exponent(rem, 4)["exponent"] == float("inf")


def test_halfwave_remainder_is_localized_for_richer_potentials():
    b = make_basis("HalfWave", 101)
    coeffs = {1: 1.0, -1: 1.0, 2: 0.3j, -2: -0.3j}
    avg = resonant_avg(halfwave_potential(b, coeffs, 1))
    rem = halfwave_remainder(avg, coeffs[1], 1)
    info = entry_decay_exponent(rem, 6)
    assert info["exponent"] >= 1.0
    # only harmonic-one pairs resonate, and away from mode 0 those are exactly v~
    assert info["support_radius"] <= 2


def test_entry_decay_exponent_measures_power_laws():
    b = make_basis("HalfWave", 201)
    lab = np.abs(b.labels).astype(float)
    op = diagonal(b, (1.0 + lab) ** -1.5)
    assert entry_decay_exponent(op, 4)["exponent"] == pytest.approx(1.5, abs=1e-9)


def test_multiplication_op_average_of_static_potential():
    b = make_basis("HalfWave", 21)
    m = multiplication_op(b, {2: 1.0, -2: 1.0})
    avg = resonant_avg(static(m)).toarray()
    # only the +-1 Fourier pairs share an eigenvalue
    assert np.count_nonzero(np.abs(avg) > 0) == 2
