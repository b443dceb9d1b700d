import warnings
from math import factorial

import numpy as np
import pytest

from sobolevlab.averaging import TimePeriodicOperator, averaged_series, cos_drive, free_conjugated, resonant_avg, static
from sobolevlab.basis import make_basis, wave_packet
from sobolevlab.normal_form import (
    QuadratureWarning,
    conjugate_hamiltonian,
    homological_residual_fd,
    normal_form,
    solve_homological,
)
from sobolevlab.operators import (
    ToeplitzSpec,
    TruncatedOperator,
    ad_power,
    conjugate_by_free_flow,
    diagonal,
    k0_operator,
    order_diagnostic,
    toeplitz,
)
from sobolevlab.propagator import EvolutionConfig, evolve_periodic


def drive(n, k=1, extra=True):
    b = make_basis("Harmonic", n)
    diags = {1: 1.0, -1: 1.0}
    if extra:
        diags.update({2: 0.3j, -2: -0.3j, 0: 0.2})
    return cos_drive(toeplitz(b, ToeplitzSpec(diags)), k)


def test_homological_residual_and_periodicity():
    v = drive(24)
    x = solve_homological(v)
    for t in (0.2, 1.9, 4.4):
        assert homological_residual_fd(v, x, t) <= 1e-6
    assert (x.at(2 * np.pi) - x.at(0.0)).max_abs() <= 1e-10
    assert x.at(0.0).max_abs() <= 1e-14
    assert x.is_selfadjoint(1e-10)


def test_homological_anchor_matches_integral_solution():
    v = drive(10)
    x = solve_homological(v)
    nonres = v - averaged_series(v)
    t = 1.3
    s, w = np.polynomial.legendre.leggauss(60)
    s, w = 0.5 * t * (s + 1), 0.5 * t * w
    integral = sum(wi * conjugate_by_free_flow(nonres.at(si), si - t).toarray() for si, wi in zip(s, w))
    np.testing.assert_allclose(x.at(t).toarray(), integral, atol=1e-12)


def test_resonant_input_has_trivial_generator():
    b = make_basis("Harmonic", 20)
    v = free_conjugated(toeplitz(b, ToeplitzSpec({1: 1.0, -1: 1.0})))
    assert solve_homological(v).max_abs() == 0.0


def test_conjugation_by_zero_is_identity():
    v = drive(12)
    z = TimePeriodicOperator(v.basis, {})
    assert conjugate_hamiltonian(v, z) is v


def test_conjugation_matches_lie_series_for_small_generator():
    b = make_basis("Harmonic", 10)
    rng = np.random.default_rng(1)
    m = rng.standard_normal((10, 10)) + 1j * rng.standard_normal((10, 10))
    xs = TruncatedOperator(b, 1e-2 * (m + m.conj().T), True)
    v = drive(10)
    out = conjugate_hamiltonian(v, static(xs), n_samples=16)
    t = 0.4
    a = k0_operator(b) + v.at(t)
    series = sum(ad_power(xs, a, l).toarray() / (1j**l * factorial(l)) for l in range(7))
    np.testing.assert_allclose(out.at(t).toarray() + k0_operator(b).toarray(), series, atol=1e-12)


def test_gauss_quadrature_agrees_with_exact_integral():
    v = drive(12)
    x = solve_homological(v)
    exact = conjugate_hamiltonian(v, x, n_samples=32)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        gauss = conjugate_hamiltonian(v, x, 16, n_samples=32, quadrature="gauss")
    for t in (0.0, 2.0):
        assert (exact.at(t) - gauss.at(t)).max_abs() < 1e-10
    with pytest.warns(QuadratureWarning):
        conjugate_hamiltonian(v, x, 2, n_samples=8, quadrature="gauss")


def test_one_step_normal_form_has_no_correction():
    v = drive(24)
    res = normal_form(v, 1)
    assert res.t_n.max_abs() <= 1e-10
    np.testing.assert_allclose(res.effective_h.toarray(), resonant_avg(v).toarray(), atol=1e-10)
    assert res.residuals["step1_homological_fd"] <= 1e-6


def test_static_diagonal_needs_no_transformation():
    b = make_basis("Harmonic", 12)
    d = diagonal(b, np.linspace(-1, 1, 12))
    res = normal_form(static(d), 2)
    assert all(x.max_abs() == 0.0 for x in res.x_list)
    np.testing.assert_allclose(res.effective_h.toarray(), d.toarray(), atol=1e-14)


def test_normal_form_part_is_gauge_invariant():
    res = normal_form(drive(16), 2, n_samples=32)
    ref = conjugate_by_free_flow(res.z.at(0.0), 0.0).toarray()
    for t in (0.7, 2.9, 5.5):
        np.testing.assert_allclose(conjugate_by_free_flow(res.z.at(t), t).toarray(), ref, atol=1e-10)


def test_second_step_correction_is_order_minus_one():
    consts = []
    for n in (32, 64):
        res = normal_form(drive(n, extra=False), 2)
        assert res.t_n.is_hermitian() and res.t_n.max_abs() > 1e-6
        consts.append(order_diagnostic(res.t_n, -1.0, edge=4))
    assert consts[1] == pytest.approx(consts[0], rel=0.1)


def test_transformed_flow_is_unitarily_equivalent():
    # X_1 vanishes at 0 and 2pi, so both equations share the one-period propagator
    v = drive(10)
    x = solve_homological(v)
    plus = conjugate_hamiltonian(v, x, n_samples=128)
    psi0 = wave_packet(v.basis, 3, 1.5, 0.2)
    cfg = EvolutionConfig(t_end=2 * np.pi, dt=2 * np.pi, micro_dt=2 * np.pi / 4000, boundary_tol=None)
    _, a = evolve_periodic(v, psi0, cfg)
    _, b = evolve_periodic(plus, psi0, cfg)
    assert np.linalg.norm(a.coeffs - b.coeffs) < 1e-5


def test_rejects_non_integer_frequency_and_depth():
    b = make_basis("Harmonic", 8)
    src = toeplitz(b, ToeplitzSpec({1: 1.0, -1: 1.0}))
    with pytest.raises(ValueError):
        normal_form(cos_drive(src, 1, 0.5 * (1 + 5**0.5)))
    with pytest.raises(ValueError):
        normal_form(cos_drive(src, 1), 3)
