"""Matrix-level normal form for i d/dt psi = (K0 + V(t)) psi.

Each step solves the homological equation dX/dt + i[K0, X] = V - V^ entry
by entry in the harmonic representation, conjugates the generator by
exp(-iX(t)) at equispaced times and re-expands the result in harmonics by
FFT. Only 2pi-periodic drives are handled, since the anchor X(0) = 0 adds
a free-flow term that oscillates at the integer gaps of K0.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .averaging import (
    RESONANCE_TOL,
    TimePeriodicOperator,
    averaged_series,
    resonant_avg,
)
from .operators import TruncatedOperator, commutator, k0_operator, zero

DEFAULT_SAMPLES = 64
DROP_RTOL = 1e-15


class QuadratureWarning(UserWarning):
    pass


class RemainderGrowthWarning(UserWarning):
    pass


def _integer_harmonics(v: TimePeriodicOperator) -> TimePeriodicOperator:
    """Rewrite an integer-frequency drive with frequency 1."""
    if v.frequency == 1.0:
        return v
    if not v.is_integer_periodic:
        raise ValueError("normal form needs a 2pi-periodic drive (integer harmonic frequencies)")
    out = {}
    for h, op in v.harmonics.items():
        q = int(round(h * v.frequency))
        out[q] = out[q] + op if q in out else op
    return TimePeriodicOperator(v.basis, out, 1.0)


def _dphase(z: np.ndarray) -> np.ndarray:
    """(e^{iz} - 1) / (iz), equal to int_0^1 e^{isz} ds."""
    out = np.ones_like(z, dtype=complex)
    big = np.abs(z) > 1e-8
    out[big] = np.expm1(1j * z[big]) / (1j * z[big])
    small = ~big
    out[small] = 1.0 + 0.5j * z[small] - z[small] ** 2 / 6.0
    return out


def solve_homological(v: TimePeriodicOperator, check: bool = True) -> TimePeriodicOperator:
    """X with dX/dt + i[K0, X] = V - V^ and X(0) = 0.

    Nonresonant entries: X_h(m, n) = (V_h)_mn / (i (lam_m - lam_n + h)).
    The homogeneous term exp(-itK0) Y exp(itK0) with Y = -sum_h X_h sits
    at harmonic -(lam_m - lam_n) and enforces X(0) = 0.
    """
    v = _integer_harmonics(v)
    if not v.is_selfadjoint(1e-10):
        raise ValueError("homological equation needs a selfadjoint-for-all-t potential")
    basis = v.basis
    lam = basis.eigenvalues
    n = basis.dim
    rows_all, cols_all, vals_all, harm_all = [], [], [], []
    for h, op in v.harmonics.items():
        coo = op.tocsr().tocoo()
        gap = lam[coo.row] - lam[coo.col] + h
        nonres = np.abs(gap) > RESONANCE_TOL
        if not np.all(np.abs(gap[nonres] - np.round(gap[nonres])) < RESONANCE_TOL):
            raise ValueError("homological solve needs integer spectral gaps")
        x = coo.data[nonres] / (1j * gap[nonres])
        r, c = coo.row[nonres], coo.col[nonres]
        rows_all += [r, r]
        cols_all += [c, c]
        vals_all += [x, -x]
        delta = np.round(lam[r] - lam[c]).astype(int)
        harm_all += [np.full(r.size, h), -delta]
    out: dict[int, TruncatedOperator] = {}
    if rows_all:
        rows = np.concatenate(rows_all)
        cols = np.concatenate(cols_all)
        vals = np.concatenate(vals_all)
        harm = np.concatenate(harm_all)
        for q in np.unique(harm):
            sel = harm == q
            m = sp.csr_matrix((vals[sel], (rows[sel], cols[sel])), shape=(n, n))
            m.eliminate_zeros()
            if m.nnz and np.abs(m.data).max() > 0:
                out[int(q)] = TruncatedOperator(basis, m, False, 0.0)
    x = TimePeriodicOperator(basis, out, 1.0)
    if check:
        res = homological_residual_exact(v, x, 0.731)
        scale = max(1.0, v.max_abs())
        if res > 1e-9 * scale:
            raise RuntimeError(f"homological solve inconsistent: residual {res:.3e}")
    return x


def homological_residual_exact(v: TimePeriodicOperator, x: TimePeriodicOperator, t: float) -> float:
    """Residual of the homological equation with the harmonic derivative of X."""
    v = _integer_harmonics(v)
    k0 = k0_operator(v.basis)
    lhs = x.derivative().at(t) + commutator(k0, x.at(t)) * 1j
    rhs = v.at(t) - averaged_series(v).at(t)
    return (lhs - rhs).max_abs()


def homological_residual_fd(v: TimePeriodicOperator, x: TimePeriodicOperator, t: float, eps: float = 1e-4) -> float:
    """Same residual with a centred finite difference for dX/dt."""
    v = _integer_harmonics(v)
    k0 = k0_operator(v.basis)
    dx = (x.at(t + eps) - x.at(t - eps)) * (1.0 / (2 * eps))
    lhs = dx + commutator(k0, x.at(t)) * 1j
    rhs = v.at(t) - averaged_series(v).at(t)
    return (lhs - rhs).max_abs()


def _hermitize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.conj().T)


def _sample_conjugation(k0: np.ndarray, vt: np.ndarray, xt: np.ndarray, dxt: np.ndarray, quadrature: str, n_terms: int, qtol: float) -> tuple[np.ndarray, float]:
    xv, w = sla.eigh(_hermitize(xt))
    e = (w * np.exp(1j * xv)) @ w.conj().T
    conj = e @ (k0 + vt) @ e.conj().T - k0
    bt = w.conj().T @ dxt @ w
    z = xv[:, None] - xv[None, :]
    qerr = 0.0
    if quadrature == "exact":
        phi = _dphase(z)
    else:
        def gauss(n):
            s, wt = np.polynomial.legendre.leggauss(n)
            s, wt = 0.5 * (s + 1), 0.5 * wt
            return np.einsum("i,iab->ab", wt, np.exp(1j * s[:, None, None] * z[None]))

        phi = gauss(n_terms)
        qerr = float(np.abs(phi - gauss(2 * n_terms)).max())
    flow_term = w @ (bt * phi) @ w.conj().T
    return _hermitize(conj - flow_term), qerr


def _from_samples(basis, samples: list[np.ndarray], drop: float) -> TimePeriodicOperator:
    m = len(samples)
    stack = np.stack(samples)
    coeffs = np.fft.fft(stack, axis=0) / m
    out = {}
    for idx in range(m):
        h = idx if idx < m // 2 else idx - m
        if abs(h) >= m // 2:
            continue  # the Nyquist harmonic has no conjugate partner
        c = coeffs[idx]
        if np.abs(c).max() > drop:
            out[h] = c
    # pair harmonics exactly so the series stays selfadjoint for all t
    paired = {}
    for h, c in out.items():
        partner = out.get(-h, np.zeros_like(c))
        paired[h] = TruncatedOperator(basis, 0.5 * (c + partner.conj().T), False, 0.0)
    return TimePeriodicOperator(basis, paired, 1.0)


def conjugate_hamiltonian(
    v: TimePeriodicOperator,
    x: TimePeriodicOperator,
    n_terms: int = 16,
    *,
    n_samples: int = DEFAULT_SAMPLES,
    quadrature: str = "exact",
    qtol: float = 1e-12,
) -> TimePeriodicOperator:
    """V+ with K0 + V+(t) = e^{iX} (K0 + V) e^{-iX} - int_0^1 e^{isX} X' e^{-isX} ds.

    The s-integral is done exactly in the eigenbasis of X(t) (``quadrature
    = "exact"``) or by Gauss-Legendre with ``n_terms`` nodes, in which case
    disagreement with the doubled rule beyond ``qtol`` raises a
    :class:`QuadratureWarning`.
    """
    if quadrature not in ("exact", "gauss"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    v = _integer_harmonics(v)
    x = _integer_harmonics(x)
    if not x.is_selfadjoint(1e-10):
        raise ValueError("generator X must be hermitian for all t")
    basis = v.basis
    if not x.harmonics:
        return v
    k0 = k0_operator(basis).toarray()
    dx = x.derivative()
    samples, worst = [], 0.0
    for j in range(n_samples):
        t = 2.0 * np.pi * j / n_samples
        f, qerr = _sample_conjugation(k0, v.at(t).toarray(), x.at(t).toarray(), dx.at(t).toarray(), quadrature, n_terms, qtol)
        samples.append(f)
        worst = max(worst, qerr)
    if worst > qtol:
        warnings.warn(f"s-quadrature with {n_terms} nodes not converged (change {worst:.2e})", QuadratureWarning, stacklevel=2)
    scale = max(1.0, max(np.abs(s).max() for s in samples))
    return _from_samples(basis, samples, DROP_RTOL * scale)


@dataclass
class NormalFormResult:
    x_list: list[TimePeriodicOperator]
    z: TimePeriodicOperator
    remainder: TimePeriodicOperator
    effective_h: TruncatedOperator
    t_n: TruncatedOperator
    steps: int
    residuals: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"steps": self.steps, "residuals": self.residuals, **self.manifest}, indent=2)


def _weighted_size(v: TimePeriodicOperator) -> float:
    return max((op.max_abs() for op in v.harmonics.values()), default=0.0)


def normal_form(v: TimePeriodicOperator, steps: int = 1, *, n_samples: int = DEFAULT_SAMPLES, quadrature: str = "exact", n_terms: int = 16) -> NormalFormResult:
    """One or two normal-form steps; effective H = Z(0) = <V> + T."""
    if steps not in (1, 2):
        raise ValueError("normal form depth is limited to 1 or 2 steps")
    v = _integer_harmonics(v)
    avg = resonant_avg(v)
    z = averaged_series(v)
    x1 = solve_homological(v)
    plus = conjugate_hamiltonian(v, x1, n_terms, n_samples=n_samples, quadrature=quadrature)
    rem = plus - z
    xs = [x1]
    residuals = {
        "step1_homological_fd": homological_residual_fd(v, x1, 0.731),
        "step1_x_period": (x1.at(2 * np.pi) - x1.at(0.0)).max_abs(),
        "step1_remainder_size": _weighted_size(rem),
    }
    if steps == 2:
        rem1 = rem
        prev = _weighted_size(rem1)
        x2 = solve_homological(rem1)
        plus2 = conjugate_hamiltonian(z + rem1, x2, n_terms, n_samples=n_samples, quadrature=quadrature)
        z = z + averaged_series(rem1)
        rem = plus2 - z
        xs.append(x2)
        residuals["step2_homological_fd"] = homological_residual_fd(rem1, x2, 0.731)
        residuals["step2_remainder_size"] = _weighted_size(rem)
        if _weighted_size(rem) >= prev and prev > 0:
            warnings.warn("second normal-form step did not shrink the remainder; truncation artifacts likely", RemainderGrowthWarning, stacklevel=2)
    eff = z.at(0.0)
    eff = TruncatedOperator(v.basis, _hermitize(eff.toarray()), True, 0.0)
    t_n = eff - TruncatedOperator(v.basis, avg.toarray(), False, 0.0)
    t_n = TruncatedOperator(v.basis, _hermitize(t_n.toarray()), True, -1.0)
    manifest = {
        "composition_order": "psi = e^{-iX_1(t)} ... e^{-iX_N(t)} phi, innermost generator applied last",
        "n_samples": n_samples,
        "quadrature": quadrature,
    }
    return NormalFormResult(xs, z, rem, eff, t_n, steps, residuals, manifest)
