"""Time-periodic operators and their averages along the free flow.

A potential is a finite Fourier series V(t) = sum_h e^{i h w t} V_h. The
averaged operator and the resonant average then reduce to an entrywise
resonance filter: entry (m, n) of V_h survives iff lam_m - lam_n + h w = 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .basis import BasisKind, BasisModel
from .operators import (
    TruncatedOperator,
    conjugate_by_free_flow,
    identity,
    interior_indices,
    multiplication_op,
    zero,
)

RESONANCE_TOL = 1e-9


class AliasingWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class TimePeriodicOperator:
    basis: BasisModel
    harmonics: Mapping[int, TruncatedOperator]
    frequency: float = 1.0

    def __post_init__(self) -> None:
        cleaned = {}
        for h, op in sorted(self.harmonics.items()):
            if not op.basis.same_as(self.basis):
                raise ValueError(f"harmonic {h} lives on a different basis")
            cleaned[int(h)] = op
        object.__setattr__(self, "harmonics", cleaned)

    @property
    def is_integer_periodic(self) -> bool:
        """True if every harmonic has an integer angular frequency (2pi-periodic)."""
        return all(abs(h * self.frequency - round(h * self.frequency)) < RESONANCE_TOL for h in self.harmonics)

    def at(self, t: float) -> TruncatedOperator:
        if not self.harmonics:
            return zero(self.basis)
        mats = [op.matrix * complex(np.exp(1j * h * self.frequency * t)) for h, op in self.harmonics.items()]
        if any(not sp.issparse(m) for m in mats):
            m = sum((x.toarray() if sp.issparse(x) else x) for x in mats)
        else:
            m = sum(mats[1:], mats[0]).tocsr()
        herm = self.is_selfadjoint()
        if herm:
            m = 0.5 * (m + m.conj().T)
        order = max(op.order_tag for op in self.harmonics.values())
        return TruncatedOperator(self.basis, m, herm, order)

    def is_selfadjoint(self, rtol: float = 1e-12) -> bool:
        """V_{-h} = V_h^dagger for every harmonic (cached per tolerance)."""
        cache = self.__dict__.setdefault("_selfadjoint", {})
        if rtol not in cache:
            cache[rtol] = self._check_selfadjoint(rtol)
        return cache[rtol]

    def _check_selfadjoint(self, rtol: float) -> bool:
        for h, op in self.harmonics.items():
            partner = self.harmonics.get(-h)
            scale = max(op.max_abs(), 1e-300)
            if partner is None:
                if op.max_abs() > 0:
                    return False
                continue
            diff = (partner - op.adjoint()).max_abs()
            if diff > rtol * scale:
                return False
        return True

    def derivative(self) -> "TimePeriodicOperator":
        return TimePeriodicOperator(
            self.basis, {h: op * (1j * h * self.frequency) for h, op in self.harmonics.items()}, self.frequency
        )

    def _merge(self, other: "TimePeriodicOperator", sign: float) -> "TimePeriodicOperator":
        if abs(self.frequency - other.frequency) > 1e-15 and self.harmonics and other.harmonics:
            raise ValueError("cannot combine potentials with different base frequencies")
        out = dict(self.harmonics)
        for h, op in other.harmonics.items():
            out[h] = out[h] + op * sign if h in out else op * sign
        return TimePeriodicOperator(self.basis, out, self.frequency if self.harmonics else other.frequency)

    def __add__(self, other):
        return self._merge(other, 1.0)

    def __sub__(self, other):
        return self._merge(other, -1.0)

    def scaled(self, c: complex) -> "TimePeriodicOperator":
        return TimePeriodicOperator(self.basis, {h: op * c for h, op in self.harmonics.items()}, self.frequency)

    def max_abs(self) -> float:
        return max((op.max_abs() for op in self.harmonics.values()), default=0.0)

    def phase_bandwidth(self) -> float:
        """max |lam_m - lam_n + h w| over the nonzero entries."""
        lam = self.basis.eigenvalues
        best = 0.0
        for h, op in self.harmonics.items():
            coo = op.tocsr().tocoo()
            nz = coo.data != 0
            if nz.any():
                best = max(best, float(np.abs(lam[coo.row[nz]] - lam[coo.col[nz]] + h * self.frequency).max()))
        return best


def static(op: TruncatedOperator) -> TimePeriodicOperator:
    return TimePeriodicOperator(op.basis, {0: op})


def cos_drive(op: TruncatedOperator, k: int = 1, frequency: float = 1.0) -> TimePeriodicOperator:
    """V(t) = cos(k w t) * op."""
    half = op * 0.5
    if k == 0:
        return TimePeriodicOperator(op.basis, {0: op}, frequency)
    return TimePeriodicOperator(op.basis, {k: half, -k: half}, frequency)


def free_conjugated(op: TruncatedOperator) -> TimePeriodicOperator:
    """V(t) = exp(-i t K0) op exp(i t K0): entry (m, n) rotates with harmonic -(lam_m - lam_n)."""
    lam = op.basis.eigenvalues
    coo = op.tocsr().tocoo()
    gaps = lam[coo.row] - lam[coo.col]
    if np.any(np.abs(gaps - np.round(gaps)) > RESONANCE_TOL):
        raise ValueError("free-flow conjugation needs integer spectral gaps")
    gaps = np.round(gaps).astype(int)
    out = {}
    for g in np.unique(gaps):
        sel = gaps == g
        m = sp.csr_matrix((coo.data[sel], (coo.row[sel], coo.col[sel])), shape=coo.shape)
        out[int(-g)] = TruncatedOperator(op.basis, m, False, op.order_tag)
    return TimePeriodicOperator(op.basis, out, 1.0)


def _resonant_part(op: TruncatedOperator, shift: float) -> TruncatedOperator:
    lam = op.basis.eigenvalues
    if op.is_sparse:
        coo = op.matrix.tocoo()
        keep = np.abs(lam[coo.row] - lam[coo.col] + shift) < RESONANCE_TOL
        m = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=coo.shape)
    else:
        keep = np.abs(lam[:, None] - lam[None, :] + shift) < RESONANCE_TOL
        m = np.where(keep, op.matrix, 0.0)
    return TruncatedOperator(op.basis, m, False, op.order_tag)


def averaged_series(v: TimePeriodicOperator) -> TimePeriodicOperator:
    """The averaged operator t -> V^(t) as a harmonic series (resonant entries only)."""
    out = {h: _resonant_part(op, h * v.frequency) for h, op in v.harmonics.items()}
    return TimePeriodicOperator(v.basis, out, v.frequency)


def nonresonant_series(v: TimePeriodicOperator) -> TimePeriodicOperator:
    return v - averaged_series(v)


def averaged_op(v: TimePeriodicOperator, t: float) -> TruncatedOperator:
    return averaged_series(v).at(t)


def resonant_avg(v: TimePeriodicOperator) -> TruncatedOperator:
    """<V>: sum over harmonics of the entries with lam_m - lam_n + h w = 0."""
    total = zero(v.basis)
    for h, op in v.harmonics.items():
        total = total + _resonant_part(op, h * v.frequency)
    m = total.matrix
    herm = v.is_selfadjoint()
    if herm:
        m = 0.5 * (m + m.conj().T)
    return TruncatedOperator(v.basis, m, herm, max((op.order_tag for op in v.harmonics.values()), default=0.0))


def quadrature_avg(v: TimePeriodicOperator, t: float, n_steps: int) -> TruncatedOperator:
    """Periodic trapezoid rule for (1/2pi) int_0^{2pi} e^{isK0} V(t+s) e^{-isK0} ds.

    Exact once ``n_steps`` exceeds the phase bandwidth; below that the rule
    aliases and an ``AliasingWarning`` is emitted.
    """
    if n_steps < 4:
        raise ValueError("quadrature needs at least 4 nodes")
    if not v.is_integer_periodic:
        raise ValueError("quadrature over [0, 2pi] needs integer drive frequencies")
    bw = v.phase_bandwidth()
    if n_steps <= bw:
        warnings.warn(f"{n_steps} nodes cannot resolve phase bandwidth {bw:g}; result is aliased", AliasingWarning, stacklevel=2)
    acc = None
    for j in range(n_steps):
        s = 2.0 * np.pi * j / n_steps
        term = conjugate_by_free_flow(v.at(t + s), s)
        acc = term.toarray() if acc is None else acc + term.toarray()
    return TruncatedOperator(v.basis, acc / n_steps, False, 0.0)


def halfwave_potential(basis: BasisModel, v_coeffs: Mapping[int, complex], j: int) -> TimePeriodicOperator:
    """V~(t) = cos(j t) v(x) - 1 on the HalfWave basis."""
    if basis.kind is not BasisKind.HALFWAVE:
        raise ValueError("halfwave potential needs a HalfWave basis")
    v = multiplication_op(basis, v_coeffs)
    drive = cos_drive(v, abs(int(j)))
    return drive - static(identity(basis))


def halfwave_remainder(avg: TruncatedOperator, v_j: complex, j: int) -> TruncatedOperator:
    """R = <V~> - (v~(x) - 1) with v~(x) = Re(v_j e^{ijx})."""
    vt = multiplication_op(avg.basis, {j: 0.5 * v_j, -j: 0.5 * np.conj(v_j)})
    return avg - (vt - identity(avg.basis))


def entry_decay_exponent(op: TruncatedOperator, edge: int, floor: float = 1e-13) -> dict:
    """Decay of max_{max(|m|,|n|) = s} |R_mn| in the shell radius s.

    Entries within ``edge`` modes of the truncation are ignored. Returns the
    fitted exponent alpha in |R| ~ <s>^{-alpha}; ``inf`` when the entries
    vanish identically beyond a finite radius.
    """
    keep = np.zeros(op.dim, dtype=bool)
    keep[interior_indices(op.basis, edge)] = True
    coo = op.tocsr().tocoo()
    labels = np.abs(op.basis.labels)
    sel = keep[coo.row] & keep[coo.col]
    mags = np.abs(coo.data[sel])
    shells = np.maximum(labels[coo.row[sel]], labels[coo.col[sel]])
    scale = max(mags.max() if mags.size else 0.0, 1.0)
    significant = mags > floor * scale
    if not significant.any():
        return {"exponent": float("inf"), "support_radius": 0, "max_entry": 0.0}
    radius = int(shells[significant].max())
    outer = int(labels[keep].max())
    profile = {}
    for s, m in zip(shells[significant], mags[significant]):
        profile[int(s)] = max(profile.get(int(s), 0.0), float(m))
    if radius < outer - 1 or len(profile) < 3:
        # identically zero past a finite radius: faster than any power
        return {"exponent": float("inf"), "support_radius": radius, "max_entry": float(mags.max())}
    s = np.array(sorted(profile))
    a = np.array([profile[k] for k in s])
    slope = np.polyfit(np.log1p(s), np.log(a), 1)[0]
    return {"exponent": float(-slope), "support_radius": radius, "max_entry": float(mags.max())}
