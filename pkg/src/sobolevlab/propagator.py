"""Time evolution for static and time-periodic generators.

Periodic problems are integrated in the interaction picture
phi = exp(itK0) psi, where the generator

    G(t)_mn = sum_h (V_h)_mn exp(i t (lam_m - lam_n + h w))

is bounded and banded. Each step applies exp(-i tau G) through a Chebyshev
expansion on a Gershgorin bound of G, so the step is unitary to round-off.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import jv

from .averaging import TimePeriodicOperator
from .basis import StateVector, boundary_mass
from .diagnostics import NormTrace
from .mourre import Eigensystem, eigensystem
from .operators import TruncatedOperator

CHEBYSHEV_TOL = 1e-16


class Method(str, enum.Enum):
    EXACT_EIG = "ExactEig"
    MIDPOINT = "InteractionMidpoint"
    RK4 = "InteractionRK4"


class EvolutionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    t_end: float = Field(gt=0)
    dt: float = Field(gt=0)
    micro_dt: float = Field(gt=0)
    method: Method = Method.MIDPOINT
    unitarity_tol: float = Field(default=1e-8, gt=0)
    boundary_tol: float | None = Field(default=1e-6, gt=0)
    boundary_fraction: float = Field(default=0.05, gt=0, lt=1)
    rs: list[float] = Field(default_factory=lambda: [1.0])

    @model_validator(mode="after")
    def _ordering(self):
        if not self.micro_dt <= self.dt <= self.t_end:
            raise ValueError("need micro_dt <= dt <= t_end")
        ratio = self.dt / self.micro_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt must be an integer multiple of micro_dt")
        return self

    @property
    def substeps(self) -> int:
        return int(round(self.dt / self.micro_dt))

    @property
    def n_macro(self) -> int:
        return int(round(self.t_end / self.dt))


class UnitarityError(RuntimeError):
    def __init__(self, t: float, drift: float):
        super().__init__(f"L2 norm drifted by {drift:.3e} at t={t:g}")
        self.t, self.drift = t, drift


class TruncationError(RuntimeError):
    def __init__(self, t: float, mass: float):
        super().__init__(f"boundary mass {mass:.3e} at t={t:g}; increase N")
        self.t, self.mass = t, mass


# --------------------------------------------------------------------------
# static flows


def evolve_static(h: TruncatedOperator, psi0: StateVector, times: Sequence[float], eig: Eigensystem | None = None) -> list[StateVector]:
    """psi(t) = U exp(-it Lambda) U^dagger psi0."""
    if not h.basis.same_as(psi0.basis):
        raise ValueError("state and generator live on different bases")
    eig = eig or eigensystem(h)
    c0 = eig.to_eigen(psi0.coeffs)
    return [StateVector(h.basis, eig.from_eigen(np.exp(-1j * eig.values * t) * c0)) for t in times]


def static_trace(
    h: TruncatedOperator,
    psi0: StateVector,
    times: Sequence[float],
    rs: Sequence[float],
    eig: Eigensystem | None = None,
    boundary_fraction: float = 0.05,
) -> NormTrace:
    """Norm trace of exp(-itH) psi0 without keeping the states."""
    eig = eig or eigensystem(h)
    c0 = eig.to_eigen(psi0.coeffs)
    basis = h.basis
    rs = sorted(set([0.0] + [float(r) for r in rs]))
    weights = {r: basis.eigenvalues ** (2.0 * r) for r in rs}
    norms = {r: np.empty(len(times)) for r in rs}
    bm = np.empty(len(times))
    for i, t in enumerate(times):
        amp2 = np.abs(eig.from_eigen(np.exp(-1j * eig.values * t) * c0)) ** 2
        for r in rs:
            norms[r][i] = np.sqrt(np.dot(weights[r], amp2))
        bm[i] = boundary_mass(basis, np.sqrt(amp2), boundary_fraction)
    return NormTrace(np.asarray(times, dtype=float), norms, bm)


# --------------------------------------------------------------------------
# interaction picture


class InteractionGenerator:
    """G(t) on a fixed sparsity pattern with per-entry phase rates."""

    def __init__(self, v: TimePeriodicOperator):
        lam = v.basis.eigenvalues
        n = v.basis.dim
        rows, cols, data, rates = [], [], [], []
        for h, op in v.harmonics.items():
            coo = op.tocsr().tocoo()
            keep = coo.data != 0
            rows.append(coo.row[keep])
            cols.append(coo.col[keep])
            data.append(coo.data[keep])
            rates.append(lam[coo.row[keep]] - lam[coo.col[keep]] + h * v.frequency)
        rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        self.data = np.concatenate(data) if data else np.zeros(0, complex)
        self.rates = np.concatenate(rates) if rates else np.zeros(0)
        keys = rows.astype(np.int64) * n + cols
        uniq, self.slot = np.unique(keys, return_inverse=True)
        self.n = n
        self.n_slots = uniq.size
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int32)
        self.static = bool(np.all(np.abs(self.rates) < 1e-12))
        # time-independent bound on every row sum of |G(t)|
        row_abs = np.bincount(rows, weights=np.abs(self.data), minlength=n) if rows.size else np.zeros(n)
        col_abs = np.bincount(cols, weights=np.abs(self.data), minlength=n) if cols.size else np.zeros(n)
        self.bound = float(max(row_abs.max(initial=0.0), col_abs.max(initial=0.0)))

    def at(self, t: float) -> sp.csr_matrix:
        vals = self.data * np.exp(1j * t * self.rates)
        summed = np.bincount(self.slot, weights=vals.real, minlength=self.n_slots) + 1j * np.bincount(
            self.slot, weights=vals.imag, minlength=self.n_slots
        )
        return sp.csr_matrix((summed, self.indices, self.indptr), shape=(self.n, self.n))


class ChebyshevExp:
    """exp(-i tau G) v for hermitian G with spectrum inside [-rho, rho]."""

    def __init__(self, tau: float, rho: float):
        self.rho = max(rho, 1e-300)
        z = tau * self.rho
        kmax = int(abs(z)) + 12
        while abs(jv(kmax, abs(z))) > CHEBYSHEV_TOL:
            kmax += 4
        k = np.arange(kmax + 1)
        coef = 2.0 * (-1j) ** k * jv(k, z)
        coef[0] = jv(0, z)
        self.coef = coef

    def apply(self, g: sp.csr_matrix, v: np.ndarray) -> np.ndarray:
        x = v
        y = (g @ v) / self.rho
        out = self.coef[0] * x + self.coef[1] * y
        for c in self.coef[2:]:
            x, y = y, 2.0 * (g @ y) / self.rho - x
            out = out + c * y
        return out


def _rk4_step(gen: InteractionGenerator, phi: np.ndarray, t: float, tau: float) -> np.ndarray:
    def f(s, y):
        return -1j * (gen.at(s) @ y)

    k1 = f(t, phi)
    k2 = f(t + tau / 2, phi + tau / 2 * k1)
    k3 = f(t + tau / 2, phi + tau / 2 * k2)
    k4 = f(t + tau, phi + tau * k3)
    return phi + tau / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def evolve_periodic(
    v: TimePeriodicOperator,
    psi0: StateVector,
    config: EvolutionConfig,
    *,
    t0: float = 0.0,
    backward: bool = False,
) -> tuple[NormTrace, StateVector]:
    """Integrate i d/dt psi = (K0 + V(t)) psi from t0 over config.t_end.

    Returns the macro-step norm trace (times counted from t0, negative when
    ``backward``) and the final state. Never renormalizes: drift beyond
    ``unitarity_tol`` raises :class:`UnitarityError`, boundary mass beyond
    ``boundary_tol`` raises :class:`TruncationError`.
    """
    if not v.basis.same_as(psi0.basis):
        raise ValueError("state and potential live on different bases")
    if not v.is_selfadjoint():
        raise ValueError("evolution needs a potential that is selfadjoint for all t")
    basis = v.basis
    lam = basis.eigenvalues
    sign = -1.0 if backward else 1.0
    tau = sign * config.micro_dt
    gen = InteractionGenerator(v)
    phi = np.exp(1j * t0 * lam) * psi0.coeffs
    norm0 = float(np.linalg.norm(phi))

    static_eig = None
    if config.method is Method.EXACT_EIG:
        if not gen.static:
            raise ValueError("ExactEig needs a time-independent interaction generator")
        g0 = gen.at(0.0)
        static_eig = eigensystem(TruncatedOperator(basis, 0.5 * (g0 + g0.conj().T), True), cache=False)
    cheb = ChebyshevExp(tau, gen.bound) if config.method is Method.MIDPOINT else None
    g_static = gen.at(0.0) if gen.static else None

    samples = [phi.copy()]
    times = [t0]
    t = t0
    for step in range(1, config.n_macro + 1):
        if static_eig is not None:
            t_next = t0 + sign * step * config.dt
            phi = static_eig.apply(lambda w: np.exp(-1j * w * (t_next - t)), phi)
            t = t_next
        else:
            for _ in range(config.substeps):
                if cheb is not None:
                    g = g_static if g_static is not None else gen.at(t + tau / 2)
                    phi = cheb.apply(g, phi)
                else:
                    phi = _rk4_step(gen, phi, t, tau)
                t += tau
            t = t0 + sign * step * config.dt
        drift = abs(float(np.linalg.norm(phi)) - norm0)
        if drift > config.unitarity_tol:
            raise UnitarityError(t, drift)
        if config.boundary_tol is not None:
            bm = boundary_mass(basis, phi, config.boundary_fraction)
            if bm > config.boundary_tol:
                raise TruncationError(t, bm)
        samples.append(phi.copy())
        times.append(t)
    # |psi_n| = |phi_n|, so the trace can be read off the interaction picture
    rel = np.asarray(times) - t0
    order = np.argsort(rel)
    trace = NormTrace.from_states(rel[order], [samples[i] for i in order], basis, config.rs)
    psi = StateVector(basis, np.exp(-1j * t * lam) * phi)
    return trace, psi
