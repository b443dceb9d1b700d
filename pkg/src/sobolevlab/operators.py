"""Truncated matrices of the concrete operators: shifts, Toeplitz and
multiplication operators, Fourier multipliers, commutators and the
conjugation by the free flow exp(i s K0).

Operators are stored either dense (numpy) or sparse (CSR). Everything that
is banded in the infinite model is built sparse; functional calculus and
exponentials hand back dense matrices.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from numbers import Number
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .basis import BasisKind, BasisModel

HERMITIAN_RTOL = 1e-12


def _as_matrix(m):
    if sp.issparse(m):
        return sp.csr_matrix(m, dtype=complex)
    return np.asarray(m, dtype=complex)


def hermitian_defect(m) -> float:
    """max |M - M^dagger| relative to max |M| (0 for the zero matrix)."""
    if sp.issparse(m):
        d = abs(m - m.conj().T)
        dmax = d.max() if d.nnz else 0.0
        scale = abs(m).max() if m.nnz else 0.0
    else:
        dmax = np.abs(m - m.conj().T).max() if m.size else 0.0
        scale = np.abs(m).max() if m.size else 0.0
    return 0.0 if scale == 0.0 else float(dmax / scale)


@dataclass(frozen=True, eq=False)
class TruncatedOperator:
    basis: BasisModel
    matrix: object
    hermitian: bool = False
    order_tag: float = 0.0

    def __post_init__(self) -> None:
        m = _as_matrix(self.matrix)
        if m.shape != (self.basis.dim, self.basis.dim):
            raise ValueError(f"matrix shape {m.shape} does not match basis dim {self.basis.dim}")
        if self.hermitian:
            defect = hermitian_defect(m)
            if defect > HERMITIAN_RTOL:
                raise ValueError(f"operator flagged hermitian but relative defect is {defect:.3e}")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else self.matrix

    def tocsr(self) -> sp.csr_matrix:
        return self.matrix if self.is_sparse else sp.csr_matrix(self.matrix)

    def max_abs(self) -> float:
        if self.is_sparse:
            return float(abs(self.matrix).max()) if self.matrix.nnz else 0.0
        return float(np.abs(self.matrix).max())

    def is_hermitian(self, rtol: float = HERMITIAN_RTOL) -> bool:
        return hermitian_defect(self.matrix) <= rtol

    def bandwidth(self) -> int:
        """Largest |i - j| over the nonzero entries (internal index order)."""
        coo = self.tocsr().tocoo()
        if coo.nnz == 0:
            return 0
        nz = coo.data != 0
        if not nz.any():
            return 0
        return int(np.abs(coo.row[nz] - coo.col[nz]).max())

    def adjoint(self) -> "TruncatedOperator":
        return TruncatedOperator(self.basis, self.matrix.conj().T, self.hermitian, self.order_tag)

    @property
    def H(self) -> "TruncatedOperator":
        return self.adjoint()

    def _check(self, other: "TruncatedOperator") -> None:
        if not self.basis.same_as(other.basis):
            raise ValueError(f"basis mismatch: {self.basis.kind.value}/{self.dim} vs {other.basis.kind.value}/{other.dim}")

    @staticmethod
    def _combine(a, b, fn):
        if sp.issparse(a) and sp.issparse(b):
            return fn(a, b)
        a = a.toarray() if sp.issparse(a) else a
        b = b.toarray() if sp.issparse(b) else b
        return fn(a, b)

    def __add__(self, other):
        if isinstance(other, TruncatedOperator):
            self._check(other)
            m = self._combine(self.matrix, other.matrix, lambda x, y: x + y)
            return TruncatedOperator(self.basis, m, self.hermitian and other.hermitian, max(self.order_tag, other.order_tag))
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, TruncatedOperator):
            self._check(other)
            m = self._combine(self.matrix, other.matrix, lambda x, y: x - y)
            return TruncatedOperator(self.basis, m, self.hermitian and other.hermitian, max(self.order_tag, other.order_tag))
        return NotImplemented

    def __neg__(self):
        return TruncatedOperator(self.basis, -self.matrix, self.hermitian, self.order_tag)

    def __mul__(self, c):
        if isinstance(c, Number):
            herm = self.hermitian and complex(c).imag == 0.0
            return TruncatedOperator(self.basis, self.matrix * c, herm, self.order_tag)
        return NotImplemented

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, TruncatedOperator):
            self._check(other)
            m = self._combine(self.matrix, other.matrix, lambda x, y: x @ y)
            return TruncatedOperator(self.basis, m, False, self.order_tag + other.order_tag)
        return self.matrix @ np.asarray(other)


def identity(basis: BasisModel, sparse: bool = True) -> TruncatedOperator:
    m = sp.identity(basis.dim, dtype=complex, format="csr") if sparse else np.eye(basis.dim, dtype=complex)
    return TruncatedOperator(basis, m, True, 0.0)


def zero(basis: BasisModel, sparse: bool = True) -> TruncatedOperator:
    m = sp.csr_matrix((basis.dim, basis.dim), dtype=complex) if sparse else np.zeros((basis.dim,) * 2, complex)
    return TruncatedOperator(basis, m, True, 0.0)


def k0_operator(basis: BasisModel, power: float = 1.0) -> TruncatedOperator:
    m = sp.diags(basis.eigenvalues**power, 0, format="csr", dtype=complex)
    return TruncatedOperator(basis, m, True, float(power))


def diagonal(basis: BasisModel, values) -> TruncatedOperator:
    values = np.asarray(values)
    herm = bool(np.all(np.imag(values) == 0))
    return TruncatedOperator(basis, sp.diags(values.astype(complex), 0, format="csr"), herm, 0.0)


def shift_power(basis: BasisModel, k: int) -> TruncatedOperator:
    """S^k with S e_n = e_{n+1}; the image of e_n for n > N - k is dropped."""
    if basis.kind is not BasisKind.HARMONIC:
        raise ValueError("shift operators live on the Harmonic basis")
    if k < 1 or k >= basis.dim:
        raise ValueError(f"shift power must satisfy 1 <= k < N, got k={k}, N={basis.dim}")
    m = sp.diags(np.ones(basis.dim - k, dtype=complex), -k, format="csr")
    return TruncatedOperator(basis, m, False, 0.0)


@dataclass(frozen=True)
class ToeplitzSpec:
    """Entries constant along diagonals: M_{mn} = diagonals[m - n]."""

    diagonals: Mapping[int, complex] = field(default_factory=dict)
    decay_exponent: float = 0.0

    @property
    def is_hermitian(self) -> bool:
        for d, v in self.diagonals.items():
            partner = self.diagonals.get(-d, 0.0)
            if abs(complex(partner) - np.conj(complex(v))) > 1e-14 * max(1.0, abs(v)):
                return False
        return True

    def decay_constant(self) -> float:
        """Smallest C with |V_d| <= C / <d>^decay_exponent."""
        if not self.diagonals:
            return 0.0
        return max(abs(complex(v)) * (1.0 + d * d) ** (self.decay_exponent / 2) for d, v in self.diagonals.items())


def toeplitz(basis: BasisModel, spec: ToeplitzSpec) -> TruncatedOperator:
    if basis.kind is not BasisKind.HARMONIC:
        raise ValueError("Toeplitz operators are defined on the Harmonic basis")
    n = basis.dim
    diags, offsets = [], []
    for d, v in sorted(spec.diagonals.items()):
        if abs(d) >= n:
            warnings.warn(f"Toeplitz offset {d} does not fit in dimension {n}; ignored", stacklevel=2)
            continue
        # offset d = m - n sits on the d-th subdiagonal
        diags.append(np.full(n - abs(d), complex(v)))
        offsets.append(-d)
    if not diags:
        return zero(basis)
    m = sp.diags(diags, offsets, shape=(n, n), format="csr", dtype=complex)
    return TruncatedOperator(basis, m, spec.is_hermitian, 0.0)


def _pairs_with_offset(basis: BasisModel, offset: int):
    """Internal (row, col) pairs whose Fourier labels differ by ``offset``."""
    half = (basis.dim - 1) // 2
    rows = np.arange(basis.dim)
    target = basis.labels - offset
    ok = np.abs(target) <= half
    rows = rows[ok]
    cols = np.array([basis.index_of(int(t)) for t in target[ok]], dtype=np.int64)
    return rows, cols


def multiplication_op(basis: BasisModel, fourier_coeffs: Mapping[int, complex]) -> TruncatedOperator:
    """Multiplication by v(x) = sum_j v_j e^{ijx}: M_{mn} = v_{m-n} in Fourier labels."""
    if basis.kind is not BasisKind.HALFWAVE:
        raise ValueError("multiplication operators are defined on the HalfWave basis")
    rows, cols, vals = [], [], []
    for j, v in fourier_coeffs.items():
        if complex(v) == 0:
            continue
        r, c = _pairs_with_offset(basis, int(j))
        rows.append(r)
        cols.append(c)
        vals.append(np.full(r.size, complex(v)))
    if not rows:
        return zero(basis)
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(basis.dim, basis.dim),
        dtype=complex,
    )
    herm = all(
        abs(complex(fourier_coeffs.get(-j, 0.0)) - np.conj(complex(v))) <= 1e-14 * max(1.0, abs(v))
        for j, v in fourier_coeffs.items()
    )
    return TruncatedOperator(basis, m, herm, 0.0)


def fourier_multiplier(basis: BasisModel, rule: Callable[[np.ndarray], np.ndarray], order: float = 0.0) -> TruncatedOperator:
    """Diagonal operator with symbol ``rule`` evaluated on the Fourier labels."""
    if basis.kind is not BasisKind.HALFWAVE:
        raise ValueError("Fourier multipliers are defined on the HalfWave basis")
    labels = basis.labels
    try:
        values = np.asarray(rule(labels), dtype=float)
        if values.shape != labels.shape:
            raise ValueError
    except (TypeError, ValueError):
        values = np.array([float(rule(int(j))) for j in labels])
    return TruncatedOperator(basis, sp.diags(values.astype(complex), 0, format="csr"), True, order)


def abs_derivative(basis: BasisModel) -> TruncatedOperator:
    return fourier_multiplier(basis, np.abs, order=1.0)


def derivative_symbol(basis: BasisModel) -> TruncatedOperator:
    """D = d/(i dx), symbol j."""
    return fourier_multiplier(basis, lambda j: j.astype(float), order=1.0)


def fourier_projectors(basis: BasisModel) -> tuple[TruncatedOperator, TruncatedOperator, TruncatedOperator]:
    """(Pi_+, Pi_-, Pi_0)."""
    plus = fourier_multiplier(basis, lambda j: (j >= 1).astype(float))
    minus = fourier_multiplier(basis, lambda j: (j <= -1).astype(float))
    zero_ = fourier_multiplier(basis, lambda j: (j == 0).astype(float))
    return plus, minus, zero_


def conjugate_by_free_flow(a: TruncatedOperator, s: float) -> TruncatedOperator:
    """exp(i s K0) A exp(-i s K0), computed entrywise as e^{is(lam_m - lam_n)} A_mn."""
    lam = a.basis.eigenvalues
    if a.is_sparse:
        coo = a.matrix.tocoo()
        phase = np.exp(1j * s * (lam[coo.row] - lam[coo.col]))
        m = sp.csr_matrix((coo.data * phase, (coo.row, coo.col)), shape=coo.shape)
    else:
        p = np.exp(1j * s * lam)
        m = p[:, None] * a.matrix * p.conj()[None, :]
    return TruncatedOperator(a.basis, m, a.hermitian, a.order_tag)


def commutator(a: TruncatedOperator, b: TruncatedOperator) -> TruncatedOperator:
    """[A, B] = AB - BA."""
    a._check(b)
    m = TruncatedOperator._combine(a.matrix, b.matrix, lambda x, y: x @ y - y @ x)
    return TruncatedOperator(a.basis, m, False, a.order_tag + b.order_tag - 1.0)


def ad_power(a: TruncatedOperator, b: TruncatedOperator, n: int) -> TruncatedOperator:
    """ad_A^n(B) with ad_A^n(B) = [ad_A^{n-1}(B), A]."""
    if n < 0:
        raise ValueError("ad power must be nonnegative")
    out = b
    for _ in range(n):
        out = commutator(out, a)
    return out


def hermitian_part(a: TruncatedOperator, order_tag: float | None = None) -> TruncatedOperator:
    m = 0.5 * (a.matrix + a.matrix.conj().T)
    return TruncatedOperator(a.basis, m, True, a.order_tag if order_tag is None else order_tag)


def interior_indices(basis: BasisModel, width: int, low_edge: int = 0) -> np.ndarray:
    """Internal indices at distance > ``width`` from the truncation edge.

    ``low_edge`` additionally removes the ``low_edge`` lowest labels (Hermite
    n <= low_edge, Fourier modes |j| < low_edge).
    """
    if basis.kind is BasisKind.HARMONIC:
        lab = basis.labels
        ok = (lab <= basis.dim - width) & (lab > low_edge)
    else:
        half = (basis.dim - 1) // 2
        a = np.abs(basis.labels)
        ok = (a <= half - width) & (a >= low_edge)
    return np.flatnonzero(ok)


def interior_mask(basis: BasisModel, width: int, low_edge: int = 0) -> np.ndarray:
    idx = interior_indices(basis, width, low_edge)
    ok = np.zeros(basis.dim, dtype=bool)
    ok[idx] = True
    return np.outer(ok, ok)


def masked_max(diff, mask: np.ndarray) -> float:
    d = diff.toarray() if sp.issparse(diff) else np.asarray(diff)
    sel = np.abs(d[mask])
    return float(sel.max()) if sel.size else 0.0


def order_diagnostic(a: TruncatedOperator, m: float, edge: int | None = None) -> float:
    """Smallest C with |M_pq| <= C (1+p+q)^m / <p-q>^2 on the truncation interior.

    A cheap proxy for membership in the order-m class: C stays bounded as N
    grows for genuine order-m operators and diverges otherwise.
    """
    if a.basis.kind is not BasisKind.HARMONIC:
        raise ValueError("order diagnostic is defined on the Harmonic basis")
    if edge is None:
        edge = max(1, a.bandwidth())
    keep = np.zeros(a.dim, dtype=bool)
    keep[interior_indices(a.basis, edge)] = True
    coo = a.tocsr().tocoo()
    sel = keep[coo.row] & keep[coo.col] & (coo.data != 0)
    if not sel.any():
        return 0.0
    p = a.basis.labels[coo.row[sel]].astype(float)
    q = a.basis.labels[coo.col[sel]].astype(float)
    ratio = np.abs(coo.data[sel]) * (1.0 + (p - q) ** 2) / (1.0 + p + q) ** m
    return float(ratio.max())
