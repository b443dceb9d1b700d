"""Truncated spectral bases, the operator K0 and the Sobolev scale.

Two models are supported:

* ``Harmonic``: Hermite basis e_1..e_N with K0 e_n = (n - 1/2) e_n.
* ``HalfWave``: Fourier modes on the circle, K0 = |D| + 1, stored in the
  interleaved order 0, 1, -1, 2, -2, ... so that every truncation is
  symmetric in frequency.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class BasisKind(str, enum.Enum):
    HARMONIC = "Harmonic"
    HALFWAVE = "HalfWave"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BasisModel:
    """A truncated eigenbasis of K0.

    ``labels[i]`` is the physical label of internal index ``i`` (Hermite
    index n >= 1, or Fourier mode j), ``eigenvalues[i]`` the matching
    eigenvalue of K0.
    """

    kind: BasisKind
    dim: int
    eigenvalues: np.ndarray
    labels: np.ndarray
    spectral_shift: float
    _index: dict = field(repr=False, default_factory=dict)

    def index_of(self, label: int) -> int:
        try:
            return self._index[int(label)]
        except KeyError:
            raise KeyError(f"label {label} not present in {self.kind.value} basis of dim {self.dim}") from None

    def label_of(self, index: int) -> int:
        return int(self.labels[index])

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues.min())

    @property
    def natural_order(self) -> np.ndarray:
        """Permutation sorting internal indices by physical label.

        Banded operators (shifts, multiplications) are banded in this order.
        """
        return np.argsort(self.labels, kind="stable")

    def same_as(self, other: "BasisModel") -> bool:
        return self is other or (self.kind == other.kind and self.dim == other.dim)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BasisModel) and self.same_as(other)

    def __hash__(self) -> int:
        return hash((self.kind, self.dim))


def halfwave_labels(dim: int) -> np.ndarray:
    labels = np.empty(dim, dtype=np.int64)
    labels[0] = 0
    j = np.arange(1, dim)
    # 1 -> 1, 2 -> -1, 3 -> 2, 4 -> -2, ...
    labels[1:] = np.where(j % 2 == 1, (j + 1) // 2, -(j // 2))
    return labels


def make_basis(kind: BasisKind | str, dim: int) -> BasisModel:
    kind = BasisKind(kind)
    if dim < 2:
        raise ValueError(f"truncation dimension must be >= 2, got {dim}")
    if kind is BasisKind.HARMONIC:
        labels = np.arange(1, dim + 1, dtype=np.int64)
        eigenvalues = labels - 0.5
        shift = 0.5
    else:
        if dim % 2 == 0:
            raise ValueError(f"HalfWave truncation needs an odd dimension, got {dim}")
        labels = halfwave_labels(dim)
        eigenvalues = np.abs(labels) + 1.0
        shift = 0.0
    index = {int(lab): i for i, lab in enumerate(labels)}
    return BasisModel(
        kind=kind,
        dim=int(dim),
        eigenvalues=_frozen(eigenvalues.astype(float)),
        labels=_frozen(labels),
        spectral_shift=shift,
        _index=index,
    )


@dataclass(frozen=True, eq=False)
class StateVector:
    basis: BasisModel
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (self.basis.dim,):
            raise ValueError(f"coefficient vector has shape {c.shape}, basis dim is {self.basis.dim}")
        object.__setattr__(self, "coeffs", c)

    def norm(self, r: float = 0.0) -> float:
        return sobolev_norm(self, r)

    def normalized(self) -> "StateVector":
        n = np.linalg.norm(self.coeffs)
        if n == 0.0:
            raise ValueError("cannot normalize the zero vector")
        return StateVector(self.basis, self.coeffs / n)


def sobolev_norm(psi: StateVector, r: float) -> float:
    """||K0^r psi||_0 for real r."""
    if r == 0:
        return float(np.linalg.norm(psi.coeffs))
    w = psi.basis.eigenvalues ** float(r)
    return float(np.linalg.norm(w * psi.coeffs))


def sobolev_norms(basis: BasisModel, coeffs: np.ndarray, rs) -> dict[float, float]:
    amp2 = np.abs(coeffs) ** 2
    out = {}
    for r in rs:
        out[float(r)] = float(np.sqrt(np.sum(basis.eigenvalues ** (2.0 * r) * amp2)))
    return out


def free_flow(psi: StateVector, t: float) -> StateVector:
    """Apply exp(-i t K0)."""
    return StateVector(psi.basis, np.exp(-1j * t * psi.basis.eigenvalues) * psi.coeffs)


def basis_vector(basis: BasisModel, label: int) -> StateVector:
    c = np.zeros(basis.dim, dtype=complex)
    c[basis.index_of(label)] = 1.0
    return StateVector(basis, c)


def wave_packet(basis: BasisModel, center: float, width: float, rho: float) -> StateVector:
    """Normalized Gaussian packet sum_l exp(-(l-center)^2 / 2 width^2) e^{i rho l} e_l.

    ``l`` runs over physical labels; ``rho`` sets the carrier phase, i.e. the
    momentum of the packet.
    """
    if width <= 0:
        raise ValueError("packet width must be positive")
    lab = basis.labels.astype(float)
    c = np.exp(-((lab - center) ** 2) / (2.0 * width**2)) * np.exp(1j * rho * lab)
    return StateVector(basis, c).normalized()


def boundary_mass(basis: BasisModel, coeffs: np.ndarray, fraction: float = 0.05) -> float:
    """Share of |psi|^2 carried by the top ``fraction`` of K0 eigenmodes."""
    amp2 = np.abs(coeffs) ** 2
    total = amp2.sum()
    if total == 0.0:
        return 0.0
    count = max(1, int(np.ceil(fraction * basis.dim)))
    # both index orders list K0 eigenvalues in nondecreasing order
    return float(amp2[-count:].sum() / total)
