"""Norm traces, power-law fits and local energy decay."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import StateVector, boundary_mass, sobolev_norms
from .mourre import Eigensystem, MourreReport, SpectralWindow, eigensystem
from .operators import TruncatedOperator

MIN_FIT_SAMPLES = 10
BOOTSTRAP_RESAMPLES = 200
BOOTSTRAP_BLOCK = 10


class FitError(ValueError):
    pass


def _rkey(r: float) -> str:
    r = float(r)
    return f"norm_{int(r)}" if r == int(r) else f"norm_{r:g}"


@dataclass
class NormTrace:
    times: np.ndarray
    norms: dict[float, np.ndarray]
    boundary_mass: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.norms = {float(r): np.asarray(v, dtype=float) for r, v in self.norms.items()}
        self.boundary_mass = np.asarray(self.boundary_mass, dtype=float)
        n = self.times.size
        if any(v.size != n for v in self.norms.values()) or self.boundary_mass.size != n:
            raise ValueError("trace columns must all match the time axis")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trace times must be strictly increasing")

    @classmethod
    def from_states(cls, times, states: Sequence[np.ndarray], basis, rs) -> "NormTrace":
        rs = sorted(set([0.0] + [float(r) for r in rs]))
        norms = {r: [] for r in rs}
        bm = []
        for c in states:
            for r, v in sobolev_norms(basis, c, rs).items():
                norms[r].append(v)
            bm.append(boundary_mass(basis, c))
        return cls(np.asarray(times), norms, np.asarray(bm))

    @property
    def rs(self) -> list[float]:
        return sorted(self.norms)

    def _column_order(self) -> list[float]:
        # t, the L2 norm, then every other r in increasing order
        return sorted(self.rs, key=lambda r: (r != 0.0, r))

    def columns(self) -> list[str]:
        return ["t"] + [_rkey(r) for r in self._column_order()] + ["boundary_mass"]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        order = self._column_order()
        for i, t in enumerate(self.times):
            w.writerow([repr(float(t))] + [repr(float(self.norms[r][i])) for r in order] + [repr(float(self.boundary_mass[i]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "NormTrace":
        text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else str(source)
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        norms = {}
        for j, name in enumerate(header[1:-1], start=1):
            norms[float(name.removeprefix("norm_"))] = body[:, j]
        return cls(body[:, 0], norms, body[:, -1])

    def window(self, t_min: float, t_max: float) -> np.ndarray:
        return (self.times >= t_min) & (self.times <= t_max)

    def l2_drift(self) -> float:
        n0 = self.norms[0.0]
        return float(np.abs(n0 - n0[0]).max())


@dataclass
class FitReport:
    r: float
    fitted_exponent: float
    ci_halfwidth: float
    fit_window: tuple[float, float]
    residual: float
    samples: int
    window_rule: str = "user"
    passed: bool | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fit_window"] = list(self.fit_window)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _block_bootstrap_slope(x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> float:
    n = x.size
    block = min(BOOTSTRAP_BLOCK, n)
    starts = np.arange(0, n - block + 1)
    nblocks = math.ceil(n / block)
    slopes = np.empty(BOOTSTRAP_RESAMPLES)
    for b in range(BOOTSTRAP_RESAMPLES):
        pick = rng.choice(starts, size=nblocks)
        idx = np.concatenate([np.arange(s, s + block) for s in pick])[:n]
        slopes[b] = np.polyfit(x[idx], y[idx], 1)[0] if np.ptp(x[idx]) > 0 else np.nan
    lo, hi = np.nanpercentile(slopes, [2.5, 97.5])
    return float(0.5 * (hi - lo))


def power_law_fit(times, values, r: float = 0.0, window: tuple[float, float] | None = None, seed: int = 0) -> FitReport:
    """Least-squares slope of log(values) against log(t) with a block-bootstrap CI."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    rule = "user"
    if window is None:
        window = (float(0.1 * t[-1]), float(t[-1]))
        rule = "default: [0.1 t_end, t_end]"
    sel = (t >= window[0]) & (t <= window[1]) & (t > 0)
    if sel.sum() < MIN_FIT_SAMPLES:
        raise FitError(f"fit window {window} holds {int(sel.sum())} samples, need {MIN_FIT_SAMPLES}")
    if np.any(v[sel] <= 0):
        raise FitError("power-law fit needs positive values")
    x, y = np.log(t[sel]), np.log(v[sel])
    coef = np.polyfit(x, y, 1)
    res = float(np.sqrt(np.mean((y - np.polyval(coef, x)) ** 2)))
    ci = _block_bootstrap_slope(x, y, np.random.default_rng(seed))
    return FitReport(float(r), float(coef[0]), ci, (float(window[0]), float(window[1])), res, int(sel.sum()), rule)


def fit_growth_exponent(trace: NormTrace, r: float, window: tuple[float, float] | None = None) -> FitReport:
    return power_law_fit(trace.times, trace.norms[float(r)], r, window)


def fit_decay_exponent(trace: NormTrace, r: float, window: tuple[float, float] | None = None) -> FitReport:
    """Same fit as growth; ``r`` is the (negative) Sobolev index, slopes come out negative."""
    return power_law_fit(trace.times, trace.norms[float(r)], r, window)


def duality_defect(trace: NormTrace, r: float) -> float:
    """max_t (||phi_0||^2 - ||phi||_r ||phi||_{-r}); nonpositive when the inequality holds."""
    r = abs(float(r))
    n0 = trace.norms[0.0][0] ** 2
    return float(np.max(n0 - trace.norms[r] * trace.norms[-r]))


# --------------------------------------------------------------------------
# local energy decay


class UncertifiedWindowError(ValueError):
    pass


@dataclass
class _Resolvent:
    """Quadratic forms of (1 + A^2)^{-k} through sparse LU solves."""

    lu: object

    @classmethod
    def build(cls, a: TruncatedOperator) -> "_Resolvent":
        m = a.tocsr()
        op = (sp.identity(a.dim, format="csc", dtype=complex) + (m @ m).tocsc())
        return cls(spla.splu(op))

    def weighted_norm(self, v: np.ndarray, k: int) -> float:
        """||<A>^{-k} v|| = <v, (1+A^2)^{-k} v>^{1/2}."""
        w = np.asarray(v, dtype=complex)
        if k % 2 == 0:
            for _ in range(k // 2):
                w = self.lu.solve(w)
            return float(np.linalg.norm(w))
        x = w
        for _ in range(k):
            x = self.lu.solve(x)
        return float(np.sqrt(max(0.0, np.vdot(w, x).real)))


def anchored_weight_norm(a: TruncatedOperator, v: np.ndarray, k: int) -> float:
    """||<A>^{k} v|| = <v, (1+A^2)^k v>^{1/2} by repeated sparse products."""
    m = a.tocsr()
    w = np.asarray(v, dtype=complex)
    for _ in range(k):
        w = w + m @ (m @ w)
    return float(np.sqrt(max(0.0, np.vdot(np.asarray(v, dtype=complex), w).real)))


@dataclass
class LocalDecayReport:
    k: int
    fit: FitReport | None
    times: list[float]
    lhs: list[float]
    rhs: float
    ratio_max: float
    vacuous: bool
    passed: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fit"] = None if self.fit is None else self.fit.to_dict()
        return d


def local_energy_decay_check(
    h: TruncatedOperator,
    a: TruncatedOperator,
    window: SpectralWindow,
    phi: StateVector,
    k: int,
    times,
    *,
    certificate: MourreReport,
    fit_window: tuple[float, float] | None = None,
    slack: float = 0.3,
    eig: Eigensystem | None = None,
    vacuous_floor: float = 1e-12,
) -> LocalDecayReport:
    """Track ||<A>^{-k} e^{-iHt} g(H) phi|| over ``times`` and fit its decay.

    Passes when the fitted exponent is at most -k + ``slack``. The window
    must sit inside a strictly certified Mourre interval.
    """
    if not certificate.strict_passed or certificate.strict_window is None:
        raise UncertifiedWindowError("local decay needs a window with a strict Mourre certificate")
    cw = certificate.strict_window
    lo, hi = window.support
    if lo < cw.lo - cw.delta - 1e-12 or hi > cw.hi + cw.delta + 1e-12:
        raise UncertifiedWindowError(f"window support ({lo:g}, {hi:g}) leaves the certified interval")
    eig = eig or eigensystem(h)
    c0 = window.bump(eig.values) * eig.to_eigen(phi.coeffs)
    g_phi = eig.from_eigen(c0)
    rhs = anchored_weight_norm(a, g_phi, k)
    res = _Resolvent.build(a)
    times = np.asarray(times, dtype=float)
    lhs = np.array([res.weighted_norm(eig.from_eigen(np.exp(-1j * eig.values * t) * c0), k) for t in times])
    if np.linalg.norm(g_phi) <= vacuous_floor * max(np.linalg.norm(phi.coeffs), 1e-300):
        return LocalDecayReport(k, None, times.tolist(), lhs.tolist(), rhs, 0.0, True, True)
    fit = power_law_fit(times, lhs, -k, fit_window)
    fit.passed = fit.fitted_exponent <= -k + slack
    ratio = float(np.max(lhs * (1.0 + times**2) ** (k / 2) / rhs))
    return LocalDecayReport(k, fit, times.tolist(), lhs.tolist(), rhs, ratio, False, bool(fit.passed))


# --------------------------------------------------------------------------
# truncation convergence


@dataclass
class ConvergenceReport:
    dims: list[int]
    differences: list[float]
    monotone: bool
    converged: bool
    failures: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def truncation_convergence(runner: Callable[[int], NormTrace], dims: Sequence[int], threshold: float = 0.01) -> ConvergenceReport:
    """Rerun at each dim and compare consecutive traces on their common times."""
    dims = list(dims)
    if len(dims) < 3 or any(b <= a for a, b in zip(dims, dims[1:])):
        raise ValueError("need at least three increasing dims")
    traces, failures = {}, {}
    for d in dims:
        try:
            traces[d] = runner(d)
        except Exception as exc:  # a failed refinement is part of the verdict
            failures[d] = f"{type(exc).__name__}: {exc}"
    diffs = []
    for a, b in zip(dims, dims[1:]):
        if a not in traces or b not in traces:
            diffs.append(float("inf"))
            continue
        ta, tb = traces[a], traces[b]
        common = np.intersect1d(ta.times, tb.times)
        worst = 0.0
        for r in set(ta.rs) & set(tb.rs):
            va = ta.norms[r][np.isin(ta.times, common)]
            vb = tb.norms[r][np.isin(tb.times, common)]
            scale = np.maximum(np.abs(vb), 1e-300)
            worst = max(worst, float(np.max(np.abs(va - vb) / scale)) if common.size else 0.0)
        diffs.append(worst)
    finite = [d for d in diffs if np.isfinite(d)]
    monotone = len(finite) == len(diffs) and all(y <= x * (1 + 1e-9) + 1e-15 for x, y in zip(diffs, diffs[1:]))
    converged = bool(diffs and np.isfinite(diffs[-1]) and diffs[-1] < threshold)
    return ConvergenceReport(dims, diffs, monotone, converged, failures)
