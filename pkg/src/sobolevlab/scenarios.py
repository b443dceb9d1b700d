"""Named experiments: build operators, certify, evolve, fit, persist.

Each run writes ``<output_dir>/<name>/`` with ``trace.csv``, ``mourre.json``,
``fits.json``, ``manifest.json`` and ``ops/*.mat``; files that do not apply
to a model are omitted.
"""

from __future__ import annotations

import contextlib
import json
import platform
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import scipy.sparse as sp

from . import __version__
from .averaging import (
    TimePeriodicOperator,
    cos_drive,
    entry_decay_exponent,
    free_conjugated,
    halfwave_potential,
    halfwave_remainder,
    resonant_avg,
)
from .basis import BasisKind, BasisModel, StateVector, basis_vector, make_basis, wave_packet
from .config import EVOLVING_MODELS, Model, ScenarioConfig, config_to_json
from .diagnostics import (
    FitError,
    NormTrace,
    duality_defect,
    fit_decay_exponent,
    fit_growth_exponent,
    local_energy_decay_check,
    power_law_fit,
    truncation_convergence,
)
from .matfile import write_operator
from .mourre import (
    MourreReport,
    SpectralWindow,
    cascade_initial_datum,
    conjugate_operator_halfwave,
    conjugate_operator_harmonic,
    eigensystem,
    halfwave_average,
    harmonic_average,
    mourre_check,
    padded_commutator,
    weyl_residual,
)
from .normal_form import normal_form
from .operators import ToeplitzSpec, TruncatedOperator, order_diagnostic, toeplitz
from .propagator import EvolutionConfig, evolve_periodic, static_trace

EXIT_OK = 0
EXIT_STAGE = 2
EXIT_FIT = 3
ORDER_PROXY_RTOL = 0.1


class StageError(RuntimeError):
    def __init__(self, stage: str, payload: dict):
        super().__init__(f"stage '{stage}' failed: {payload.get('error')}")
        self.stage, self.payload = stage, payload


@contextlib.contextmanager
def _stage(name: str, log: list):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        payload = {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(limit=4)}
        log.append({"stage": name, "status": "failed", **payload})
        raise StageError(name, payload) from exc
    log.append({"stage": name, "status": "ok"})


# --------------------------------------------------------------------------
# model building blocks


def basis_for(cfg: ScenarioConfig, dim: int | None = None) -> BasisModel:
    kind = BasisKind.HALFWAVE if cfg.model is Model.HALFWAVE_TRANSPORTER else BasisKind.HARMONIC
    return make_basis(kind, dim or cfg.dim)


def toeplitz_source(cfg: ScenarioConfig, basis: BasisModel) -> TruncatedOperator:
    p = cfg.potential
    if p.toeplitz is not None:
        diags = {int(d): complex(v) for d, v in p.toeplitz.items()}
    else:
        diags = {p.k: complex(p.v_k), -p.k: complex(p.v_k).conjugate()}
    return toeplitz(basis, ToeplitzSpec(diags))


def random_perturbation(basis: BasisModel, bandwidth: int, seed: int) -> TruncatedOperator:
    """Seeded hermitian band matrix with <d>^{-2} envelope, max row sum 1."""
    rng = np.random.default_rng(seed)
    n = basis.dim
    diags, offsets = [rng.standard_normal(n).astype(complex)], [0]
    for d in range(1, bandwidth + 1):
        z = (rng.standard_normal(n - d) + 1j * rng.standard_normal(n - d)) / np.sqrt(2.0)
        z *= 1.0 / (1.0 + d * d)
        diags += [z, z.conj()]
        offsets += [-d, d]
    m = sp.diags(diags, offsets, shape=(n, n), format="csr", dtype=complex)
    m = 0.5 * (m + m.conj().T)
    row = np.asarray(abs(m).sum(axis=1)).ravel().max()
    return TruncatedOperator(basis, (m / row).tocsr(), True, 0.0)


def potential_for(cfg: ScenarioConfig, basis: BasisModel) -> TimePeriodicOperator:
    p = cfg.potential
    m = cfg.model
    if m is Model.HALFWAVE_TRANSPORTER:
        return halfwave_potential(basis, {int(j): complex(v) for j, v in p.v_coeffs.items()}, p.j)
    src = toeplitz_source(cfg, basis)
    if m in (Model.HARMONIC_UNIVERSAL, Model.EFFECTIVE_FLOW_DECAY, Model.MOURRE_AUDIT):
        return free_conjugated(src)
    if m is Model.PERTURBED_TRANSPORTER:
        pert = p.perturbation
        w = random_perturbation(basis, pert.bandwidth, pert.seed)
        return free_conjugated(src) + cos_drive(w * pert.epsilon, 1)
    if m is Model.NON_RESONANT_CONTROL:
        return cos_drive(src, p.k, p.drive_frequency)
    return cos_drive(src, p.k)


def principal_pair(cfg: ScenarioConfig, basis: BasisModel, avg: TruncatedOperator | None = None):
    """(H0, A, builder) for the Mourre stage, or None if <V> has no transport part."""
    p = cfg.potential
    if cfg.model is Model.HALFWAVE_TRANSPORTER:
        vj = complex(p.v_coeffs[p.j])

        def build(b):
            return halfwave_average(b, vj, p.j), conjugate_operator_halfwave(b, vj, p.j)

        return build(basis) + (build, 2 * abs(p.j))
    if avg is None:
        # the perturbation is not part of the principal symbol
        base = free_conjugated(toeplitz_source(cfg, basis)) if cfg.model is Model.PERTURBED_TRANSPORTER else potential_for(cfg, basis)
        avg = resonant_avg(base)
    # coefficient of S^k in <V>: H0 = c S^k + conj(c) S^{*k}
    c = complex(avg.tocsr()[p.k, 0])
    if c == 0:
        return None

    def build(b):
        return harmonic_average(b, p.k, 2 * c), conjugate_operator_harmonic(b, p.k, 2 * c)

    return build(basis) + (build, 2 * p.k)


def initial_state(cfg: ScenarioConfig, basis: BasisModel) -> StateVector:
    ini = cfg.initial
    if ini.kind == "basis":
        return basis_vector(basis, ini.label)
    return wave_packet(basis, ini.center, ini.width, ini.rho)


def window_for(cfg: ScenarioConfig) -> SpectralWindow | None:
    w = cfg.window
    return None if w is None else SpectralWindow(w.lo, w.hi, w.delta)


def certify(cfg: ScenarioConfig, basis: BasisModel, h0, a, build, pad, window) -> MourreReport:
    ms = cfg.mourre
    kw = dict(allowance_rank=ms.allowance_rank, tol=ms.tol)
    if ms.edge_policy == "pad":
        kw["commutator"] = padded_commutator(build, basis, pad)
    elif ms.edge_policy == "trim":
        kw["edge_width"] = pad
    return mourre_check(h0, a, window, **kw)


# --------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    exit_code: int
    outdir: Path | None
    summary: dict = field(default_factory=dict)
    trace: NormTrace | None = None


def _fit_window(cfg: ScenarioConfig, t_end: float) -> tuple[float, float]:
    lo = cfg.fit.t_min if cfg.fit.t_min is not None else 0.1 * t_end
    hi = cfg.fit.t_max if cfg.fit.t_max is not None else t_end
    return lo, hi


def _check_expectations(cfg: ScenarioConfig, fits: dict) -> list[str]:
    bad = []
    for r, rng in cfg.fit.expect.items():
        rep = fits.get(str(float(r)))
        if rep is None:
            bad.append(f"r={r}: no fit available")
        elif not rng.lo <= rep["fitted_exponent"] <= rng.hi:
            bad.append(f"r={r}: exponent {rep['fitted_exponent']:.4f} outside [{rng.lo}, {rng.hi}]")
    return bad


def _evolve_run(cfg, basis, log, artifacts, ops):
    with _stage("build", log):
        v = potential_for(cfg, basis)
        ops["V_h0"] = v.harmonics.get(0)
    with _stage("average", log):
        avg = resonant_avg(v)
        ops["average"] = avg
        artifacts["average_max_entry"] = avg.max_abs()
        if cfg.model is Model.HALFWAVE_TRANSPORTER:
            p = cfg.potential
            rem = halfwave_remainder(avg, complex(p.v_coeffs[p.j]), p.j)
            artifacts["remainder"] = entry_decay_exponent(rem, 2 * abs(p.j) + 2)
    window = window_for(cfg)
    h0 = None
    if window is not None:
        with _stage("mourre", log):
            own_avg = cfg.model not in (Model.HALFWAVE_TRANSPORTER, Model.PERTURBED_TRANSPORTER)
            pair = principal_pair(cfg, basis, avg if own_avg else None)
            if pair is None:
                artifacts["mourre"] = {"skipped": "resonant average has no transport part"}
            else:
                h0, a, build, pad = pair
                artifacts["mourre"] = certify(cfg, basis, h0, a, build, pad, window).to_dict()
                ops["H0"], ops["A"] = h0, a
    with _stage("initial", log):
        psi0 = initial_state(cfg, basis)
        if cfg.initial.project:
            if h0 is None:
                raise ValueError("projection needs a certified principal pair")
            psi0 = cascade_initial_datum(h0, window, psi0)
    with _stage("evolve", log):
        evo = cfg.evolution.model_copy(update={"rs": sorted(set(cfg.rs))})
        trace, _ = evolve_periodic(v, psi0, evo)
    with _stage("fit", log):
        fits = {}
        win = _fit_window(cfg, evo.t_end)
        for r in sorted(set(cfg.rs)):
            if r == 0:
                continue
            fits[str(float(r))] = fit_growth_exponent(trace, r, win).to_dict()
        fits["l2_drift"] = trace.l2_drift()
        fits["max_boundary_mass"] = float(trace.boundary_mass.max())
        artifacts["fits"] = fits
    return trace


def _decay_run(cfg, basis, log, artifacts, ops):
    window = window_for(cfg)
    with _stage("build", log):
        h0, a, build, pad = principal_pair(cfg, basis)
        ops["H0"], ops["A"] = h0, a
    with _stage("mourre", log):
        rep = certify(cfg, basis, h0, a, build, pad, window)
        artifacts["mourre"] = rep.to_dict()
    with _stage("initial", log):
        eig = eigensystem(h0)
        psi0 = initial_state(cfg, basis)
        if cfg.initial.project:
            psi0 = cascade_initial_datum(h0, window, psi0, eig=eig)
    with _stage("evolve", log):
        s = cfg.sampling
        times = np.arange(s.t_start, s.t_end + 0.5 * s.dt, s.dt)
        rs = sorted(set(cfg.rs) | {-abs(r) for r in cfg.rs} | {abs(r) for r in cfg.rs})
        trace = static_trace(h0, psi0, times, rs, eig=eig)
    with _stage("fit", log):
        win = _fit_window(cfg, s.t_end)
        fits = {}
        for r in sorted(set(cfg.rs)):
            if r == 0:
                continue
            fitter = fit_decay_exponent if r < 0 else fit_growth_exponent
            fits[str(float(r))] = fitter(trace, r, win).to_dict()
        fits["duality_defect"] = {str(abs(r)): duality_defect(trace, r) for r in cfg.rs if r != 0}
        fits["l2_drift"] = trace.l2_drift()
        fits["max_boundary_mass"] = float(trace.boundary_mass.max())
        for k in cfg.decay.ks:
            led = local_energy_decay_check(h0, a, window, psi0, k, times[times > 0], certificate=rep, fit_window=win, eig=eig)
            fits[f"local_decay_k{k}"] = led.to_dict()
        artifacts["fits"] = fits
    return trace


def _normal_form_run(cfg, basis, log, artifacts, ops):
    nf = cfg.normal_form
    with _stage("build", log):
        v = cos_drive(toeplitz_source(cfg, basis), cfg.potential.k)
    with _stage("normal_form", log):
        res = normal_form(v, nf.steps, n_samples=nf.n_samples, quadrature=nf.quadrature, n_terms=nf.n_terms)
        ops["effective_H"], ops["T_N"] = res.effective_h, res.t_n
    with _stage("audit", log):
        edge = 2 * cfg.potential.k + 2
        audit = {
            "steps": res.steps,
            "residuals": res.residuals,
            "t_n_max_entry": res.t_n.max_abs(),
            "t_n_hermitian": res.t_n.is_hermitian(),
            "t_n_order_minus1_constant": order_diagnostic(res.t_n, -1.0, edge=edge),
            "manifest": res.manifest,
        }
        checks = {
            "homological_residual": res.residuals["step1_homological_fd"] <= 1e-6,
            "x_periodic": res.residuals["step1_x_period"] <= 1e-10,
            "t_n_hermitian": audit["t_n_hermitian"],
        }
        if res.steps == 1:
            checks["t1_zero"] = audit["t_n_max_entry"] <= 1e-10
        else:
            # order -1 proxy: the constant must not move when the truncation halves
            half = make_basis(basis.kind, basis.dim // 2)
            v_half = cos_drive(toeplitz_source(cfg, half), cfg.potential.k)
            small = normal_form(v_half, nf.steps, n_samples=nf.n_samples, quadrature=nf.quadrature, n_terms=nf.n_terms)
            c_half = order_diagnostic(small.t_n, -1.0, edge=edge)
            c_full = audit["t_n_order_minus1_constant"]
            audit["t_n_order_minus1_constant_half_dim"] = c_half
            checks["t_n_order_minus1"] = bool(np.isfinite(c_full) and abs(c_full - c_half) <= ORDER_PROXY_RTOL * max(c_half, 1e-300))
        audit["checks"] = checks
        artifacts["fits"] = audit
    return None


def _mourre_run(cfg, basis, log, artifacts, ops):
    window = window_for(cfg)
    with _stage("build", log):
        h0, a, build, pad = principal_pair(cfg, basis)
        ops["H0"], ops["A"] = h0, a
    with _stage("mourre", log):
        artifacts["mourre"] = certify(cfg, basis, h0, a, build, pad, window).to_dict()
    if cfg.mourre.weyl_ns:
        with _stage("weyl", log):
            p = cfg.potential
            c = 2 * complex(h0.tocsr()[p.k, 0])
            ns = list(cfg.mourre.weyl_ns)
            res = [weyl_residual(basis, p.k, c, cfg.mourre.weyl_rho, n) for n in ns]
            slope = float(np.polyfit(np.log(ns), np.log(res), 1)[0])
            artifacts["fits"] = {"weyl": {"n": ns, "residual": res, "slope": slope}}
    return None


_RUNNERS = {
    Model.EFFECTIVE_FLOW_DECAY: _decay_run,
    Model.NORMAL_FORM_AUDIT: _normal_form_run,
    Model.MOURRE_AUDIT: _mourre_run,
}


def compute(cfg: ScenarioConfig, dim: int | None = None, log: list | None = None) -> tuple[NormTrace | None, dict, dict, list]:
    """Run the pipeline in memory: (trace, artifacts, operators, stage log)."""
    basis = basis_for(cfg, dim)
    log = [] if log is None else log
    artifacts, ops = {}, {}
    runner = _evolve_run if cfg.model in EVOLVING_MODELS else _RUNNERS[cfg.model]
    trace = runner(cfg, basis, log, artifacts, ops)
    return trace, artifacts, ops, log


def _verdict(cfg: ScenarioConfig, artifacts: dict) -> list[str]:
    bad = _check_expectations(cfg, artifacts.get("fits", {}))
    fits = artifacts.get("fits", {})
    for key, val in fits.items():
        if key.startswith("local_decay_k") and not val["passed"]:
            bad.append(f"{key}: exponent above the required bound")
    if "checks" in fits:
        bad += [f"audit check {k} failed" for k, ok in fits["checks"].items() if not ok]
    if cfg.model is Model.MOURRE_AUDIT and not artifacts.get("mourre", {}).get("strict_passed", False):
        bad.append("strict Mourre estimate not certified")
    return bad


def manifest_for(cfg: ScenarioConfig) -> dict:
    return {
        "config": config_to_json(cfg),
        "versions": {
            "sobolevlab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "seeds": {
            "config": cfg.seed,
            "perturbation": None if cfg.potential.perturbation is None else cfg.potential.perturbation.seed,
            "bootstrap": 0,
        },
    }


def run(cfg: ScenarioConfig, output_dir: str | Path | None = None, write: bool = True) -> RunResult:
    outdir = Path(output_dir or cfg.output_dir) / cfg.name
    manifest = manifest_for(cfg)
    trace, artifacts, ops, log = None, {}, {}, []
    code = EXIT_OK
    try:
        trace, artifacts, ops, log = compute(cfg, log=log)
    except StageError as exc:
        code = EXIT_STAGE
        manifest["failure"] = {"stage": exc.stage, **exc.payload}
    failures = []
    if code == EXIT_OK:
        failures = _verdict(cfg, artifacts)
        if failures:
            code = EXIT_FIT
    manifest["acceptance_failures"] = failures
    manifest["exit_code"] = code
    manifest["stages"] = [{k: v for k, v in e.items() if k != "traceback"} for e in log]
    if write:
        outdir.mkdir(parents=True, exist_ok=True)
        if trace is not None:
            trace.to_csv(outdir / "trace.csv")
        if "mourre" in artifacts:
            (outdir / "mourre.json").write_text(json.dumps(artifacts["mourre"], indent=2, default=_json_default))
        rest = {k: v for k, v in artifacts.items() if k != "mourre"}
        if rest:
            (outdir / "fits.json").write_text(json.dumps(rest, indent=2, default=_json_default))
        if cfg.write_ops:
            for name, op in ops.items():
                if op is not None:
                    write_operator(outdir / "ops" / f"{name}.mat", op)
        (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return RunResult(code, outdir if write else None, {"artifacts": artifacts, "stages": log, "manifest": manifest}, trace)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def config_from_manifest(path: str | Path) -> ScenarioConfig:
    data = json.loads(Path(path).read_text())
    return ScenarioConfig.model_validate(data["config"])


def converge(cfg: ScenarioConfig, dims, threshold: float = 0.01):
    """Rerun an evolving scenario at several truncations and compare traces."""

    def runner(dim: int) -> NormTrace:
        trace, _, _, _ = compute(cfg, dim)
        if trace is None:
            raise ValueError(f"model {cfg.model.value} produces no trace")
        return trace

    return truncation_convergence(runner, dims, threshold)
