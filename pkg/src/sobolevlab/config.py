"""Scenario configuration: one YAML (or JSON) file per run."""

from __future__ import annotations

import enum
import json
from pathlib import Path
from typing import Annotated, Any

import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from .propagator import EvolutionConfig

DEFAULT_EPS_GUARD = 0.05


def _to_complex(v: Any) -> complex:
    if isinstance(v, complex):
        return v
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, str):
        return complex(v.replace(" ", ""))
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, dict) and set(v) <= {"re", "im"}:
        return complex(float(v.get("re", 0.0)), float(v.get("im", 0.0)))
    raise ValueError(f"cannot read {v!r} as a complex number")


Complex = Annotated[complex, BeforeValidator(_to_complex)]


class Model(str, enum.Enum):
    HARMONIC_TRANSPORTER = "HarmonicTransporter"
    HARMONIC_UNIVERSAL = "HarmonicUniversal"
    HALFWAVE_TRANSPORTER = "HalfWaveTransporter"
    PERTURBED_TRANSPORTER = "PerturbedTransporter"
    NON_RESONANT_CONTROL = "NonResonantControl"
    EFFECTIVE_FLOW_DECAY = "EffectiveFlowDecay"
    NORMAL_FORM_AUDIT = "NormalFormAudit"
    MOURRE_AUDIT = "MourreAudit"


HARMONIC_MODELS = {
    Model.HARMONIC_TRANSPORTER,
    Model.HARMONIC_UNIVERSAL,
    Model.PERTURBED_TRANSPORTER,
    Model.NON_RESONANT_CONTROL,
    Model.EFFECTIVE_FLOW_DECAY,
    Model.NORMAL_FORM_AUDIT,
    Model.MOURRE_AUDIT,
}
EVOLVING_MODELS = {
    Model.HARMONIC_TRANSPORTER,
    Model.HARMONIC_UNIVERSAL,
    Model.HALFWAVE_TRANSPORTER,
    Model.PERTURBED_TRANSPORTER,
    Model.NON_RESONANT_CONTROL,
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Perturbation(_Strict):
    epsilon: float = Field(ge=0)
    bandwidth: int = Field(ge=0)
    seed: int
    eps_guard: float = Field(default=DEFAULT_EPS_GUARD, gt=0)


class Potential(_Strict):
    k: int | None = Field(default=None, ge=1)
    v_k: Complex | None = None
    toeplitz: dict[int, Complex] | None = None
    j: int | None = None
    v_coeffs: dict[int, Complex] | None = None
    drive_frequency: float | None = Field(default=None, gt=0)
    perturbation: Perturbation | None = None


class InitialDatum(_Strict):
    kind: str = Field(pattern="^(basis|packet)$")
    label: int | None = None
    center: float | None = None
    width: float | None = Field(default=None, gt=0)
    rho: float = 0.0
    project: bool = False

    @model_validator(mode="after")
    def _fields(self):
        if self.kind == "basis" and self.label is None:
            raise ValueError("basis initial datum needs a label")
        if self.kind == "packet" and (self.center is None or self.width is None):
            raise ValueError("packet initial datum needs center and width")
        return self


class Window(_Strict):
    lo: float
    hi: float
    delta: float | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _order(self):
        if not self.lo < self.hi:
            raise ValueError("window needs lo < hi")
        return self


class Expectation(_Strict):
    lo: float
    hi: float


class FitSpec(_Strict):
    t_min: float | None = None
    t_max: float | None = None
    expect: dict[float, Expectation] = Field(default_factory=dict)


class Sampling(_Strict):
    """Output times for static flows: t_start, t_start + dt, ..., t_end."""

    t_end: float = Field(gt=0)
    dt: float = Field(gt=0)
    t_start: float = Field(default=0.0, ge=0)


class DecaySpec(_Strict):
    ks: list[int] = Field(default_factory=list)


class NormalFormSpec(_Strict):
    steps: int = Field(ge=1, le=2)
    n_samples: int = Field(default=64, ge=8)
    quadrature: str = Field(default="exact", pattern="^(exact|gauss)$")
    n_terms: int = Field(default=16, ge=2)


class MourreSpec(_Strict):
    allowance_rank: int = Field(default=0, ge=0)
    edge_policy: str = Field(default="pad", pattern="^(none|trim|pad)$")
    tol: float = Field(default=1e-10, gt=0)
    weyl_ns: list[int] = Field(default_factory=list)
    weyl_rho: float = 0.0


class ScenarioConfig(_Strict):
    name: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    model: Model
    dim: int = Field(ge=2)
    seed: int = 0
    potential: Potential
    rs: list[float] = Field(default_factory=lambda: [1.0])
    evolution: EvolutionConfig | None = None
    sampling: Sampling | None = None
    initial: InitialDatum | None = None
    window: Window | None = None
    fit: FitSpec = Field(default_factory=FitSpec)
    decay: DecaySpec = Field(default_factory=DecaySpec)
    normal_form: NormalFormSpec | None = None
    mourre: MourreSpec = Field(default_factory=MourreSpec)
    output_dir: str = "runs"
    write_ops: bool = True


def cross_field_errors(cfg: ScenarioConfig) -> list[str]:
    """Model-specific completeness checks; empty list means valid."""
    errs = []
    p = cfg.potential
    m = cfg.model
    if m is Model.HALFWAVE_TRANSPORTER:
        if cfg.dim % 2 == 0:
            errs.append("dim: HalfWave truncation needs an odd dimension")
        if p.j is None or p.j == 0:
            errs.append("potential.j: required and nonzero for HalfWaveTransporter")
        if p.v_coeffs is None:
            errs.append("potential.v_coeffs: required for HalfWaveTransporter")
        elif p.j is not None and complex(p.v_coeffs.get(p.j, 0)) == 0:
            errs.append("potential.v_coeffs: the driven Fourier coefficient v_j must be nonzero")
        elif p.j is not None:
            for jj, vv in p.v_coeffs.items():
                if abs(complex(p.v_coeffs.get(-jj, 0)) - complex(vv).conjugate()) > 1e-14 * max(1, abs(vv)):
                    errs.append(f"potential.v_coeffs: v_{-jj} must equal conj(v_{jj}) for a real potential")
                    break
    if m in HARMONIC_MODELS:
        if p.k is None:
            errs.append("potential.k: required")
        elif p.k >= cfg.dim:
            errs.append("potential.k: must be smaller than dim")
        if p.v_k is None and p.toeplitz is None:
            errs.append("potential.v_k: required (or give potential.toeplitz)")
        if p.toeplitz is not None:
            for d, v in p.toeplitz.items():
                if abs(complex(p.toeplitz.get(-d, 0)) - complex(v).conjugate()) > 1e-14 * max(1, abs(v)):
                    errs.append("potential.toeplitz: diagonals must satisfy V_{-d} = conj(V_d)")
                    break
            if p.k is not None and complex(p.toeplitz.get(p.k, 0)) == 0:
                errs.append("potential.toeplitz: the resonant diagonal V_k must be nonzero")
    if m is Model.NON_RESONANT_CONTROL and p.drive_frequency is None:
        errs.append("potential.drive_frequency: required for NonResonantControl")
    if m is Model.PERTURBED_TRANSPORTER:
        if p.perturbation is None:
            errs.append("potential.perturbation: required for PerturbedTransporter")
        elif p.perturbation.epsilon > p.perturbation.eps_guard:
            errs.append(
                f"potential.perturbation.epsilon: {p.perturbation.epsilon} exceeds the smallness guard {p.perturbation.eps_guard}"
            )
    if m in EVOLVING_MODELS:
        if cfg.evolution is None:
            errs.append("evolution: required for evolving models")
        if cfg.initial is None:
            errs.append("initial: required for evolving models")
    if m is Model.EFFECTIVE_FLOW_DECAY:
        if cfg.sampling is None:
            errs.append("sampling: required for EffectiveFlowDecay")
        if cfg.initial is None:
            errs.append("initial: required for EffectiveFlowDecay")
        if cfg.window is None:
            errs.append("window: required for EffectiveFlowDecay")
    if m is Model.MOURRE_AUDIT and cfg.window is None:
        errs.append("window: required for MourreAudit")
    if m is Model.NORMAL_FORM_AUDIT and cfg.normal_form is None:
        errs.append("normal_form: required for NormalFormAudit")
    if cfg.initial is not None and cfg.initial.project and cfg.window is None:
        errs.append("initial.project: needs a window")
    return errs


def read_raw(path: str | Path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    return yaml.safe_load(text)


def parse_config(raw: dict) -> tuple[ScenarioConfig | None, list[str]]:
    try:
        cfg = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        errs = []
        for e in exc.errors():
            loc = ".".join(str(x) for x in e["loc"]) or "<root>"
            errs.append(f"{loc}: {e['msg']}")
        return None, errs
    return cfg, cross_field_errors(cfg)


def load_config(path: str | Path) -> ScenarioConfig:
    cfg, errs = parse_config(read_raw(path))
    if errs:
        raise ValueError("invalid config:\n  " + "\n  ".join(errs))
    return cfg


def config_to_json(cfg: ScenarioConfig) -> dict:
    """JSON-safe dump; complex numbers as [re, im]."""

    def fix(x):
        if isinstance(x, complex):
            return [x.real, x.imag]
        if isinstance(x, enum.Enum):
            return x.value
        if isinstance(x, dict):
            return {str(k): fix(v) for k, v in x.items()}
        if isinstance(x, list):
            return [fix(v) for v in x]
        return x

    return fix(cfg.model_dump(mode="python"))
