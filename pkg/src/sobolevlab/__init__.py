"""Finite-dimensional laboratory for Sobolev norm growth under time-periodic drives."""

import os as _os

# honour the thread override before numpy loads its BLAS
_threads = _os.environ.get("SOBOLEVLAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .basis import BasisKind, BasisModel, StateVector, make_basis, sobolev_norm, free_flow  # noqa: E402
from .operators import TruncatedOperator, ToeplitzSpec  # noqa: E402
from .averaging import TimePeriodicOperator, resonant_avg, averaged_op, quadrature_avg  # noqa: E402
from .mourre import SpectralWindow, MourreReport, mourre_check, functional_calculus  # noqa: E402
from .propagator import EvolutionConfig, evolve_static, evolve_periodic  # noqa: E402
from .diagnostics import NormTrace, FitReport, fit_growth_exponent, fit_decay_exponent  # noqa: E402

__all__ = [
    "BasisKind",
    "BasisModel",
    "StateVector",
    "make_basis",
    "sobolev_norm",
    "free_flow",
    "TruncatedOperator",
    "ToeplitzSpec",
    "TimePeriodicOperator",
    "resonant_avg",
    "averaged_op",
    "quadrature_avg",
    "SpectralWindow",
    "MourreReport",
    "mourre_check",
    "functional_calculus",
    "EvolutionConfig",
    "evolve_static",
    "evolve_periodic",
    "NormTrace",
    "FitReport",
    "fit_growth_exponent",
    "fit_decay_exponent",
]
