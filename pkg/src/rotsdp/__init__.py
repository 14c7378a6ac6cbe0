"""Semidefinite relaxations of quadratic problems over rotation domains."""

__version__ = "0.1.0"

from .analysis import TightnessReport, Verdict, oracle_minimize, tightness_report
from .builders import (
    Correspondence,
    RelativeRotationGraph,
    handeye_quat,
    handeye_so3,
    pointset_avg,
    random_problem,
    registration_problem,
    resectioning_problem,
    rotavg_quat,
    rotavg_so,
)
from .domains import DomainSpec, Kind, RotationElement, constraint_matrices, embed
from .problem import Provenance, StandardFormProblem
from .sdp import SdpSolution, SolverSettings, solve_relaxation, sos_certificate

__all__ = [
    "__version__",
    "Correspondence",
    "DomainSpec",
    "Kind",
    "Provenance",
    "RelativeRotationGraph",
    "RotationElement",
    "SdpSolution",
    "SolverSettings",
    "StandardFormProblem",
    "TightnessReport",
    "Verdict",
    "constraint_matrices",
    "embed",
    "handeye_quat",
    "handeye_so3",
    "oracle_minimize",
    "pointset_avg",
    "random_problem",
    "registration_problem",
    "resectioning_problem",
    "rotavg_quat",
    "rotavg_so",
    "solve_relaxation",
    "sos_certificate",
    "tightness_report",
]
