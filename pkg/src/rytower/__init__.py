"""Random Young towers with exponential return-time tails.

Numerical workbench for i.i.d. random tower families with affine full
branches: transfer operators in weighted Lipschitz norms, Birkhoff cones
with the projective metric, equivariant densities, and desk-scale
verification of limit theorems against exact cylinder enumeration.
"""

from .env import (
    Atom,
    Environment,
    Model,
    SymbolSpec,
    shift,
    symbol_at,
    validate_family,
)
from .models import gm3_model, geo_model, load_model, resolve_model, save_model
from .tower import TowerBundle, TowerPoint
from .ops import AtomTable, BaseIndicator, Observable, TowerFn, TransferCocycle
from .cones import ConeParams, certify_contraction, complex_radius
from .limits import (
    ExperimentReport,
    berry_esseen_experiment,
    correlation_experiment,
    deviations_experiment,
    lclt_aperiodic_experiment,
    lclt_lattice_experiment,
    mgf,
    mixing_experiment,
    pressure_curve,
    rpf_extract,
    variance_report,
)

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "Environment",
    "Model",
    "SymbolSpec",
    "shift",
    "symbol_at",
    "validate_family",
    "gm3_model",
    "geo_model",
    "load_model",
    "resolve_model",
    "save_model",
    "TowerBundle",
    "TowerPoint",
    "AtomTable",
    "BaseIndicator",
    "Observable",
    "TowerFn",
    "TransferCocycle",
    "ConeParams",
    "certify_contraction",
    "complex_radius",
    "ExperimentReport",
    "berry_esseen_experiment",
    "correlation_experiment",
    "deviations_experiment",
    "lclt_aperiodic_experiment",
    "lclt_lattice_experiment",
    "mgf",
    "mixing_experiment",
    "pressure_curve",
    "rpf_extract",
    "variance_report",
    "__version__",
]
