"""PARAFAC2 and temporally smooth PARAFAC2 (tPARAFAC2) fitted with AO-ADMM.

Includes EM-imputation and row-wise fitting for partially observed data,
a direct-fitting ALS baseline, a synthetic evolving-concept generator and
factor match score evaluation.
"""

from .als import fit_als
from .aoadmm import FitReport, NonFiniteLossError, SolverConfig, fit, random_init
from .evaluation import NoValidRunError, best_run, detect_degenerate, fms
from .missing import fit_em, fit_rw
from .model import Parafac2Factors, check_constraint, loss, reconstruct
from .synth import ConceptSpec, add_noise, generate, make_mask, random_parafac2
from .tensor import DimSpec, MaskStack, SliceStack

__version__ = "0.1.0"

__all__ = [
    "ConceptSpec",
    "DimSpec",
    "FitReport",
    "MaskStack",
    "NoValidRunError",
    "NonFiniteLossError",
    "Parafac2Factors",
    "SliceStack",
    "SolverConfig",
    "add_noise",
    "best_run",
    "check_constraint",
    "detect_degenerate",
    "fit",
    "fit_als",
    "fit_em",
    "fit_rw",
    "fms",
    "generate",
    "loss",
    "make_mask",
    "random_init",
    "random_parafac2",
    "reconstruct",
]
