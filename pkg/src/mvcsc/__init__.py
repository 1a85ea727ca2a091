"""Convolutional sparse coding for long multivariate time series.

The signal model writes each multivariate recording as a sum of short
spatio-temporal atoms convolved with nonnegative sparse activations.  Atoms
may be constrained to rank 1 (a spatial map times a temporal waveform),
which matches sources that spread instantaneously across channels and makes
several precomputations cheaper.

Fitting alternates between a convex activation update, solved with locally
greedy coordinate descent, and a projected-gradient dictionary update that
runs entirely on precomputed correlation tables.
"""

from .core import (
    ActivationSet,
    Dictionary,
    SignalSet,
    convolve_atom,
    correlate_signal_atom,
    cross_correlate,
    objective,
    project_unit_ball,
    reconstruct,
)
from .io import read_csct, write_csct
from .zstep import (
    ZSolverConfig,
    compute_dtd,
    fista_reference,
    lambda_max,
    lgcd_solve,
)
from .dstep import DStepConfig, compute_phi, compute_psi, dstep_solve
from .learner import FitConfig, FitResult, Regularization, fit, init_dictionary
from .simulate import SimConfig, make_truth, recovery_loss, run_recovery_experiment

__version__ = "0.1.0"

__all__ = [
    "ActivationSet",
    "Dictionary",
    "DStepConfig",
    "FitConfig",
    "FitResult",
    "Regularization",
    "SignalSet",
    "SimConfig",
    "ZSolverConfig",
    "compute_dtd",
    "compute_phi",
    "compute_psi",
    "convolve_atom",
    "correlate_signal_atom",
    "cross_correlate",
    "dstep_solve",
    "fista_reference",
    "fit",
    "init_dictionary",
    "lambda_max",
    "lgcd_solve",
    "make_truth",
    "objective",
    "project_unit_ball",
    "read_csct",
    "reconstruct",
    "recovery_loss",
    "run_recovery_experiment",
    "write_csct",
]
