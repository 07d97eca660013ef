"""Data-driven predictive control from closed-loop data, with instruments.

Subpackages:
    sslib    state-space models, simulators, signals, Riccati gains
    hankel   block-Hankel data matrices and subspace operators
    iv       instrument construction, predictors, projections, diagnostics
    qp       dense convex QP solver with workspace reuse
    control  controller variants and the receding-horizon executive
    bench    experiment configs, Monte Carlo campaigns, CLI
"""
from . import bench, control, hankel, iv, jsonio, qp, sslib

__version__ = "0.1.0"

__all__ = ["bench", "control", "hankel", "iv", "jsonio", "qp", "sslib", "__version__"]
