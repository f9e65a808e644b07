"""Adaptive finite elements with restarted, optimally preconditioned GMRES.

Modules
-------
mesh       conforming triangulations and newest vertex bisection
linalg     sparse operators and small dense helpers
fespace    Lagrange spaces, assembly and prolongation
estimator  residual error indicators
precond    multilevel additive Schwarz and symmetric multigrid
gmres      PGMRES in the preconditioner-weighted inner product
adaptive   the adaptive loop, marking and rate bookkeeping
cli        experiment driver (``afem-gmres``)
"""
from .adaptive import AdaptiveParams, afem_run, dorfler_mark
from .estimator import estimate
from .fespace import FeSpace, PdeData, assemble_B, assemble_rhs
from .gmres import pgmres
from .kernels import BACKEND
from .mesh import Triangulation, initial_mesh_lshape, refine

__version__ = "0.1.0"

__all__ = [
    "AdaptiveParams",
    "afem_run",
    "dorfler_mark",
    "estimate",
    "FeSpace",
    "PdeData",
    "assemble_B",
    "assemble_rhs",
    "pgmres",
    "BACKEND",
    "Triangulation",
    "initial_mesh_lshape",
    "refine",
]
