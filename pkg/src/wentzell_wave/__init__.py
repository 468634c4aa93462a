"""Coupled interior/boundary wave solver with dynamic boundary evolution.

The package discretizes a semilinear wave system whose boundary condition
is itself a wave equation driven by the interior Neumann flux, on two
model geometries with time-dependent diagonal metrics. Alongside the
solver it ships the verification instruments (dissipativity, resolvent,
energy, evolution-family and fixed-point checks) and a batch CLI.
"""

from .assembly import (
    DiscreteOperator,
    FrozenOperators,
    StateVector,
    WaveOperators,
    apply_generator,
    assemble,
    x_inner,
    x_norm,
)
from .fields import ScalarField, compile_expression, make_field
from .geometry import Mesh, MetricSample, MetricSpec, build_mesh, sample_metric

__version__ = "0.1.0"

__all__ = [
    "DiscreteOperator",
    "FrozenOperators",
    "StateVector",
    "WaveOperators",
    "apply_generator",
    "assemble",
    "x_inner",
    "x_norm",
    "ScalarField",
    "compile_expression",
    "make_field",
    "Mesh",
    "MetricSample",
    "MetricSpec",
    "build_mesh",
    "sample_metric",
    "__version__",
]
