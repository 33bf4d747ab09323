"""Job configuration, mesh generation, writers and the material-point drivers."""

from .config import (
    FiberBlock,
    Geometry,
    OutputBlock,
    PolarJob,
    SimJob,
    SolverBlock,
    parse_config,
    serialize,
)
from .drivers import build_model, run_job, run_point, run_polar
from .meshing import generate_mesh
from .writers import format_number, write_csv, write_force_csv, write_vtk

__all__ = [
    "FiberBlock",
    "Geometry",
    "OutputBlock",
    "PolarJob",
    "SimJob",
    "SolverBlock",
    "build_model",
    "format_number",
    "generate_mesh",
    "parse_config",
    "run_job",
    "run_point",
    "run_polar",
    "serialize",
    "write_csv",
    "write_force_csv",
    "write_vtk",
]
