"""Job runners: the fracture simulation and the material-point relaxation drivers."""

import os

import numpy as np

from .. import fem
from .. import tensor as T
from ..integrator import GaussPointState, hold
from .meshing import generate_mesh
from .writers import write_force_csv, write_vtk

POINT_HEADER = ("t_s", "Y_total", "psi_eq", "psi_neq", "psi_vol_pos")
POLAR_HEADER = ("angle_deg", "t_s", "Y_total", "psi_eq", "psi_neq", "psi_vol_pos")


def build_model(job):
    """Mesh and :class:`~anisofrac.fem.Model` for a :class:`SimJob`."""
    mesh = generate_mesh(job.geometry, job.fibers)
    fams, orient = zip(*(block.orientation() for block in job.fibers))
    model = fem.Model(mesh, job.params, job.environment, job.fracture, list(fams),
                      list(orient))
    return model


def run_job(job, output_dir=None, progress=None):
    """Run a fracture job and write its force CSV and VTK snapshots.

    Returns ``(fields, report)``. ``progress(record)`` is called after each
    step. Snapshots are written every ``vtk_stride`` steps and at the end
    when the stride is positive.
    """
    out = output_dir if output_dir is not None else job.output.directory
    os.makedirs(out, exist_ok=True)
    model = build_model(job)
    fem.set_threads(job.solver.threads or None)
    stride = job.output.vtk_stride

    def step_done(fields, row):
        if stride and row.step % stride == 0:
            write_vtk(model.mesh, fields, os.path.join(out, f"step_{row.step:06d}.vtk"))
        if progress is not None:
            progress(row)

    fields, report = fem.run(model, job.loading, job.solver.controls(), callback=step_done)
    write_force_csv(report, os.path.join(out, job.output.csv or "force.csv"))
    if stride and report.rows and report.rows[-1].step % stride:
        write_vtk(model.mesh, fields, os.path.join(out, f"step_{fields.step:06d}.vtk"))
    return fields, report


def uniaxial_stretch(stretch, angle_deg):
    """Isochoric uniaxial stretch along the in-plane direction ``angle_deg``."""
    R = T.rotation_z(np.radians(angle_deg))
    return R @ np.diag([stretch, stretch ** -0.5, stretch ** -0.5]) @ R.T


def _hold(job, angles, times):
    block = job.fibers[0]
    fams, _ = block.orientation()
    F = np.array([uniaxial_stretch(job.polar.stretch, a) for a in angles])
    fem.set_threads(job.solver.threads or None)
    _, snaps = hold(F, GaussPointState.virgin(len(F)), 0.0, fams, job.params,
                    job.environment, times, tol=job.solver.local_tol,
                    max_iters=job.solver.local_max_iters)
    return snaps


def point_times(job):
    """Record times of the point driver: log-spaced samples plus the snapshot times."""
    t = job.polar.times
    grid = np.geomspace(t[0], t[-1], job.polar.samples)
    return np.unique(np.concatenate([grid, t]))


def run_point(job, angle=None):
    """Relaxation record under a held uniaxial stretch.

    Returns rows ``(t_s, Y_total, psi_eq, psi_neq, psi_vol_pos)``.
    """
    angle = job.polar.angle if angle is None else angle
    times = point_times(job)
    snaps = _hold(job, [angle], times)
    return [(t, s["Y"][0], s["psi_eq"][0], s["psi_neq"][0], s["psi_vol_pos"][0])
            for t, s in zip(times, snaps)]


def run_polar(job):
    """Crack-driving energy at every load angle and snapshot time.

    Returns rows ``(angle_deg, t_s, Y_total, psi_eq, psi_neq, psi_vol_pos)``
    ordered by angle, then time.
    """
    angles = np.asarray(job.polar.angles, dtype=float)
    times = np.asarray(job.polar.times, dtype=float)
    snaps = _hold(job, angles, times)
    rows = []
    for i, a in enumerate(angles):
        for t, s in zip(times, snaps):
            rows.append((a, t, s["Y"][i], s["psi_eq"][i], s["psi_neq"][i], s["psi_vol_pos"][i]))
    return rows
