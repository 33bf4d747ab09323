import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from anisofrac import cli
from anisofrac.appio import (FiberBlock, Geometry, PolarJob, SimJob, format_number,
                             generate_mesh, parse_config, run_point, run_polar, serialize,
                             write_csv, write_force_csv, write_vtk)
from anisofrac.appio.drivers import uniaxial_stretch
from anisofrac.errors import ConfigError, GeometryError
from anisofrac.fem import FieldState, Mesh, SolveReport, StepRecord
from anisofrac.material import MaterialParams

DATA = Path(__file__).parent / "data"


# --- configuration -------------------------------------------------------------

def test_empty_config_is_default_sen_job():
    job = parse_config("")
    assert isinstance(job, SimJob)
    assert job.material == MaterialParams()
    assert (job.environment.theta, job.environment.w_w) == (300.0, 0.01)
    assert job.fracture.Gc == 0.19 and job.fracture.l0 == 0.02
    assert job.geometry.notch_length == 0.5
    assert job.loading.du == 1e-5


def test_low_temperature_accepted():
    job = parse_config("[environment]\ntheta = 150\n")
    assert job.environment.theta == 150.0


def test_negative_moisture_rejected_with_key_and_line():
    with pytest.raises(ConfigError) as info:
        parse_config("# comment\n[environment]\nw_w = -0.1\n", source="job.cfg")
    msg = str(info.value)
    assert "job.cfg:3" in msg and "w_w" in msg


@pytest.mark.parametrize("text, needle", [
    ("[geometry]\nwidht = 2\n", "widht"),
    ("[nonsense]\n", "nonsense"),
    ("[geometry]\nnx = ten\n", "nx"),
    ("[material]\nGc = 1\n", "Gc"),
    ("[fibers]\ndistribution = curly\n", "distribution"),
    ("[geometry]\nnx = 3\n", "nx"),
    ("[polar]\nstretch = 0.9\n", "stretch"),
    ("[polar]\ntimes = 0.1, 0.01\n", "times"),
])
def test_invalid_config_rejected(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert needle in str(info.value)
    assert info.value.line is not None


def test_polar_section_selects_polar_job():
    job = parse_config("[polar]\nstretch = 1.1\nangles = 0:90:30\n")
    assert isinstance(job, PolarJob)
    assert job.polar.stretch == 1.1
    assert job.polar.angles == (0.0, 30.0, 60.0)


@pytest.mark.parametrize("text", [
    "",
    "[geometry]\nnx = 20\nny = 20\n[fibers]\ndistribution = aligned\nangle = 30\n"
    "[fibers.top]\ndistribution = balanced\nangles = 45, -45\ny_min = 0.5\n",
    "[polar]\nangles = 0, 10\n[fibers]\nweights = 0.7, 0.3\nangles = -45, 45\n",
])
def test_serialize_round_trip(text):
    job = parse_config(text)
    once = serialize(job)
    assert parse_config(once) == job
    assert serialize(parse_config(once)) == once


# --- meshing -----------------------------------------------------------------------

def test_notched_mesh_counts():
    mesh = generate_mesh(Geometry(nx=4, ny=4, notch_length=0.5))
    assert mesh.n_nodes == 25 + 2
    assert mesh.n_elements == 16
    lower, upper = mesh.node_set("notch_lower"), mesh.node_set("notch_upper")
    np.testing.assert_array_equal(mesh.nodes[lower], mesh.nodes[upper])
    # elements above and below the notch share no node on it
    below = set(mesh.elements[4:6].ravel())
    above = set(mesh.elements[8:10].ravel())
    assert below & above == {12}          # only the notch tip is shared


def test_plain_mesh_without_notch():
    mesh = generate_mesh(Geometry(nx=4, ny=4, notch_length=0.0))
    assert mesh.n_nodes == 25
    assert mesh.node_set("notch_upper").size == 0


def test_notch_off_grid_rejected():
    with pytest.raises(GeometryError):
        generate_mesh(Geometry(nx=4, ny=4, notch_length=0.3))
    with pytest.raises(GeometryError):
        generate_mesh(Geometry(nx=4, ny=5, notch_length=0.5))


def test_layered_regions_split_at_interface():
    fibers = (FiberBlock(), FiberBlock(name="top", distribution="aligned", y_min=0.5))
    mesh = generate_mesh(Geometry(nx=4, ny=4, notch_length=0.5), fibers)
    yc = mesh.nodes[mesh.elements].mean(axis=1)[:, 1]
    np.testing.assert_array_equal(mesh.regions, (yc > 0.5).astype(int))


# --- writers -----------------------------------------------------------------------

def one_element():
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
                np.array([[0, 1, 2, 3]]), {"bottom": [0, 1], "top": [2, 3]})
    fields = FieldState.initial(mesh)
    fields.u[2] = (5e-4, 0.01)
    fields.u[3] = (0.0, 0.01)
    fields.points.H[:] = (1.0, 2.0, 3.0, 0.5)
    fields.sigma[:, 1, 1] = 2.0
    return mesh, fields


def test_vtk_golden(tmp_path):
    mesh, fields = one_element()
    path = tmp_path / "one.vtk"
    write_vtk(mesh, fields, path)
    assert path.read_bytes() == (DATA / "one_element.vtk").read_bytes()
    text = path.read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0"
    i = text.index("SCALARS phi double 1")
    assert text[i + 2:i + 6] == ["0"] * 4


def test_number_format():
    assert format_number(3) == "3"
    assert format_number(0.0) == "0"
    assert format_number(1.0 / 3.0) == "0.333333333"
    assert format_number(123456.789) == "123456.789"
    assert format_number(2.5e-4) == "2.50000000e-04"
    assert format_number(-1e-7) == "-1.00000000e-07"


def test_force_csv(tmp_path):
    path = tmp_path / "f.csv"
    write_force_csv(SolveReport(), path)
    assert path.read_text() == "step,time_s,displacement_mm,force_N,newton_iters,staggered_iters\n"
    rep = SolveReport()
    rep.append(StepRecord(1, 6e-4, 1e-5, 1.25, 2, 1))
    rep.append(StepRecord(2, 1.2e-3, 2e-5, 2.5, 1, 1))
    write_force_csv(rep, path)
    lines = path.read_text().splitlines()
    assert lines[1] == "1,6.00000000e-04,1.00000000e-05,1.25,2,1"
    assert lines[2] == "2,0.0012,2.00000000e-05,2.5,1,1"


# --- material-point drivers --------------------------------------------------------

def test_uniaxial_stretch():
    F = uniaxial_stretch(1.05, 30.0)
    assert np.linalg.det(F) == pytest.approx(1.0, abs=1e-14)
    a = np.array([math.cos(math.radians(30)), math.sin(math.radians(30)), 0.0])
    assert a @ F @ a == pytest.approx(1.05, abs=1e-14)


def test_point_driver_relaxation():
    job = parse_config("[polar]\nsamples = 20\n")
    rows = np.array(run_point(job))
    t, Y, psi_eq, psi_neq = rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]
    assert t[0] == 1e-6
    assert np.argmax(psi_neq) == 0
    assert np.max(np.abs(psi_eq - psi_eq[0])) < 1e-10
    assert np.all(np.diff(Y) <= 0)


def test_isotropic_polar_is_angle_independent():
    job = parse_config("[polar]\nangles = 0:360:15\ntimes = 1e-6, 0.01\n[fibers]\nvf = 0\n")
    Y = np.array(run_polar(job))[:, 2].reshape(-1, 2)
    assert np.max(np.abs(Y - Y[0])) < 1e-6


# --- command line --------------------------------------------------------------------

def write(tmp_path, text):
    p = tmp_path / "job.cfg"
    p.write_text(text)
    return str(p)


def test_cli_config_error_exit_code(tmp_path):
    assert cli.main(["run", write(tmp_path, "[environment]\nw_w = -0.1\n"), "--quiet"]) == 2
    assert cli.main(["run", str(tmp_path / "missing.cfg"), "--quiet"]) == 2


def test_cli_solver_failure_exit_code(tmp_path):
    text = ("[geometry]\nnx = 4\nny = 4\n[loading]\ndu = 0.2\ntarget = 0.2\n"
            "[solver]\nmax_newton = 1\nmax_bisections = 0\n")
    assert cli.main(["run", write(tmp_path, text), "--quiet",
                     "--output-dir", str(tmp_path / "out")]) == 3


def test_cli_mesh(tmp_path):
    out = tmp_path / "mesh.vtk"
    cfg = write(tmp_path, "[geometry]\nnx = 4\nny = 4\n")
    assert cli.main(["mesh", cfg, "--out", str(out), "--quiet"]) == 0
    text = out.read_text()
    assert "POINTS 27 double" in text and "CELLS 16 80" in text


def test_cli_point(tmp_path):
    cfg = write(tmp_path, "[polar]\nsamples = 5\n[output]\ncsv = relax.csv\n")
    assert cli.main(["point", cfg, "--quiet", "--output-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "relax.csv").read_text().splitlines()
    assert lines[0] == "t_s,Y_total,psi_eq,psi_neq,psi_vol_pos"
    assert len(lines) == 1 + 7          # five samples plus two interior snapshot times


def test_cli_run_small_job(tmp_path):
    text = ("[geometry]\nnx = 4\nny = 4\n[loading]\ndu = 1e-3\ntarget = 3e-3\n"
            "[output]\nvtk_stride = 2\n")
    out = tmp_path / "out"
    assert cli.main(["run", write(tmp_path, text), "--quiet", "--output-dir", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["force.csv", "step_000002.vtk", "step_000003.vtk"]
    lines = (out / "force.csv").read_text().splitlines()
    assert len(lines) == 4


def test_cli_entry_point_module(tmp_path):
    cfg = write(tmp_path, "[geometry]\nnx = 3\n")
    proc = subprocess.run([sys.executable, "-m", "anisofrac.cli", "mesh", cfg, "--out",
                           str(tmp_path / "m.vtk")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "nx" in proc.stderr
