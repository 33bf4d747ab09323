"""CSV and legacy VTK writers with platform-independent number formatting."""

import os

import numpy as np

from ..fem import von_mises

FORCE_HEADER = ("step", "time_s", "displacement_mm", "force_N", "newton_iters",
                "staggered_iters")


def format_number(x):
    """Nine significant digits; scientific notation below 1e-3 in magnitude."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if x == 0.0:
        return "0"
    if abs(x) < 1e-3:
        return f"{x:.8e}"
    return f"{x:.9g}"


def write_csv(path, header, rows):
    """Write rows with ``\\n`` line endings and :func:`format_number` cells."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_number(v) for v in row) + "\n")


def write_force_csv(report, path):
    rows = [(r.step, r.time, r.displacement, r.force, r.newton_iters, r.staggered_iters)
            for r in report.rows]
    write_csv(path, FORCE_HEADER, rows)


def write_vtk(mesh, fields, path, title="anisofrac fields"):
    """Legacy ASCII unstructured grid with displacement, phase field, history and stress."""
    n, ne = mesh.n_nodes, mesh.n_elements
    H = fields.points.H.reshape(ne, 4).max(axis=1)
    vm = von_mises(fields.sigma).reshape(ne, 4).mean(axis=1)
    f = format_number
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {n} double"]
    out += [f"{f(x)} {f(y)} 0" for x, y in mesh.nodes]
    out.append(f"CELLS {ne} {5 * ne}")
    out += ["4 " + " ".join(str(int(i)) for i in e) for e in mesh.elements]
    out.append(f"CELL_TYPES {ne}")
    out += ["9"] * ne
    out += [f"POINT_DATA {n}", "VECTORS displacement double"]
    out += [f"{f(ux)} {f(uy)} 0" for ux, uy in fields.u]
    out += ["SCALARS phi double 1", "LOOKUP_TABLE default"]
    out += [f(v) for v in fields.phi]
    out += [f"CELL_DATA {ne}", "SCALARS history_max double 1", "LOOKUP_TABLE default"]
    out += [f(v) for v in H]
    out += ["SCALARS sigma_vm double 1", "LOOKUP_TABLE default"]
    out += [f(v) for v in vm]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")
