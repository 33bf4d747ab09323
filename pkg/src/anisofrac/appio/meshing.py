"""Structured single-edge-notched meshes."""

import numpy as np

from ..errors import GeometryError
from ..fem import Mesh


def _on_grid(value, step):
    k = value / step
    return abs(k - round(k)) <= 1e-9 * max(1.0, abs(k)), int(round(k))


def generate_mesh(geometry, fibers=None):
    """Structured quad mesh of the specimen with a seam notch.

    The notch runs from the left edge along mid-height; nodes on it (except
    the tip) are duplicated so the elements above and below are not
    connected. ``fibers`` is the job's fiber block list: element ``e`` gets
    the last listed region whose ``[y_min, y_max)`` contains its centroid,
    and region 0 otherwise.

    Raises
    ------
    GeometryError
        The notch does not fall on an element row and column boundary.
    """
    g = geometry
    nx, ny = g.nx, g.ny
    if nx < 4 or ny < 4:
        raise GeometryError("need at least 4 divisions in each direction")
    dx, dy = g.width / nx, g.height / ny
    x = np.linspace(0.0, g.width, nx + 1)
    y = np.linspace(0.0, g.height, ny + 1)
    X, Y = np.meshgrid(x, y)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    ids = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)

    i0, j0 = np.meshgrid(np.arange(nx), np.arange(ny))
    i0, j0 = i0.ravel(), j0.ravel()
    elements = np.column_stack([ids[j0, i0], ids[j0, i0 + 1], ids[j0 + 1, i0 + 1],
                                ids[j0 + 1, i0]])

    lower = upper = np.zeros(0, dtype=np.int64)
    if g.notch_length > 0.0:
        ok_row, jm = _on_grid(0.5 * g.height, dy)
        ok_col, ia = _on_grid(g.notch_length, dx)
        if not (ok_row and ok_col):
            raise GeometryError("notch must lie on an element row and column boundary")
        lower = ids[jm, :ia]
        upper = np.arange(len(nodes), len(nodes) + ia)
        nodes = np.vstack([nodes, nodes[lower]])
        remap = np.arange(len(nodes))
        remap[lower] = upper
        above = j0 == jm
        elements[above] = remap[elements[above]]

    sets = {
        "bottom": ids[0],
        "top": ids[ny],
        "left": np.union1d(ids[:, 0], upper[:1]),
        "right": ids[:, nx],
        "notch_lower": lower,
        "notch_upper": upper,
    }
    regions = np.zeros(len(elements), dtype=np.int64)
    if fibers is not None:
        yc = y[j0] + 0.5 * dy
        for r, block in enumerate(fibers):
            if r == 0:
                continue
            regions[(yc >= block.y_min) & (yc < block.y_max)] = r
    return Mesh(nodes, elements, sets, regions, thickness=g.thickness)
