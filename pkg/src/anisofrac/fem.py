"""Plane-strain bilinear-quad finite elements and the staggered fracture driver.

Displacements are solved by Newton iteration on the spatial weak form with
the finite-difference tangent of :mod:`anisofrac.tangent`; the phase field
is linear once the history is frozen and is solved after each converged
displacement step. Quadrature-point data are flattened element-major, so
point ``4 * e + g`` is Gauss point ``g`` of element ``e``.

Units are mm, N, MPa and s. The out-of-plane thickness scales every force.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, GeometryError, SolverError, StepRejected
from .integrator import GaussPointState, StepControls, integrate_compiled
from .material import EnvState, MaterialParams, fiber_arrays
from .phasefield import FractureParams, aniso_tensor
from .tangent import spatial_tangent, tangent_points

_G = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
_NODE_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
# in-plane Voigt rows (xx, yy, xy) of the 6x6 tangent
_PLANE = [0, 1, 3]


def shape_functions(xi):
    """Bilinear shape functions and their parent-coordinate gradients at ``xi``."""
    xi = np.atleast_2d(xi)
    s = 1.0 + xi[:, None, 0] * _NODE_XI[None, :, 0]
    t = 1.0 + xi[:, None, 1] * _NODE_XI[None, :, 1]
    N = 0.25 * s * t
    dN = np.stack([0.25 * _NODE_XI[None, :, 0] * t, 0.25 * _NODE_XI[None, :, 1] * s], axis=-1)
    return N, dN


_N_GP, _DN_GP = shape_functions(GAUSS_POINTS)


def _inv2(A):
    det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1]
    out[..., 1, 1] = A[..., 0, 0]
    out[..., 0, 1] = -A[..., 0, 1]
    out[..., 1, 0] = -A[..., 1, 0]
    return out / det[..., None, None], det


@dataclass
class Mesh:
    """Quad mesh with counter-clockwise connectivity.

    ``node_sets`` maps names (``top``, ``bottom``, ``left``, ``right``,
    ``notch_upper``, ``notch_lower``) to node indices and ``regions`` labels
    every element with an index into the job's fiber regions.
    """

    nodes: np.ndarray
    elements: np.ndarray
    node_sets: dict = field(default_factory=dict)
    regions: np.ndarray = None
    thickness: float = 1.0

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise GeometryError("nodes must have shape (n, 2)")
        if self.elements.ndim != 2 or self.elements.shape[1] != 4:
            raise GeometryError("elements must have shape (m, 4)")
        if self.elements.size and (self.elements.min() < 0
                                   or self.elements.max() >= len(self.nodes)):
            raise GeometryError("element connectivity refers to a missing node")
        if self.regions is None:
            self.regions = np.zeros(len(self.elements), dtype=np.int64)
        self.regions = np.asarray(self.regions, dtype=np.int64)
        if self.regions.shape != (len(self.elements),):
            raise GeometryError("one region label per element is required")
        self.node_sets = {k: np.asarray(v, dtype=np.int64) for k, v in self.node_sets.items()}
        if not self.thickness > 0:
            raise GeometryError("thickness must be positive")
        if np.any(self.ref_volume <= 0.0):
            bad = int(np.flatnonzero(np.any(self.ref_volume <= 0.0, axis=1))[0])
            raise GeometryError(f"non-positive Jacobian in element {bad}")

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def n_points(self):
        return 4 * self.n_elements

    @cached_property
    def _reference(self):
        X = self.nodes[self.elements]                               # (ne, 4, 2)
        J0 = np.einsum("gai,eaj->egij", _DN_GP, X)
        inv, det = _inv2(J0)
        G = np.einsum("egji,gai->egaj", inv, _DN_GP)
        return G, det * self.thickness

    @property
    def ref_gradients(self):
        """Reference shape-function gradients, shape ``(ne, 4 gauss, 4 nodes, 2)``."""
        return self._reference[0]

    @property
    def ref_volume(self):
        """Reference volume weight of each Gauss point (unit Gauss weights)."""
        return self._reference[1]

    @cached_property
    def _pattern(self):
        dofs = np.stack([2 * self.elements, 2 * self.elements + 1], axis=-1).reshape(-1, 8)
        rows = np.repeat(dofs, 8, axis=1).ravel()
        cols = np.tile(dofs, (1, 8)).ravel()
        return dofs, rows, cols

    def node_set(self, name):
        try:
            return self.node_sets[name]
        except KeyError:
            raise GeometryError(f"mesh has no node set {name!r}") from None


@dataclass
class Model:
    """Mesh plus per-point material data.

    ``region_families`` holds one list of :class:`FiberFamily` per region and
    ``region_orientation`` the matching orientation tensors used by the
    crack-resistance tensor.
    """

    mesh: Mesh
    params: MaterialParams
    env: EnvState
    fracture: FractureParams
    region_families: list
    region_orientation: list

    def __post_init__(self):
        nreg = len(self.region_families)
        if nreg != len(self.region_orientation):
            raise ContractViolation("one orientation tensor per region is required")
        if self.mesh.regions.size and self.mesh.regions.max() >= nreg:
            raise ContractViolation("mesh refers to an undefined fiber region")
        arrays = [fiber_arrays(f) for f in self.region_families]
        nf = max([a.shape[0] for a, _ in arrays] + [0])
        a0 = np.zeros((nreg, nf, 3))
        vf = np.zeros((nreg, nf))
        a0[:, :, 0] = 1.0                 # padding families carry no fibers
        for r, (a, v) in enumerate(arrays):
            a0[r, :len(v)] = a
            vf[r, :len(v)] = v
        point_region = np.repeat(self.mesh.regions, 4)
        self.a0 = np.ascontiguousarray(a0[point_region])
        self.vf = np.ascontiguousarray(vf[point_region])
        Ahat = np.array([aniso_tensor(A, self.fracture.alpha_hat)[:2, :2]
                         for A in self.region_orientation]).reshape(-1, 2, 2)
        self.Ahat = Ahat[self.mesh.regions] if nreg else np.zeros((0, 2, 2))

    @property
    def families(self):
        return self.a0, self.vf


@dataclass(frozen=True)
class LoadProgram:
    """Displacement-controlled loading of the top edge.

    ``stop_fraction`` ends a run early once the force has fallen below that
    fraction of its peak; zero disables the check.
    """

    rate: float = 1.0          # mm/min
    du: float = 1e-5           # mm
    target: float = 0.03       # mm
    stop_fraction: float = 0.0

    def __post_init__(self):
        if not (self.rate > 0 and self.du > 0 and self.target > 0):
            raise ContractViolation("rate, du and target must be positive")
        if not 0.0 <= self.stop_fraction < 1.0:
            raise ContractViolation("stop_fraction must lie in [0, 1)")

    @property
    def dt(self):
        return self.du / (self.rate / 60.0)

    @property
    def n_steps(self):
        return int(np.ceil(self.target / self.du - 1e-9))


@dataclass(frozen=True)
class SolverControls:
    tol_u: float = 1e-6
    max_newton: int = 25
    staggered_passes: int = 1
    tol_stag: float = 1e-4
    max_bisections: int = 8
    local_tol: float = 1e-10
    local_max_iters: int = 50
    fd_eps: float = 1e-5

    def __post_init__(self):
        if not (self.tol_u > 0 and self.tol_stag > 0 and self.local_tol > 0 and self.fd_eps > 0):
            raise ContractViolation("solver tolerances must be positive")
        if min(self.max_newton, self.staggered_passes, self.local_max_iters) < 1:
            raise ContractViolation("iteration limits must be at least one")
        if self.max_bisections < 0:
            raise ContractViolation("max_bisections must be non-negative")


@dataclass
class FieldState:
    """Nodal fields, quadrature-point state and the last committed stresses."""

    u: np.ndarray
    phi: np.ndarray
    points: GaussPointState
    sigma: np.ndarray
    time: float = 0.0
    displacement: float = 0.0
    step: int = 0
    velocity: np.ndarray = None   # du/d(top displacement) of the last increment

    @classmethod
    def initial(cls, mesh: Mesh):
        n = mesh.n_points
        return cls(u=np.zeros((mesh.n_nodes, 2)), phi=np.zeros(mesh.n_nodes),
                   points=GaussPointState.virgin(n), sigma=np.zeros((n, 3, 3)))

    def copy(self):
        return replace(self, u=self.u.copy(), phi=self.phi.copy(), points=self.points.copy(),
                       sigma=self.sigma.copy(),
                       velocity=None if self.velocity is None else self.velocity.copy())


@dataclass(frozen=True)
class StepRecord:
    step: int
    time: float
    displacement: float
    force: float
    newton_iters: int
    staggered_iters: int


@dataclass
class SolveReport:
    rows: list = field(default_factory=list)

    def append(self, row: StepRecord):
        if self.rows and not (row.step > self.rows[-1].step and row.time >= self.rows[-1].time):
            raise ContractViolation("report rows must advance monotonically")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def peak(self):
        """``(force, displacement)`` at the largest force, or ``(0, 0)`` when empty."""
        if not self.rows:
            return 0.0, 0.0
        best = max(self.rows, key=lambda r: r.force)
        return best.force, best.displacement


# --------------------------------------------------------------------------
# kinematics and assembly
# --------------------------------------------------------------------------

def point_values(mesh: Mesh, nodal):
    """Interpolate a nodal scalar field to the Gauss points (flattened)."""
    return np.einsum("ga,ea->eg", _N_GP, np.asarray(nodal)[mesh.elements]).ravel()


def deformation(mesh: Mesh, u):
    """Plane-strain deformation gradients ``(n_points, 3, 3)`` with ``F33 = 1``."""
    ue = np.asarray(u)[mesh.elements]                               # (ne, 4, 2)
    F2 = np.eye(2) + np.einsum("eai,egaj->egij", ue, mesh.ref_gradients)
    F = np.zeros(F2.shape[:2] + (3, 3))
    F[..., :2, :2] = F2
    F[..., 2, 2] = 1.0
    return F.reshape(-1, 3, 3)


def _spatial(mesh, F):
    """Spatial gradients and current volume weights at every Gauss point."""
    F2 = F.reshape(mesh.n_elements, 4, 3, 3)[..., :2, :2]
    inv, J = _inv2(F2)
    if np.any(J <= 0.0):
        raise StepRejected("element inverted", mask=(J <= 0.0).ravel())
    g = np.einsum("egak,egkj->egaj", mesh.ref_gradients, inv)
    return g, J * mesh.ref_volume


def _b_matrix(g):
    ne, ng = g.shape[:2]
    B = np.zeros((ne, ng, 3, 8))
    B[..., 0, 0::2] = g[..., 0]
    B[..., 1, 1::2] = g[..., 1]
    B[..., 2, 0::2] = g[..., 1]
    B[..., 2, 1::2] = g[..., 0]
    return B


def internal_force(mesh: Mesh, F, sigma):
    """Assembled internal force vector for Cauchy stresses at the Gauss points."""
    g, dv = _spatial(mesh, F)
    s = sigma.reshape(mesh.n_elements, 4, 3, 3)[..., :2, :2]
    fe = np.einsum("egij,egaj,eg->eai", s, g, dv).reshape(-1, 8)
    dofs = mesh._pattern[0]
    return np.bincount(dofs.ravel(), weights=fe.ravel(), minlength=2 * mesh.n_nodes)


def stiffness(mesh: Mesh, F, sigma, c_spatial):
    """Material plus geometric stiffness from the spatial tangent (CSR)."""
    g, dv = _spatial(mesh, F)
    ne = mesh.n_elements
    B = _b_matrix(g)
    D = c_spatial.reshape(ne, 4, 6, 6)[..., _PLANE, :][..., _PLANE]
    Ke = np.einsum("egIa,egIJ,egJb,eg->eab", B, D, B, dv)
    s = sigma.reshape(ne, 4, 3, 3)[..., :2, :2]
    geo = np.einsum("egai,egij,egbj,eg->eab", g, s, g, dv)
    Ke[:, 0::2, 0::2] += geo
    Ke[:, 1::2, 1::2] += geo
    _, rows, cols = mesh._pattern
    n = 2 * mesh.n_nodes
    return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))


@dataclass
class UAssembly:
    """Result of a displacement assembly at a trial displacement."""

    residual: np.ndarray
    stiffness: object
    points: GaussPointState
    sigma: np.ndarray
    F: np.ndarray
    phi: np.ndarray


def assemble_u(model: Model, fields: FieldState, u, dt, ctrl: SolverControls,
               with_stiffness=True):
    """Internal force, stiffness and trial point states at displacement ``u``.

    Points are integrated from the committed ``fields.points`` with the
    committed phase field ``fields.phi``; the returned states are trial
    values to be committed only when the step is accepted.

    Raises
    ------
    StepRejected
        An element inverts or a point (or its tangent) fails to converge.
    """
    mesh = model.mesh
    F = deformation(mesh, u)
    _spatial(mesh, F)                                   # inversion check first
    phi = np.clip(point_values(mesh, fields.phi), 0.0, 1.0)
    state, sigma, _, _, failed = integrate_compiled(
        F, fields.points, phi, model.families, model.params, model.env, dt,
        ctrl.local_tol, ctrl.local_max_iters)
    if np.any(failed):
        raise StepRejected(f"local integration failed at {int(failed.sum())} point(s)",
                           mask=failed)
    asm = UAssembly(internal_force(mesh, F, sigma), None, state, sigma, F, phi)
    if with_stiffness:
        add_stiffness(model, fields, asm, dt, ctrl)
    return asm


def add_stiffness(model: Model, fields: FieldState, asm: UAssembly, dt, ctrl: SolverControls):
    """Fill ``asm.stiffness`` from the finite-difference tangent at the trial states."""
    C, bad = tangent_points(asm.F, fields.points, asm.points, asm.sigma, asm.phi,
                            model.families, model.params, model.env,
                            StepControls(dt, ctrl.local_tol, ctrl.local_max_iters), ctrl.fd_eps)
    if np.any(bad):
        raise StepRejected(f"tangent failed at {int(bad.sum())} point(s)", mask=bad)
    asm.stiffness = stiffness(model.mesh, asm.F, asm.sigma, spatial_tangent(C, asm.sigma))
    return asm


def assemble_phi(model: Model, fields: FieldState, H):
    """Linear phase-field system ``K phi = f`` for the history ``H`` at the Gauss points.

    Gradients are taken on the deformed configuration; the spatial volume
    element divided by the Jacobian is the reference one.
    """
    mesh = model.mesh
    fp = model.fracture
    F = deformation(mesh, fields.u)
    g, _ = _spatial(mesh, F)
    dV = mesh.ref_volume
    He = np.asarray(H).reshape(mesh.n_elements, 4)
    react = 2.0 * He + fp.Gc / fp.l0
    Ke = np.einsum("eg,ga,gb,eg->eab", react, _N_GP, _N_GP, dV)
    Ke += fp.Gc * fp.l0 * np.einsum("egai,eij,egbj,eg->eab", g, model.Ahat, g, dV)
    fe = np.einsum("eg,ga,eg->ea", 2.0 * He, _N_GP, dV)
    n = mesh.n_nodes
    rows = np.repeat(mesh.elements, 4, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 4)).ravel()
    K = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    f = np.bincount(mesh.elements.ravel(), weights=fe.ravel(), minlength=n)
    return f, K


def sparse_solve(A, b, rtol=1e-10):
    """Direct sparse solve with a relative-residual check.

    One step of iterative refinement is tried before giving up.

    Raises
    ------
    SolverError
        Singular factorization, non-finite solution or residual above ``rtol``.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ContractViolation("matrix and right-hand side sizes differ")
    if b.size == 0:
        return b.copy()
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    x = lu.solve(b)
    bn = np.linalg.norm(b)
    for _ in range(2):
        r = b - A @ x
        if np.all(np.isfinite(x)) and np.linalg.norm(r) <= rtol * max(bn, 1e-300):
            return x
        if bn == 0.0 and np.all(np.isfinite(x)):
            return x
        x = x + lu.solve(r)
    diag = np.abs(lu.U.diagonal())
    cond = diag.max() / diag.min() if diag.min() > 0 else np.inf
    raise SolverError(f"relative residual {np.linalg.norm(b - A @ x) / bn:.3e} above {rtol:g}; "
                      f"pivot ratio {cond:.3e}")


# --------------------------------------------------------------------------
# stepping
# --------------------------------------------------------------------------

class _NewtonFailure(Exception):
    pass


def constrained_dofs(mesh: Mesh):
    """``(fixed, loaded)`` dof indices: bottom edge vertical plus one pinned corner; top vertical."""
    bottom = mesh.node_set("bottom")
    top = mesh.node_set("top")
    if bottom.size == 0 or top.size == 0:
        raise GeometryError("top and bottom node sets must be non-empty")
    corner = bottom[np.argmin(mesh.nodes[bottom, 0])]
    fixed = np.union1d(2 * bottom + 1, [2 * corner])
    return fixed, 2 * top + 1


def reaction_force(mesh: Mesh, residual):
    """Vertical force carried by the top edge."""
    return float(np.sum(np.asarray(residual)[2 * mesh.node_set("top") + 1]))


def solve_displacement(model: Model, fields: FieldState, u_top, dt, ctrl: SolverControls):
    """Newton solve for the displacement with the top edge at ``u_top``.

    Returns ``(u, assembly, iterations)``; raises :class:`StepRejected` or
    :class:`SolverError` when the iteration cannot proceed.
    """
    mesh = model.mesh
    fixed, loaded = constrained_dofs(mesh)
    ndof = 2 * mesh.n_nodes
    free = np.setdiff1d(np.arange(ndof), np.union1d(fixed, loaded))
    u = fields.u.ravel().copy()
    if fields.velocity is not None:
        # extrapolate the previous increment
        u += fields.velocity.ravel() * (u_top - fields.displacement)
    u[fixed] = 0.0
    u[loaded] = u_top
    first = None
    for it in range(1, ctrl.max_newton + 1):
        asm = assemble_u(model, fields, u.reshape(-1, 2), dt, ctrl, with_stiffness=False)
        r = asm.residual
        rn = np.linalg.norm(r[free])
        scale = max(np.linalg.norm(r[np.union1d(fixed, loaded)]), 1.0)
        if not np.isfinite(rn):
            raise _NewtonFailure("non-finite residual")
        if rn <= ctrl.tol_u * scale:
            return u.reshape(-1, 2), asm, it - 1
        if first is None:
            first = rn
        elif rn > 1e6 * max(first, ctrl.tol_u):
            raise _NewtonFailure(f"residual grew to {rn:.3e}")
        add_stiffness(model, fields, asm, dt, ctrl)
        K = asm.stiffness[free][:, free]
        u[free] += sparse_solve(K, -r[free])
    raise _NewtonFailure(f"no convergence in {ctrl.max_newton} iterations (residual {rn:.3e})")


def solve_phase_field(model: Model, fields: FieldState, H):
    f, K = assemble_phi(model, fields, H)
    return np.clip(sparse_solve(K, f), 0.0, 1.0)


def _increment(model, fields, u_top, dt, ctrl):
    """One staggered increment without cutting; returns ``(fields, newton, passes, force)``."""
    newton = 0
    phi = fields.phi
    for p in range(1, ctrl.staggered_passes + 1):
        trial = replace(fields, phi=phi)
        u, asm, its = solve_displacement(model, trial, u_top, dt, ctrl)
        newton += its
        committed = replace(fields, u=u, phi=phi, points=asm.points, sigma=asm.sigma)
        phi_new = solve_phase_field(model, committed, asm.points.H)
        change = np.max(np.abs(phi_new - phi)) if phi.size else 0.0
        phi = phi_new
        force = reaction_force(model.mesh, asm.residual)
        if change <= ctrl.tol_stag:
            break
    out = replace(committed, phi=phi, time=fields.time + dt)
    return out, newton, p, force


def staggered_step(model: Model, fields: FieldState, load: LoadProgram, ctrl: SolverControls):
    """Advance the top displacement by ``load.du`` and return ``(fields, record)``.

    A failed increment is cut in half, down to ``ctrl.max_bisections``
    levels; the sub-increments are applied in sequence.

    Raises
    ------
    SolverError
        The increment still fails at the finest level.
    """
    target = fields.displacement + load.du
    pending = [(load.du, 0)]
    current = fields
    newton = passes = 0
    force = 0.0
    while pending:
        du, level = pending.pop()
        dt = du / (load.rate / 60.0)
        try:
            nxt, its, p, force = _increment(model, current, current.displacement + du, dt, ctrl)
        except (StepRejected, SolverError, _NewtonFailure) as exc:
            if level >= ctrl.max_bisections:
                raise SolverError(f"step {fields.step + 1} failed after {level} bisections: "
                                  f"{exc}") from exc
            pending += [(0.5 * du, level + 1), (0.5 * du, level + 1)]
            continue
        nxt.displacement = current.displacement + du
        nxt.velocity = (nxt.u - current.u) / du
        current = nxt
        newton += its
        passes = max(passes, p)
    current.displacement = target
    current.step = fields.step + 1
    row = StepRecord(current.step, current.time, current.displacement, force, newton, passes)
    return current, row


def run(model: Model, load: LoadProgram, ctrl: SolverControls, fields=None, callback=None):
    """Step until the target displacement; returns ``(fields, report)``.

    ``callback(fields, record)`` is called after every accepted step.
    """
    fields = FieldState.initial(model.mesh) if fields is None else fields
    report = SolveReport()
    peak = 0.0
    for _ in range(load.n_steps):
        fields, row = staggered_step(model, fields, load, ctrl)
        report.append(row)
        if callback is not None:
            callback(fields, row)
        peak = max(peak, row.force)
        if load.stop_fraction > 0.0 and peak > 0.0 and row.force < load.stop_fraction * peak:
            break
    return fields, report


def von_mises(sigma):
    s = np.asarray(sigma)
    dev = s - np.trace(s, axis1=-2, axis2=-1)[..., None, None] * np.eye(3) / 3.0
    return np.sqrt(1.5 * np.sum(dev * dev, axis=(-2, -1)))


def set_threads(n):
    """Set the worker count of the compiled point loops (``None`` keeps the default)."""
    if n is None:
        return
    import numba

    if not 1 <= int(n) <= numba.config.NUMBA_NUM_THREADS:
        raise ContractViolation(f"threads must lie in [1, {numba.config.NUMBA_NUM_THREADS}]")
    numba.set_num_threads(int(n))
