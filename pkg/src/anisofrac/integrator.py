"""Local time integration of the viscous and viscoplastic internal variables.

The update is an exponential-map step solved by fixed-point iteration. It
is batched: every array in a :class:`GaussPointState` may carry a leading
point axis, and each point iterates until its own convergence so the result
at one point never depends on which other points share the batch.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ContractViolation, StepRejected
from .material import (
    EnvState,
    MaterialParams,
    StressReport,
    cauchy_stress,
    fiber_arrays,
    green_strain_norm,
    moduli,
    neq_stress,
    viscoplastic_rate,
    viscous_rate,
)
from .phasefield import degradation, update_history

# a single flow increment larger than this is treated as divergence
_MAX_INCREMENT = 5.0
# viscous flow magnitudes beyond this are treated as divergence
_MAX_FLOW = 1.0
# plain sweeps tried before the robust path, and the contraction they must show
_PLAIN_SWEEPS = 8
_CONTRACTION = 0.5


@dataclass
class GaussPointState:
    """Internal variables at one or many quadrature points.

    ``eps0`` is NaN until viscoplastic flow has been activated.
    """

    Fv: np.ndarray
    Fvp: np.ndarray
    H: np.ndarray
    eps0: np.ndarray
    eps_prev: np.ndarray

    @classmethod
    def virgin(cls, n=None):
        shape = () if n is None else (n,)
        eye = np.broadcast_to(T.I3, shape + (3, 3)).copy()
        return cls(
            Fv=eye,
            Fvp=eye.copy(),
            H=np.zeros(shape),
            eps0=np.full(shape, np.nan),
            eps_prev=np.zeros(shape),
        )

    def __len__(self):
        return self.H.shape[0]

    def take(self, idx):
        return GaussPointState(self.Fv[idx], self.Fvp[idx], self.H[idx],
                               self.eps0[idx], self.eps_prev[idx])

    def copy(self):
        return self.take(slice(None))

    def put(self, idx, other):
        """Write ``other`` into the rows ``idx`` in place."""
        self.Fv[idx] = other.Fv
        self.Fvp[idx] = other.Fvp
        self.H[idx] = other.H
        self.eps0[idx] = other.eps0
        self.eps_prev[idx] = other.eps_prev


@dataclass(frozen=True)
class StepControls:
    dt: float
    tol: float = 1e-10
    max_iters: int = 50

    def __post_init__(self):
        if not self.dt > 0 or not self.tol > 0 or self.max_iters < 1:
            raise ContractViolation("need dt > 0, tol > 0, max_iters >= 1")


def _rows(x, idx, n):
    """Select rows of a per-point array; broadcast scalars/shared arrays untouched."""
    x = np.asarray(x)
    if x.ndim >= 1 and x.shape[0] == n:
        return x[idx]
    return x


def _families_rows(fam, idx, n, batched):
    a0, vf = fam
    if batched and a0.ndim == 3:
        return a0[idx], vf[idx]
    return a0, vf


def _log_rate(tau, params, env):
    beta = params.dH / (params.kB * env.theta)
    return np.log(params.edot0) + beta * ((np.maximum(tau, 0.0) / params.tau0) ** params.m - 1.0)


def _solve_flow(Fve, Fv_n, N, n_sp, J, phi, fam, params, env, dt, tol):
    """Flow magnitude ``x`` with ``x = dt * rate(tau(x))`` along a frozen direction.

    ``Fv(x) = exp(x N) Fv_n``; ``tau(x)`` is the resolved non-equilibrium
    stress on ``n_sp``. Solved for ``u = ln x`` by Illinois regula falsi;
    ``u - ln dt - ln rate`` is increasing in ``u``, so the bracket is safe
    however stiff the rate law is. Returns ``(x, ok)``.
    """
    m = Fve.shape[0]

    def resolved(u, rows):
        Fv = T.mat_exp(np.exp(u)[:, None, None] * N[rows]) @ Fv_n[rows]
        s, _ = neq_stress(Fve[rows], Fv, J[rows], _rows(phi, rows, m),
                          _families_rows(fam, rows, m, True), params, env)
        return np.sum(s * n_sp[rows], axis=(-2, -1))

    def k(u, rows):
        return u - np.log(dt[rows]) - _log_rate(resolved(u, rows), params, env)

    all_rows = np.arange(m)
    s0, _ = neq_stress(Fve, Fv_n, J, phi, fam, params, env)
    tau0 = np.sum(s0 * n_sp, axis=(-2, -1))
    lo = np.log(dt) + _log_rate(np.zeros(m), params, env)
    hi = np.minimum(np.log(dt) + _log_rate(tau0, params, env), np.log(_MAX_FLOW))
    hi = np.maximum(hi, lo)
    k_lo = k(lo, all_rows)
    k_hi = k(hi, all_rows)
    ok = k_hi >= 0.0
    u = np.where(k_lo >= 0.0, lo, hi)
    open_ = np.flatnonzero(ok & (k_lo < 0.0) & (k_hi > 0.0))
    side = np.zeros(m, dtype=int)
    for _ in range(200):
        if open_.size == 0:
            break
        a, b, ka, kb = lo[open_], hi[open_], k_lo[open_], k_hi[open_]
        c = b - kb * (b - a) / (kb - ka)
        c = np.where((c > a) & (c < b), c, 0.5 * (a + b))
        kc = k(c, open_)
        u[open_] = c
        left = kc < 0.0
        # Illinois: halve the stale endpoint value when the same side is kept twice
        lo[open_] = np.where(left, c, a)
        k_lo[open_] = np.where(left, kc, np.where(side[open_] == -1, 0.5 * ka, ka))
        hi[open_] = np.where(left, b, c)
        k_hi[open_] = np.where(left, np.where(side[open_] == 1, 0.5 * kb, kb), kc)
        side[open_] = np.where(left, 1, -1)
        width = np.exp(hi[open_]) - np.exp(lo[open_])
        done = (kc == 0.0) | (width <= 1e-3 * tol)
        open_ = open_[~done]
    ok[open_] = False
    return np.exp(u), ok



def _dev_basis():
    r2, r6 = np.sqrt(2.0), np.sqrt(6.0)
    E = np.zeros((5, 3, 3))
    E[0, 0, 0], E[0, 1, 1] = 1 / r2, -1 / r2
    E[1, 0, 0], E[1, 1, 1], E[1, 2, 2] = 1 / r6, 1 / r6, -2 / r6
    for a, (i, j) in zip((2, 3, 4), ((0, 1), (0, 2), (1, 2))):
        E[a, i, j] = E[a, j, i] = 1 / r2
    return E


_DEV_BASIS = _dev_basis()


def _required_stress(r, dt, params, env):
    """Driving stress at which the viscous law delivers the flow ``r`` in ``dt``."""
    beta = params.dH / (params.kB * env.theta)
    with np.errstate(divide="ignore"):
        base = 1.0 + np.log(r / (dt * params.edot0)) / beta
    return params.tau0 * np.maximum(base, 0.0) ** (1.0 / params.m)


def _viscous_newton(Fve, Fv_n, q, J, phi, fam, params, env, dt, tol, max_iters=30):
    """Solve ``q = dt * rate(tau) * dev(s_rot)/tau`` for the flow coordinates ``q``.

    The rate law is inverted, ``s_rot(q) = tau_req(|q|) q/|q|``, which turns
    the stiff exponential into a logarithm; Newton with a finite-difference
    Jacobian and backtracking then converges from the scalar predictor.
    """
    m = Fve.shape[0]
    E = _DEV_BASIS

    def residual(qq, rows):
        k = qq.shape[0] // rows.size
        with np.errstate(over="ignore", invalid="ignore"):
            Q = np.einsum("...a,aij->...ij", qq, E)
            Fv = T.mat_exp(Q) @ np.tile(Fv_n[rows], (k, 1, 1))
            sig, Fe = neq_stress(np.tile(Fve[rows], (k, 1, 1)), Fv, np.tile(J[rows], k),
                                 np.tile(_rows(phi, rows, m), k) if np.ndim(phi) else phi,
                                 _tile_fam(_families_rows(fam, rows, m, True), rows.size, k),
                                 params, env)
            bad = ~np.isfinite(sig).all(axis=(-2, -1)) | (T.det(Fe) <= 0.0)
            sig = np.where(bad[:, None, None], 0.0, sig)
            Fe = np.where(bad[:, None, None], T.I3, Fe)
            Re, _ = T.polar(Fe)
            srot = np.einsum("aij,...ij->...a", E, T.transpose(Re) @ sig @ Re)
            r = np.sqrt(np.sum(qq * qq, -1))
            req = _required_stress(r, np.tile(dt[rows], k), params, env)
            R = srot - (req / np.maximum(r, 1e-300))[:, None] * qq
        R[bad] = np.inf
        return R

    rows = np.arange(m)
    ok = np.zeros(m, dtype=bool)
    q = q.copy()
    R = residual(q, rows)
    scale = np.maximum(np.sqrt(np.sum(R * R, -1)), 1.0)
    _, mu_neq, _ = moduli(params, env)
    g = np.broadcast_to(degradation(phi, params.k_res)[0], (m,))
    floor = 2e-3 * tol * mu_neq * g
    active = rows
    for _ in range(max_iters):
        at_floor = np.sqrt(np.sum(R[active] ** 2, -1)) <= floor[active]
        ok[active[at_floor]] = True
        active = active[~at_floor]
        if active.size == 0:
            break
        qa, Ra = q[active], R[active]
        h = 1e-7 * np.maximum(np.sqrt(np.sum(qa * qa, -1)), 1e-6)
        pert = np.concatenate([qa + h[:, None] * np.eye(5)[a] for a in range(5)], axis=0)
        Rp = residual(pert, active).reshape(5, active.size, 5)
        Jac = np.moveaxis((Rp - Ra[None]) / h[None, :, None], 0, -1)   # (m, 5, 5)
        good = np.isfinite(Jac).all(axis=(-2, -1)) & (np.abs(np.linalg.det(Jac)) > 0)
        Jac[~good] = np.eye(5)
        dq = -np.linalg.solve(Jac, Ra[..., None])[..., 0]
        dq[~good] = 0.0
        # backtracking on the residual norm
        step = np.ones(active.size)
        n0 = np.sqrt(np.sum(Ra * Ra, -1))
        trial_q = qa + dq
        pending = np.arange(active.size)
        new_R = np.empty_like(Ra)
        for _ls in range(30):
            Rt = residual(trial_q[pending], active[pending])
            nt = np.sqrt(np.sum(Rt * Rt, -1))
            acc = np.isfinite(nt) & (nt <= n0[pending] * (1.0 - 1e-4 * step[pending]))
            new_R[pending[acc]] = Rt[acc]
            pending = pending[~acc]
            if pending.size == 0:
                break
            step[pending] *= 0.5
            trial_q[pending] = qa[pending] + step[pending, None] * dq[pending]
        stalled = np.zeros(active.size, dtype=bool)
        stalled[pending] = True
        trial_q[pending] = qa[pending]
        new_R[pending] = Ra[pending]
        q[active] = trial_q
        R[active] = new_R
        dnorm = step * np.sqrt(np.sum(dq * dq, -1))
        conv = (dnorm <= 1e-3 * tol) | (np.sqrt(np.sum(new_R * new_R, -1)) <= 1e-12 * scale[active])
        ok[active[conv]] = True
        active = active[~conv & ~stalled]
    return q, ok


def _tile_fam(fam, n, k):
    a0, vf = fam
    if k == 1 or a0.ndim < 3:
        return a0, vf
    return np.tile(a0, (k, 1, 1)), np.tile(vf, (k, 1))


def _integrate(F, state, phi, fam, params, env, dt, tol, max_iters):
    """Core batched fixed-point solve over a flat batch of ``n`` points.

    Plain fixed-point sweeps of the exponential-map update are tried first.
    Points where the sweeps do not contract (stiff viscous flow) restart
    from the step-start values on a robust path: each sweep there freezes
    the flow direction, updates the viscoplastic variable explicitly in its
    rate and solves the viscous flow by Newton on the inverted rate law.
    Both paths converge to the same fixed point.

    Returns ``(Fv, Fvp, eps0, eps, iterations, failed)``.
    """
    n = F.shape[0]
    Fv = state.Fv.copy()
    Fvp = state.Fvp.copy()
    eps = green_strain_norm(F)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (n,))
    eps_rate = np.maximum((eps - state.eps_prev) / dt, 0.0)
    eps0 = state.eps0.copy()
    J = T.det(F)
    Fbar = F * (J ** (-1.0 / 3.0))[:, None, None]
    iters = np.zeros(n, dtype=int)
    failed = np.zeros(n, dtype=bool)

    latched = np.zeros(n, dtype=bool)

    def sweep(idx):
        """Stress at the current iterate, the viscoplastic update and the viscous direction.

        Points in ``latched`` flow regardless of the threshold. Also returns
        whether the threshold is reached.
        """
        rep = cauchy_stress(F[idx], Fv[idx], Fvp[idx], _rows(phi, idx, n),
                            _families_rows(fam, idx, n, True), params, env,
                            check_isochoric=False)
        dev_s = T.dev(rep.sigma)
        tau_tot = T.frob(dev_s)
        above = tau_tot >= params.sigma0
        on = above | latched[idx]
        newly = on & np.isnan(state.eps0[idx])
        e0 = np.where(newly, eps[idx], state.eps0[idx])
        eps0[idx] = e0
        rate_vp = viscoplastic_rate(np.where(on, np.maximum(tau_tot, params.sigma0), 0.0),
                                    eps[idx], np.nan_to_num(e0, nan=np.inf),
                                    eps_rate[idx], params, env)
        flowing = rate_vp > 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            coef_vp = np.where(flowing, rate_vp / np.where(flowing, tau_tot, 1.0), 0.0)
        Lvp = (dt[idx] * coef_vp)[:, None, None] * dev_s
        ok = np.isfinite(Lvp).all(axis=(1, 2)) & (T.frob(np.nan_to_num(Lvp)) <= _MAX_INCREMENT)
        Fvp_new = state.Fvp[idx].copy()
        move = flowing & ok
        if np.any(move):
            Fvp_new[move] = T.mat_exp(Lvp[move]) @ state.Fvp[idx][move]
        Re, _ = T.polar(rep.extras["Fe"])
        d = T.dev(T.transpose(Re) @ rep.sigma_neq @ Re)
        return Fvp_new, ok, Re, d, T.frob(d), above

    def finish(idx, Fv_new, Fvp_new, ok, it):
        delta = T.frob(Fv_new - Fv[idx]) + T.frob(Fvp_new - Fvp[idx])
        Fv[idx] = np.where(ok[:, None, None], Fv_new, Fv[idx])
        Fvp[idx] = np.where(ok[:, None, None], Fvp_new, Fvp[idx])
        iters[idx] = it + 1
        return delta

    # plain fixed-point sweeps
    active = np.arange(n)
    prev = np.full(n, np.inf)
    stiff = []
    for it in range(min(_PLAIN_SWEEPS, max_iters)):
        if active.size == 0:
            break
        idx = active
        Fvp_new, ok, _, d, tau, _ = sweep(idx)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            rate_v = viscous_rate(tau, params, env)
            coef_v = np.where(tau > 0.0, rate_v / np.where(tau > 0.0, tau, 1.0), 0.0)
        with np.errstate(over="ignore", invalid="ignore"):
            Lv = (dt[idx] * coef_v)[:, None, None] * d
            ok &= np.isfinite(Lv).all(axis=(1, 2))
            Lv = np.where(ok[:, None, None], Lv, 0.0)
            ok &= T.frob(Lv) <= _MAX_FLOW
        Lv = np.where(ok[:, None, None], Lv, 0.0)
        Fv_new = T.mat_exp(Lv) @ state.Fv[idx]
        delta = finish(idx, Fv_new, Fvp_new, ok, it)
        done = ok & (delta < tol)
        slow = ~ok | ((it >= 1) & (delta > _CONTRACTION * prev[idx]))
        prev[idx] = delta
        stiff.append(idx[slow & ~done])
        active = idx[~done & ~slow]
    stiff.append(active)
    stiff = np.sort(np.concatenate(stiff))

    # robust sweeps for the stiff points, restarted from the step-start values
    Fv[stiff] = state.Fv[stiff]
    Fvp[stiff] = state.Fvp[stiff]
    q = np.zeros((n, 5))
    # a finite flow increment can pull the stress back under the threshold and
    # off again forever; after an on-off-on cycle the flow stays switched on
    flips = np.zeros(n, dtype=int)
    was = np.zeros(n, dtype=bool)
    active = stiff
    for it in range(max_iters):
        if active.size == 0:
            break
        idx = active
        Fvp_new, ok, Re, d, tau, above = sweep(idx)
        if it > 0:
            flips[idx] += above != was[idx]
            latched[idx] |= (flips[idx] >= 2) & above
        was[idx] = above
        has = tau > 0.0
        N = np.where(has[:, None, None], d / np.where(has, tau, 1.0)[:, None, None], 0.0)
        Fv_new = state.Fv[idx].copy()
        if it == 0 and np.any(has):
            # scalar predictor along the initial direction
            h = np.flatnonzero(has)
            g = idx[h]
            Fve = Fbar[g] @ T.inv(Fvp_new[h])
            n_sp = Re[h] @ N[h] @ T.transpose(Re[h])
            x, solved = _solve_flow(Fve, state.Fv[g], N[h], n_sp, J[g], _rows(phi, g, n),
                                    _families_rows(fam, g, n, True), params, env, dt[g], tol)
            q[g] = np.where(solved[:, None], x[:, None] * np.einsum(
                "aij,nij->na", _DEV_BASIS, N[h]), 0.0)
        fl = np.flatnonzero(has | np.any(q[idx] != 0.0, axis=1))
        if fl.size:
            g = idx[fl]
            Fve = Fbar[g] @ T.inv(Fvp_new[fl])
            qn, solved = _viscous_newton(Fve, state.Fv[g], q[g], J[g], _rows(phi, g, n),
                                         _families_rows(fam, g, n, True), params, env,
                                         dt[g], tol)
            q[g] = qn
            ok[fl] &= solved
            Fv_new[fl] = T.mat_exp(np.einsum("na,aij->nij", qn, _DEV_BASIS)) @ state.Fv[g]
        delta = finish(idx, Fv_new, Fvp_new, ok, it)
        done = ok & (delta < tol)
        failed[idx[~ok]] = True
        active = idx[ok & ~done]

    failed[active] = True
    return Fv, Fvp, eps0, eps, iters, failed


def point_arrays(n, phi, fam, dt):
    """Contiguous per-point copies of ``phi``, ``a0``, ``vf`` and ``dt`` for the kernels."""
    a0, vf = fam
    a0 = np.asarray(a0, dtype=float)
    vf = np.asarray(vf, dtype=float)
    nf = a0.shape[-2]
    return (np.ascontiguousarray(np.broadcast_to(np.asarray(phi, dtype=float), (n,))),
            np.ascontiguousarray(np.broadcast_to(a0, (n, nf, 3))),
            np.ascontiguousarray(np.broadcast_to(vf, (n, nf))),
            np.ascontiguousarray(np.broadcast_to(np.asarray(dt, dtype=float), (n,))))


def _integrate_compiled(F, state, phi, fam, params, env, dt, tol, max_iters):
    from . import _kernels as K

    n = F.shape[0]
    phi_a, a0, vf, dt_a = point_arrays(n, phi, fam, dt)
    Fv = np.empty((n, 3, 3))
    Fvp = np.empty((n, 3, 3))
    H = np.empty(n)
    eps0 = np.empty(n)
    eps = np.empty(n)
    iters = np.empty(n, dtype=np.int64)
    ok = np.empty(n, dtype=np.bool_)
    sigma = np.empty((n, 3, 3))
    energies = np.empty((n, 5))
    K.integrate_batch(np.ascontiguousarray(F), np.ascontiguousarray(state.Fv),
                      np.ascontiguousarray(state.Fvp), np.ascontiguousarray(state.H, dtype=float),
                      np.ascontiguousarray(state.eps0, dtype=float),
                      np.ascontiguousarray(state.eps_prev, dtype=float),
                      phi_a, a0, vf, K.pack_params(params, env), dt_a, float(tol), int(max_iters),
                      Fv, Fvp, H, eps0, eps, iters, ok, sigma, energies)
    return Fv, Fvp, eps0, eps, iters, ~ok, H, sigma, energies


def integrate_compiled(F, state, phi, families, params, env, dt, tol=1e-10, max_iters=50):
    """Kernel-only batch update for callers that need stress and energies but no report.

    Returns ``(new_state, sigma, energies, iterations, failed_mask)``; the
    ``energies`` columns are psi_eq, psi_neq, psi_vol, psi_vol_pos and Y.
    """
    F = np.asarray(F, dtype=float)
    fam = families if isinstance(families, tuple) else fiber_arrays(families)
    Fv, Fvp, eps0, eps, iters, failed, H, sigma, energies = _integrate_compiled(
        F, state, phi, fam, params, env, dt, tol, max_iters)
    return GaussPointState(Fv, Fvp, H, eps0, eps), sigma, energies, iters, failed


BACKENDS = ("numba", "numpy")


def integrate_points(F_next, state, phi, families, params: MaterialParams, env: EnvState,
                     dt, tol=1e-10, max_iters=50, backend="numba"):
    """Non-raising batched update.

    Returns ``(new_state, report, iterations, failed_mask)``; rows flagged in
    ``failed_mask`` hold unusable values. ``backend`` selects the compiled
    per-point kernel (``"numba"``) or the vectorised reference (``"numpy"``).
    """
    if backend not in BACKENDS:
        raise ContractViolation(f"unknown backend {backend!r}")
    F = np.asarray(F_next, dtype=float)
    single = F.ndim == 2
    fam = families if isinstance(families, tuple) else fiber_arrays(families)
    if single:
        F = F[None]
        state = GaussPointState(state.Fv[None], state.Fvp[None], np.atleast_1d(state.H),
                                np.atleast_1d(state.eps0), np.atleast_1d(state.eps_prev))
        phi = np.atleast_1d(phi)
    solve = _integrate_compiled if backend == "numba" else _integrate
    Fv, Fvp, eps0, eps, iters, failed = solve(F, state, phi, fam, params, env, dt, tol,
                                              max_iters)[:6]
    # failed rows are evaluated with their start-of-step variables to keep the report finite
    Fv[failed] = state.Fv[failed]
    Fvp[failed] = state.Fvp[failed]
    rep = cauchy_stress(F, Fv, Fvp, phi, fam, params, env, check_isochoric=False)
    new = GaussPointState(
        Fv=Fv,
        Fvp=Fvp,
        H=update_history(state.H, rep.Y),
        eps0=eps0,
        eps_prev=eps,
    )
    if single:
        new = GaussPointState(new.Fv[0], new.Fvp[0], new.H[0], new.eps0[0], new.eps_prev[0])
        rep = _squeeze_report(rep)
        return new, rep, iters[0], bool(failed[0])
    return new, rep, iters, failed


def _squeeze_report(rep):
    return replace(
        rep,
        sigma=rep.sigma[0], psi_eq=rep.psi_eq[0], psi_neq=rep.psi_neq[0],
        psi_vol=rep.psi_vol[0], psi_vol_pos=rep.psi_vol_pos[0], Y=rep.Y[0],
        sigma_neq=rep.sigma_neq[0], J=rep.J[0], Jm=rep.Jm[0],
        extras={k: v[0] for k, v in rep.extras.items()},
    )


def update_state(F_next, state: GaussPointState, phi, families, params: MaterialParams,
                 env: EnvState, ctrl: StepControls):
    """Advance internal variables over one step and return ``(state, report)``.

    Raises :class:`StepRejected` when any point fails to converge within
    ``ctrl.max_iters`` iterations; the caller is expected to cut the step.
    """
    new, rep, _, failed = integrate_points(F_next, state, phi, families, params, env,
                                           ctrl.dt, ctrl.tol, ctrl.max_iters)
    if np.any(failed):
        raise StepRejected(f"local integration failed at {int(np.sum(failed))} point(s)",
                           mask=np.atleast_1d(failed))
    return new, rep


def update_state_with_bisection(F_prev, F_next, state, phi, families, params, env,
                                ctrl: StepControls, max_bisections=10):
    """Like :func:`update_state`, halving the step on rejection.

    The deformation is interpolated linearly between ``F_prev`` and
    ``F_next`` across the sub-steps.
    """
    F_prev = np.asarray(F_prev, dtype=float)
    F_next = np.asarray(F_next, dtype=float)
    for level in range(max_bisections + 1):
        nsub = 2 ** level
        sub = replace(ctrl, dt=ctrl.dt / nsub)
        st = state
        try:
            for k in range(1, nsub + 1):
                Fk = F_prev + (F_next - F_prev) * (k / nsub)
                st, rep = update_state(Fk, st, phi, families, params, env, sub)
            return st, rep
        except StepRejected:
            continue
    raise StepRejected(f"no convergence after {max_bisections} bisections")


def hold(F, state, phi, families, params: MaterialParams, env: EnvState, times,
         tol=1e-10, max_iters=50, dt_init=None, growth=2.0, max_flow=1e-2,
         max_rounds=200000):
    """Integrate held deformations through the snapshot ``times``.

    ``F`` has shape ``(n, 3, 3)``; every point runs its own adaptive step
    controller, so results do not depend on the batch composition.
    Returns ``(state, reports)`` where ``reports[k]`` holds the report at
    ``times[k]`` for every point.
    """
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    fam = families if isinstance(families, tuple) else fiber_arrays(families)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise ContractViolation("snapshot times must be positive and ascending")
    phi = np.broadcast_to(np.asarray(phi, dtype=float), (n,)).copy()
    state = state.copy()
    t = np.zeros(n)
    target = np.zeros(n, dtype=int)
    if dt_init is None:
        rep0 = cauchy_stress(F, state.Fv, state.Fvp, phi, fam, params, env)
        tau = T.frob(T.dev(rep0.sigma_neq))
        rate = viscous_rate(tau, params, env)
        dt = np.minimum(max_flow / np.maximum(rate, 1e-300), times[0])
    else:
        dt = np.full(n, float(dt_init))
    snaps = [None] * len(times)
    store = [dict() for _ in times]

    for _ in range(max_rounds):
        live = np.flatnonzero(target < len(times))
        if live.size == 0:
            break
        goal = times[target[live]]
        h = np.minimum(dt[live], goal - t[live])
        sub = state.take(live)
        new, rep, iters, failed = integrate_points(
            F[live], sub, phi[live], _families_rows(fam, live, n, True), params, env, h,
            tol, max_iters)
        step_inc = T.frob(new.Fv @ T.inv(sub.Fv) - T.I3) + T.frob(new.Fvp @ T.inv(sub.Fvp) - T.I3)
        reject = failed | ~(step_inc <= max_flow)
        acc = ~reject
        dt[live[reject]] = h[reject] * 0.5
        if np.any(dt[live[reject]] < 1e-300):
            raise StepRejected("time step underflow while holding deformation")
        if np.any(acc):
            rows = live[acc]
            state.put(rows, new.take(acc))
            t[rows] = t[rows] + h[acc]
            grow = acc & (iters <= 6) & (step_inc < 0.5 * max_flow)
            dt[live[grow]] = np.maximum(dt[live[grow]], h[grow]) * growth
            keep = acc & ~grow
            dt[live[keep]] = np.maximum(dt[live[keep]], h[keep])
            hit = acc & np.isclose(t[live], goal, rtol=1e-12, atol=0.0)
            for j in np.flatnonzero(hit):
                p = live[j]
                store[target[p]][p] = (rep.psi_eq[j], rep.psi_neq[j], rep.psi_vol_pos[j],
                                       rep.Y[j], rep.sigma[j])
                t[p] = times[target[p]]
                target[p] += 1
    else:
        raise StepRejected("hold integration exceeded the round budget")

    for k in range(len(times)):
        rows = [store[k][p] for p in range(n)]
        snaps[k] = {
            "psi_eq": np.array([r[0] for r in rows]),
            "psi_neq": np.array([r[1] for r in rows]),
            "psi_vol_pos": np.array([r[2] for r in rows]),
            "Y": np.array([r[3] for r in rows]),
            "sigma": np.array([r[4] for r in rows]),
        }
    return state, snaps
