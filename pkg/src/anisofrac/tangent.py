"""Finite-difference Jaumann tangent and its spatial counterpart.

Tangents are stored as ``(..., 6, 6)`` arrays in the Voigt order of
:data:`anisofrac.tensor.VOIGT_PAIRS`; entry ``[I, J]`` is the tensor
component ``C_ijkl`` with ``(i, j) = pairs[I]`` and ``(k, l) = pairs[J]``.
Contracting with a strain vector therefore needs engineering shear
components.
"""

import numpy as np

from . import tensor as T
from .errors import DegenerateDeformation, TangentFailure
from .integrator import GaussPointState, integrate_points
from .material import fiber_arrays

FD_EPS = 1e-5


def _perturbations(eps):
    """The six symmetric perturbation directions ``(eps/2)(e_k x e_l + e_l x e_k)``."""
    out = np.zeros((6, 3, 3))
    for J, (k, l) in enumerate(T.VOIGT_PAIRS):
        out[J, k, l] += 0.5 * eps
        out[J, l, k] += 0.5 * eps
    return out


def _tile_state(state, reps):
    return GaussPointState(
        Fv=np.tile(state.Fv, (reps, 1, 1)),
        Fvp=np.tile(state.Fvp, (reps, 1, 1)),
        H=np.tile(state.H, reps),
        eps0=np.tile(state.eps0, reps),
        eps_prev=np.tile(state.eps_prev, reps),
    )


def _tile_rows(x, n, reps):
    x = np.asarray(x)
    if x.ndim >= 1 and x.shape[0] == n:
        return np.concatenate([x] * reps, axis=0)
    return x


def jaumann_tangent(F, state, phi, families, params, env, ctrl, eps=FD_EPS, sigma=None):
    """Tangent conjugate to the Jaumann rate of the Cauchy stress.

    ``state`` holds the start-of-step internal variables; every perturbed
    stress is re-integrated from it with the step size ``ctrl.dt``, so the
    tangent is consistent with :func:`anisofrac.integrator.update_state`.
    Pass ``sigma`` (the converged stress at ``F``) to skip one evaluation.

    Raises
    ------
    TangentFailure
        A perturbed deformation is inverted or fails to integrate.
    """
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    if single:
        F = F[None]
        state = GaussPointState(state.Fv[None], state.Fvp[None], np.atleast_1d(state.H),
                                np.atleast_1d(state.eps0), np.atleast_1d(state.eps_prev))
        phi = np.atleast_1d(phi)
        if sigma is not None:
            sigma = np.asarray(sigma)[None]
    n = F.shape[0]
    fam = families
    if isinstance(fam, tuple) and fam[0].ndim == 3:
        fam = (_tile_rows(fam[0], n, 7), _tile_rows(fam[1], n, 7))
    dF = _perturbations(eps)
    Fp = (dF[:, None] @ F[None]) + F[None]              # (6, n, 3, 3)
    if np.any(T.det(Fp) <= 0.0):
        raise TangentFailure("perturbation inverted the deformation")
    with_base = sigma is None
    batch = np.concatenate([F[None], Fp], axis=0) if with_base else Fp
    reps = batch.shape[0]
    if not with_base and isinstance(fam, tuple) and fam[0].ndim == 3:
        fam = (fam[0][n:], fam[1][n:])
    try:
        _, rep, _, failed = integrate_points(
            batch.reshape(-1, 3, 3), _tile_state(state, reps), _tile_rows(phi, n, reps),
            fam, params, env, ctrl.dt, ctrl.tol, ctrl.max_iters)
    except DegenerateDeformation as exc:
        raise TangentFailure(str(exc)) from exc
    if np.any(failed):
        raise TangentFailure("perturbed stress did not converge")
    s = rep.sigma.reshape(reps, n, 3, 3)
    base = s[0] if with_base else np.asarray(sigma, dtype=float)
    pert = s[1:] if with_base else s
    dsig = (pert - base[None]) / eps                    # (6, n, 3, 3)
    C = np.moveaxis(T.to_voigt(dsig), 0, -1)            # (n, 6, 6)
    return C[0] if single else C


def _correction():
    """Voigt coefficients of the stress-dependent correction, per stress component."""
    d = np.eye(3)
    K = np.zeros((6, 6, 3, 3))
    for I, (i, j) in enumerate(T.VOIGT_PAIRS):
        for J, (k, l) in enumerate(T.VOIGT_PAIRS):
            # coefficient matrix M with sum(M * sigma) = correction_ijkl
            M = np.zeros((3, 3))
            M[j, l] -= 0.5 * d[i, k]
            M[j, k] -= 0.5 * d[i, l]
            M[i, k] -= 0.5 * d[j, l]
            M[i, l] -= 0.5 * d[j, k]
            M[i, j] += d[k, l]
            K[I, J] = M
    return K


_CORR = _correction()


def spatial_tangent(C, sigma):
    """Spatial tangent from the Jaumann tangent.

    ``c_ijkl = C_ijkl - 1/2 (d_ik s_jl + d_il s_jk + s_ik d_jl + s_il d_jk) + s_ij d_kl``.
    """
    sigma = np.asarray(sigma, dtype=float)
    return np.asarray(C, dtype=float) + np.einsum("IJab,...ab->...IJ", _CORR, sigma)


def tangent_points(F, state, new_state, sigma, phi, families, params, env, ctrl, eps=FD_EPS):
    """Compiled batch version of :func:`jaumann_tangent`.

    ``new_state`` and ``sigma`` are the converged values at ``F``; they seed
    the perturbed solves. Returns ``(C, failed_mask)`` instead of raising.
    """
    from . import _kernels as K
    from .integrator import point_arrays

    F = np.ascontiguousarray(F, dtype=float)
    n = F.shape[0]
    fam = families if isinstance(families, tuple) else fiber_arrays(families)
    phi_a, a0, vf, dt_a = point_arrays(n, phi, fam, ctrl.dt)
    C = np.zeros((n, 6, 6))
    ok = np.empty(n, dtype=np.bool_)
    c = np.ascontiguousarray
    K.tangent_batch(F, c(state.Fv), c(state.Fvp), c(state.eps0, dtype=float),
                    c(state.eps_prev, dtype=float), phi_a, a0, vf, K.pack_params(params, env),
                    dt_a, float(ctrl.tol), int(ctrl.max_iters), c(sigma, dtype=float),
                    c(new_state.Fv), c(new_state.Fvp), float(eps), C, ok)
    return C, ~ok
