"""Compiled per-point kernels for the local update and the FD tangent.

These mirror the batched numpy code in :mod:`anisofrac.material`,
:mod:`anisofrac.integrator` and :mod:`anisofrac.tangent` one point at a
time, which is what makes the FEM layer affordable. The numpy versions stay
the reference; the test-suite checks that both agree.

Material constants travel in a flat array built by :func:`pack_params`.
"""

import math

import numpy as np
from numba import njit, prange

from .material import J_ROUNDOFF, EnvState, MaterialParams, moduli

# indices into the packed parameter vector
_MU_EQ, _MU_NEQ, _KV, _JTW, _EDOT0, _BETA, _M, _TAU0 = 0, 1, 2, 3, 4, 5, 6, 7
_AVP, _B, _SIG0, _KRES, _A1, _A2, _A3, _W4, _SCALED_NORM = 8, 9, 10, 11, 12, 13, 14, 15, 16
_NP = 17

MAX_INCREMENT = 5.0
MAX_FLOW = 1.0
PLAIN_SWEEPS = 8
CONTRACTION = 0.5
STIFF = 0.2

_PADE = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


def _basis():
    r2, r6 = math.sqrt(2.0), math.sqrt(6.0)
    E = np.zeros((5, 3, 3))
    E[0, 0, 0], E[0, 1, 1] = 1 / r2, -1 / r2
    E[1, 0, 0], E[1, 1, 1], E[1, 2, 2] = 1 / r6, 1 / r6, -2 / r6
    for a, (i, j) in zip((2, 3, 4), ((0, 1), (0, 2), (1, 2))):
        E[a, i, j] = E[a, j, i] = 1 / r2
    return E


_E = _basis()
_PAIRS = np.array([[0, 0], [1, 1], [2, 2], [0, 1], [0, 2], [1, 2]])


def pack_params(params: MaterialParams, env: EnvState):
    mu_eq, mu_neq, kv = moduli(params, env)
    P = np.empty(_NP)
    P[_MU_EQ], P[_MU_NEQ], P[_KV] = mu_eq, mu_neq, kv
    P[_JTW] = ((1.0 + params.alpha_theta * (env.theta - params.theta0))
               * (1.0 + params.alpha_w * env.w_w))
    P[_EDOT0] = params.edot0
    P[_BETA] = params.dH / (params.kB * env.theta)
    P[_M], P[_TAU0] = params.m, params.tau0
    P[_AVP] = params.a_w1 * env.w_w + params.a_w0
    P[_B], P[_SIG0], P[_KRES] = params.b, params.sigma0, params.k_res
    P[_A1], P[_A2], P[_A3] = params.a1, params.a2, params.a3
    P[_W4] = 0.5 if params.fiber_w4 == "halved" else 1.0
    P[_SCALED_NORM] = 1.0 if params.fiber_dir_normalization == "scaled" else 0.0
    return P


# --------------------------------------------------------------------------
# 3x3 helpers
# --------------------------------------------------------------------------

@njit(cache=True)
def _det(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@njit(cache=True)
def _inv(A):
    out = np.empty((3, 3))
    out[0, 0] = A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    out[0, 1] = A[0, 2] * A[2, 1] - A[0, 1] * A[2, 2]
    out[0, 2] = A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]
    out[1, 0] = A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]
    out[1, 1] = A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
    out[1, 2] = A[0, 2] * A[1, 0] - A[0, 0] * A[1, 2]
    out[2, 0] = A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]
    out[2, 1] = A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]
    out[2, 2] = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    d = A[0, 0] * out[0, 0] + A[0, 1] * out[1, 0] + A[0, 2] * out[2, 0]
    return out / d


@njit(cache=True)
def _mm(A, B):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
    return out


@njit(cache=True)
def _tr(A):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[j, i]
    return out


@njit(cache=True)
def _mv(A, v):
    out = np.empty(3)
    for i in range(3):
        out[i] = A[i, 0] * v[0] + A[i, 1] * v[1] + A[i, 2] * v[2]
    return out


@njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _dev(A):
    out = A.copy()
    t = (A[0, 0] + A[1, 1] + A[2, 2]) / 3.0
    for i in range(3):
        out[i, i] -= t
    return out


@njit(cache=True)
def _frob(A):
    s = 0.0
    for i in range(3):
        for j in range(3):
            s += A[i, j] * A[i, j]
    return math.sqrt(s)


@njit(cache=True)
def _finite(A):
    for x in A.ravel():
        if not np.isfinite(x):
            return False
    return True


@njit(cache=True)
def _expm(L):
    norm1 = 0.0
    for j in range(3):
        c = 0.0
        for i in range(3):
            c += abs(L[i, j])
        norm1 = max(norm1, c)
    if norm1 < 1e-3:
        # short Taylor series is exact to rounding here
        R = np.eye(3)
        term = np.eye(3)
        for k in range(1, 8):
            term = _mm(term, L) / k
            R += term
        return R
    s = 0
    if norm1 > _THETA13:
        s = int(math.ceil(math.log2(norm1 / _THETA13)))
    A = L / (2.0 ** s)
    b = _PADE
    I = np.eye(3)
    A2 = _mm(A, A)
    A4 = _mm(A2, A2)
    A6 = _mm(A4, A2)
    U = _mm(A, _mm(A6, b[13] * A6 + b[11] * A4 + b[9] * A2)
            + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I)
    V = _mm(A6, b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I
    R = _mm(_inv(V - U), V + U)
    for _ in range(s):
        R = _mm(R, R)
    return R


@njit(cache=True)
def _rotation_of(F):
    """Rotation factor of ``F = R U`` by the scaled Newton iteration ``X <- (X + X^-T)/2``."""
    X = F.copy()
    for _ in range(50):
        Xi = _inv(X)
        g = (abs(_det(Xi)) / abs(_det(X))) ** (1.0 / 6.0)
        Y = 0.5 * (g * X + _tr(Xi) / g)
        diff = _frob(Y - X)
        X = Y
        if diff <= 1e-15 * 3.0:
            break
    # one unscaled polish step for full accuracy
    return 0.5 * (X + _tr(_inv(X)))


# --------------------------------------------------------------------------
# stress
# --------------------------------------------------------------------------

@njit(cache=True)
def _branch(Fb, mu, a0, vf, vm, J, P, sig):
    """Accumulate the branch stress into ``sig``; return the undegraded energy."""
    C = _mm(_tr(Fb), Fb)
    B = _mm(Fb, _tr(Fb))
    I1 = C[0, 0] + C[1, 1] + C[2, 2]
    devB = _dev(B)
    psi = vm * 0.5 * mu * (I1 - 3.0)
    for i in range(3):
        for j in range(3):
            sig[i, j] += vm * mu / J * devB[i, j]
    for f in range(a0.shape[0]):
        v = vf[f]
        if v == 0.0:
            continue
        a = a0[f]
        Ca = _mv(C, a)
        I4 = _dot(a, Ca)
        I5 = _dot(Ca, Ca)
        e = math.exp(P[_A3] * (I4 - 1.0))
        ff = P[_A1] + P[_A2] * e
        df = P[_A2] * P[_A3] * e
        p, q = 1.0 + v, 1.0 - v
        den1 = q * ff + p
        g1 = (p * ff + q) / den1
        dg1 = df * (p * p - q * q) / den1 ** 2
        num2 = 1.0 + 0.4 * v
        den2 = q * ff + 0.4 + v
        g2 = (num2 * ff + 0.4 * q) / den2
        dg2 = df * (num2 * (0.4 + v) - 0.4 * q * q) / den2 ** 2
        stretch = I4 + 2.0 / math.sqrt(I4) - 3.0
        rest = I1 - (I5 + 2.0 * math.sqrt(I4)) / I4
        psi += v * 0.5 * mu * ((vm + v * ff) * stretch + g1 * (I5 - I4 * I4) / I4 + g2 * rest)
        W1 = 0.5 * mu * g2
        W4 = 0.5 * mu * (
            v * df * stretch
            + (vm + v * ff) * (1.0 - I4 ** -1.5)
            - g1 * (I5 / I4 ** 2 + 1.0)
            + g2 * (I5 / I4 ** 2 + I4 ** -1.5)
            + P[_W4] * (I5 - I4 * I4) / I4 * dg1
            + P[_W4] * rest * dg2
        )
        W5 = mu / (2.0 * I4) * (g1 - g2)
        Fa = _mv(Fb, a)
        if P[_SCALED_NORM] != 0.0:
            nrm = math.sqrt(J ** (2.0 / 3.0) * I4)
        else:
            nrm = math.sqrt(I4)
        ac = Fa / nrm
        Ba = _mv(B, ac)
        c = v * 2.0 / J
        for i in range(3):
            for j in range(3):
                t = W1 * devB[i, j] + W4 * I4 * ac[i] * ac[j] + W5 * I4 * (ac[i] * Ba[j] + Ba[i] * ac[j])
                if i == j:
                    t -= W4 * I4 / 3.0 + W5 * I4 * I5 * 2.0 / 3.0
                sig[i, j] += c * t
    return psi


@njit(cache=True)
def _degr(phi, k):
    p = min(max(phi, 0.0), 1.0)
    return (1.0 - p) ** 2 + k


@njit(cache=True)
def point_stress(F, Fv, Fvp, phi, a0, vf, P):
    """Return ``(sigma, psi_eq, psi_neq, psi_vol, psi_vol_pos, sigma_neq, Fe)``."""
    J = _det(F)
    Jm = J / P[_JTW]
    vm = 1.0 - vf.sum()
    Fbar = F * J ** (-1.0 / 3.0)
    Fve = _mm(Fbar, _inv(Fvp))
    Fe = _mm(Fve, _inv(Fv))
    s_eq = np.zeros((3, 3))
    s_neq = np.zeros((3, 3))
    psi_eq = _branch(Fve, P[_MU_EQ], a0, vf, vm, J, P, s_eq)
    psi_neq = _branch(Fe, P[_MU_NEQ], a0, vf, vm, J, P, s_neq)
    kv = P[_KV]
    psi_vol = 0.5 * kv * ((Jm * Jm - 1.0) / 2.0 - math.log(Jm))
    pv = 0.5 * kv * (Jm - 1.0 / Jm) / J
    g = _degr(phi, P[_KRES])
    sig = g * (s_eq + s_neq)
    for i in range(3):
        sig[i, i] += g * pv
    psi_pos = psi_vol if J >= 1.0 - J_ROUNDOFF else 0.0
    return sig, psi_eq, psi_neq, psi_vol, psi_pos, g * s_neq, Fe


@njit(cache=True)
def _neq(Fve, Fv, J, phi, a0, vf, P):
    vm = 1.0 - vf.sum()
    Fe = _mm(Fve, _inv(Fv))
    s = np.zeros((3, 3))
    _branch(Fe, P[_MU_NEQ], a0, vf, vm, J, P, s)
    return _degr(phi, P[_KRES]) * s, Fe


# --------------------------------------------------------------------------
# local update
# --------------------------------------------------------------------------

@njit(cache=True)
def _log_rate(tau, P):
    return math.log(P[_EDOT0]) + P[_BETA] * ((max(tau, 0.0) / P[_TAU0]) ** P[_M] - 1.0)


@njit(cache=True)
def _dlog_rate(tau, P):
    """Derivative of the log viscous rate with respect to the stress."""
    if tau <= 0.0:
        return 0.0
    return P[_BETA] * P[_M] * (tau / P[_TAU0]) ** (P[_M] - 1.0) / P[_TAU0]


@njit(cache=True)
def _required_stress(r, dt, P):
    if r <= 0.0:
        return 0.0
    base = 1.0 + math.log(r / (dt * P[_EDOT0])) / P[_BETA]
    return P[_TAU0] * max(base, 0.0) ** (1.0 / P[_M])


@njit(cache=True)
def _sweep(F, Fv, Fvp, Fvp_n, phi, a0, vf, P, dt, eps, eps_rate, eps0_n, latched=False):
    """Viscoplastic update and viscous direction at the current iterate.

    ``latched`` keeps the viscoplastic flow switched on regardless of the
    threshold. Also returns whether the threshold is reached.
    """
    sig, _, _, _, _, s_neq, Fe = point_stress(F, Fv, Fvp, phi, a0, vf, P)
    dev_s = _dev(sig)
    tau_tot = _frob(dev_s)
    above = tau_tot >= P[_SIG0]
    e0 = eps0_n
    if (above or latched) and np.isnan(eps0_n):
        e0 = eps
    Fvp_new = Fvp_n.copy()
    ok = True
    if above or latched:
        e0v = np.inf if np.isnan(e0) else e0
        rate = P[_AVP] * max(eps - e0v, 0.0) ** P[_B] * max(eps_rate, 0.0)
        if rate > 0.0:
            Lvp = dev_s * (dt * rate / tau_tot)
            if not _finite(Lvp) or _frob(Lvp) > MAX_INCREMENT:
                ok = False
            else:
                Fvp_new = _mm(_expm(Lvp), Fvp_n)
    Re = _rotation_of(Fe)
    d = _dev(_mm(_tr(Re), _mm(s_neq, Re)))
    return Fvp_new, ok, Re, d, _frob(d), e0, above


@njit(cache=True)
def _flow_along(tau, G, dt, P):
    """Flow size ``y`` solving ``ln y = ln dt + ln rate(tau - G y)``."""
    ldt = math.log(dt)
    lo = ldt + _log_rate(0.0, P)
    y_zero = tau / G
    if y_zero <= math.exp(lo):
        return math.exp(lo)
    hi = math.log(y_zero)
    u = min(max(ldt + _log_rate(tau, P), lo), hi)
    for _ in range(100):
        y = math.exp(u)
        t = max(tau - G * y, 0.0)
        k = u - ldt - _log_rate(t, P)
        if k > 0.0:
            hi = u
        else:
            lo = u
        dk = 1.0 + _dlog_rate(t, P) * G * y
        un = u - k / dk
        if not (un > lo and un < hi):
            un = 0.5 * (lo + hi)
        if abs(un - u) < 1e-13:
            return math.exp(un)
        u = un
    return math.exp(u)


@njit(cache=True)
def _qmat(q):
    Q = np.zeros((3, 3))
    for a in range(5):
        Q += q[a] * _E[a]
    return Q


@njit(cache=True)
def _resolved(u, Fve, Fv_n, N, n_sp, J, phi, a0, vf, P):
    Fv = _mm(_expm(math.exp(u) * N), Fv_n)
    s, _ = _neq(Fve, Fv, J, phi, a0, vf, P)
    return np.sum(s * n_sp)


@njit(cache=True)
def _predict(Fve, Fv_n, N, n_sp, J, phi, a0, vf, P, dt, tol):
    """Flow magnitude along a frozen direction (Illinois on ``ln x``)."""
    ldt = math.log(dt)
    lo = ldt + _log_rate(0.0, P)
    tau0 = _resolved(-np.inf, Fve, Fv_n, N, n_sp, J, phi, a0, vf, P)
    hi = min(ldt + _log_rate(tau0, P), math.log(MAX_FLOW))
    hi = max(hi, lo)
    k_lo = lo - ldt - _log_rate(_resolved(lo, Fve, Fv_n, N, n_sp, J, phi, a0, vf, P), P)
    k_hi = hi - ldt - _log_rate(_resolved(hi, Fve, Fv_n, N, n_sp, J, phi, a0, vf, P), P)
    if not k_hi >= 0.0:
        return 0.0, False
    if k_lo >= 0.0:
        return math.exp(lo), True
    if k_hi == 0.0:
        return math.exp(hi), True
    u = hi
    side = 0
    for _ in range(200):
        c = hi - k_hi * (hi - lo) / (k_hi - k_lo)
        if not (c > lo and c < hi):
            c = 0.5 * (lo + hi)
        kc = c - ldt - _log_rate(_resolved(c, Fve, Fv_n, N, n_sp, J, phi, a0, vf, P), P)
        u = c
        if kc < 0.0:
            lo, k_lo = c, kc
            if side == 1:
                k_hi *= 0.5
            side = 1
        else:
            hi, k_hi = c, kc
            if side == -1:
                k_lo *= 0.5
            side = -1
        if kc == 0.0 or math.exp(hi) - math.exp(lo) <= 1e-3 * tol:
            return math.exp(u), True
    return math.exp(u), False


@njit(cache=True)
def _residual(q, Fve, Fv_n, J, phi, a0, vf, P, dt, R):
    Fv = _mm(_expm(_qmat(q)), Fv_n)
    s, Fe = _neq(Fve, Fv, J, phi, a0, vf, P)
    if not _finite(s) or _det(Fe) <= 0.0:
        return False
    Re = _rotation_of(Fe)
    sr = _mm(_tr(Re), _mm(s, Re))
    r = math.sqrt(np.sum(q * q))
    req = _required_stress(r, dt, P)
    for a in range(5):
        R[a] = np.sum(_E[a] * sr) - req / max(r, 1e-300) * q[a]
    return True


@njit(cache=True)
def _resolved_dev(q, Fve, Fv_n, J, phi, a0, vf, P, out):
    """Components of the rotated non-equilibrium deviator at flow ``q``."""
    Fv = _mm(_expm(_qmat(q)), Fv_n)
    s, Fe = _neq(Fve, Fv, J, phi, a0, vf, P)
    if not _finite(s) or _det(Fe) <= 0.0:
        return False
    Re = _rotation_of(Fe)
    sr = _mm(_tr(Re), _mm(s, Re))
    for a in range(5):
        out[a] = np.sum(_E[a] * sr)
    return True


@njit(cache=True)
def _required_dev(q, dt, P, req, K):
    """Required stress vector for flow ``q`` and its derivative."""
    r = math.sqrt(np.sum(q * q))
    K[:, :] = 0.0
    if r <= 0.0:
        req[:] = 0.0
        return
    t = _required_stress(r, dt, P)
    base = 1.0 + math.log(r / (dt * P[_EDOT0])) / P[_BETA]
    dt_dr = 0.0
    if base > 0.0:
        dt_dr = P[_TAU0] / P[_M] * base ** (1.0 / P[_M] - 1.0) / (P[_BETA] * r)
    for a in range(5):
        req[a] = t * q[a] / r
        for b in range(5):
            qq = q[a] * q[b] / (r * r)
            K[a, b] = dt_dr * qq + t / r * ((1.0 if a == b else 0.0) - qq)


@njit(cache=True)
def _broyden(q, Fve, Fv_n, J, phi, a0, vf, P, dt, tol):
    """Newton on the flow with an analytic rate part and a Broyden stress part.

    The stress Jacobian is differenced once and then updated by secants.
    """
    dv = np.empty(5)
    if not _resolved_dev(q, Fve, Fv_n, J, phi, a0, vf, P, dv):
        return q, False
    req = np.empty(5)
    K = np.empty((5, 5))
    _required_dev(q, dt, P, req, K)
    R = dv - req
    floor = 2e-3 * tol * P[_MU_NEQ] * _degr(phi, P[_KRES])
    if math.sqrt(np.sum(R * R)) <= floor:
        return q, True
    D = np.empty((5, 5))
    h = 1e-7 * max(math.sqrt(np.sum(q * q)), 1e-6)
    dp = np.empty(5)
    for b in range(5):
        qp = q.copy()
        qp[b] += h
        if not _resolved_dev(qp, Fve, Fv_n, J, phi, a0, vf, P, dp):
            return q, False
        for a in range(5):
            D[a, b] = (dp[a] - dv[a]) / h
    dvt = np.empty(5)
    reqt = np.empty(5)
    Kt = np.empty((5, 5))
    for _ in range(30):
        Jac = D - K
        if not (np.isfinite(Jac).all() and abs(np.linalg.det(Jac)) > 0.0):
            return q, False
        dq = -np.linalg.solve(Jac, R)
        n0 = math.sqrt(np.sum(R * R))
        step = 1.0
        accepted = False
        for _ls in range(20):
            qt = q + step * dq
            if _resolved_dev(qt, Fve, Fv_n, J, phi, a0, vf, P, dvt):
                _required_dev(qt, dt, P, reqt, Kt)
                nt = math.sqrt(np.sum((dvt - reqt) ** 2))
                if np.isfinite(nt) and nt <= n0 * (1.0 - 1e-4 * step):
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            return q, False
        s = qt - q
        ss = np.sum(s * s)
        if ss > 0.0:
            y = dvt - dv
            D += np.outer(y - D @ s, s) / ss
        q = qt
        dv[:] = dvt
        K[:, :] = Kt
        R = dvt - reqt
        if math.sqrt(np.sum(R * R)) <= floor or math.sqrt(ss) <= 1e-3 * tol:
            return q, True
    return q, False


@njit(cache=True)
def _newton(q, Fve, Fv_n, J, phi, a0, vf, P, dt, tol):
    R = np.empty(5)
    if not _residual(q, Fve, Fv_n, J, phi, a0, vf, P, dt, R):
        return q, False
    scale = max(math.sqrt(np.sum(R * R)), 1.0)
    # residual level below which q is already accurate to a fraction of tol
    floor = 2e-3 * tol * P[_MU_NEQ] * _degr(phi, P[_KRES])
    Jac = np.empty((5, 5))
    Rp = np.empty(5)
    Rt = np.empty(5)
    for _ in range(30):
        if math.sqrt(np.sum(R * R)) <= floor:
            return q, True
        h = 1e-7 * max(math.sqrt(np.sum(q * q)), 1e-6)
        good = True
        for b in range(5):
            qp = q.copy()
            qp[b] += h
            if not _residual(qp, Fve, Fv_n, J, phi, a0, vf, P, dt, Rp):
                good = False
                break
            for a in range(5):
                Jac[a, b] = (Rp[a] - R[a]) / h
        dq = np.zeros(5)
        if good and np.isfinite(Jac).all() and abs(np.linalg.det(Jac)) > 0.0:
            dq = -np.linalg.solve(Jac, R)
        n0 = math.sqrt(np.sum(R * R))
        step = 1.0
        accepted = False
        for _ls in range(30):
            qt = q + step * dq
            if _residual(qt, Fve, Fv_n, J, phi, a0, vf, P, dt, Rt):
                nt = math.sqrt(np.sum(Rt * Rt))
                if np.isfinite(nt) and nt <= n0 * (1.0 - 1e-4 * step):
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            return q, False
        q = qt
        R[:] = Rt
        if step * math.sqrt(np.sum(dq * dq)) <= 1e-3 * tol or math.sqrt(np.sum(R * R)) <= 1e-12 * scale:
            return q, True
    return q, False


@njit(cache=True)
def point_update(F, Fv_n, Fvp_n, eps0_n, eps_prev, phi, a0, vf, P, dt, tol, max_iters,
                 Fv_guess, Fvp_guess):
    """Converged internal variables for one point.

    The plain sweeps start from ``(Fv_guess, Fvp_guess)``; pass the step-start
    values for a cold start. Returns ``(Fv, Fvp, eps0, eps, iterations, ok)``.
    """
    E = 0.5 * (_mm(_tr(F), F) - np.eye(3))
    eps = _frob(E)
    eps_rate = max((eps - eps_prev) / dt, 0.0)
    J = _det(F)
    Fbar = F * J ** (-1.0 / 3.0)
    Fv = Fv_guess.copy()
    Fvp = Fvp_guess.copy()
    e0 = eps0_n
    prev = np.inf
    G = 2.0 * P[_MU_NEQ] * _degr(phi, P[_KRES])
    for it in range(min(PLAIN_SWEEPS, max_iters)):
        Fvp_new, ok, _, d, tau, e0, _ = _sweep(F, Fv, Fvp, Fvp_n, phi, a0, vf, P, dt, eps,
                                               eps_rate, eps0_n)
        if not ok:
            break
        coef = 0.0
        if tau > 0.0:
            coef = math.exp(_log_rate(tau, P)) / tau
        # estimated contraction of the plain sweep; stiff points go to Newton
        if it == 0 and dt * coef * tau * _dlog_rate(tau, P) * G > STIFF:
            break
        Lv = d * (dt * coef)
        if not _finite(Lv) or _frob(Lv) > MAX_FLOW:
            break
        Fv_new = _mm(_expm(Lv), Fv_n)
        delta = _frob(Fv_new - Fv) + _frob(Fvp_new - Fvp)
        Fv, Fvp = Fv_new, Fvp_new
        if delta < tol:
            return Fv, Fvp, e0, eps, it + 1, True
        if it >= 1 and delta > CONTRACTION * prev:
            break
        prev = delta

    # robust path from the step-start values
    Fv = Fv_n.copy()
    Fvp = Fvp_n.copy()
    q = np.zeros(5)
    # a finite flow increment can pull the stress back under the threshold and
    # off again forever; after an on-off-on cycle the flow stays switched on
    latched = False
    flips = 0
    was = False
    for it in range(max_iters):
        Fvp_new, ok, Re, d, tau, e0, above = _sweep(F, Fv, Fvp, Fvp_n, phi, a0, vf, P, dt, eps,
                                                    eps_rate, eps0_n, latched)
        if it > 0 and above != was:
            flips += 1
            latched = latched or (flips >= 2 and above)
        was = above
        if not ok:
            return Fv_n.copy(), Fvp_n.copy(), e0, eps, it + 1, False
        Fve = _mm(Fbar, _inv(Fvp_new))
        Fv_new = Fv_n.copy()
        if it == 0 and tau > 0.0:
            # isotropic return as the starting point
            x = _flow_along(tau, G, dt, P)
            for a in range(5):
                q[a] = x / tau * np.sum(_E[a] * d)
        if tau > 0.0 or np.any(q != 0.0):
            q1, solved = _broyden(q, Fve, Fv_n, J, phi, a0, vf, P, dt, tol)
            if not solved and it == 0 and tau > 0.0:
                N = d / tau
                x, solved = _predict(Fve, Fv_n, N, _mm(Re, _mm(N, _tr(Re))), J, phi, a0, vf,
                                     P, dt, tol)
                for a in range(5):
                    q[a] = x * np.sum(_E[a] * N)
            if not solved:
                q1, solved = _newton(q, Fve, Fv_n, J, phi, a0, vf, P, dt, tol)
            if not solved:
                return Fv_n.copy(), Fvp_n.copy(), e0, eps, it + 1, False
            q = q1
            Fv_new = _mm(_expm(_qmat(q)), Fv_n)
        delta = _frob(Fv_new - Fv) + _frob(Fvp_new - Fvp)
        Fv, Fvp = Fv_new, Fvp_new
        if delta < tol:
            return Fv, Fvp, e0, eps, it + 1, True
    return Fv_n.copy(), Fvp_n.copy(), e0, eps, max_iters, False


# --------------------------------------------------------------------------
# batch drivers
# --------------------------------------------------------------------------

@njit(parallel=True, cache=True)
def integrate_batch(F, Fv_n, Fvp_n, H_n, eps0_n, eps_prev, phi, a0, vf, P, dt, tol, max_iters,
                    Fv, Fvp, H, eps0, eps, iters, ok, sigma, energies):
    """Update every point; ``energies`` columns are psi_eq, psi_neq, psi_vol, psi_vol_pos, Y."""
    for i in prange(F.shape[0]):
        fv, fvp, e0, ep, it, good = point_update(
            F[i], Fv_n[i], Fvp_n[i], eps0_n[i], eps_prev[i], phi[i], a0[i], vf[i], P,
            dt[i], tol, max_iters, Fv_n[i], Fvp_n[i])
        s, pe, pn, pv, pp, _, _ = point_stress(F[i], fv, fvp, phi[i], a0[i], vf[i], P)
        Fv[i] = fv
        Fvp[i] = fvp
        eps0[i] = e0
        eps[i] = ep
        iters[i] = it
        ok[i] = good
        sigma[i] = s
        y = pe + pn + pp
        energies[i, 0], energies[i, 1], energies[i, 2], energies[i, 3], energies[i, 4] = pe, pn, pv, pp, y
        H[i] = max(H_n[i], y)


@njit(parallel=True, cache=True)
def tangent_batch(F, Fv_n, Fvp_n, eps0_n, eps_prev, phi, a0, vf, P, dt, tol, max_iters,
                  sigma, Fv, Fvp, fd_eps, C, ok):
    """One-sided FD Jaumann tangent in Voigt storage for every point.

    ``sigma``, ``Fv`` and ``Fvp`` are the converged values at ``F``; they seed
    the perturbed solves, which still start each step from ``Fv_n``, ``Fvp_n``.
    """
    for i in prange(F.shape[0]):
        good = True
        for J in range(6):
            k, l = _PAIRS[J, 0], _PAIRS[J, 1]
            D = np.zeros((3, 3))
            D[k, l] += 0.5 * fd_eps
            D[l, k] += 0.5 * fd_eps
            Fp = F[i] + _mm(D, F[i])
            if _det(Fp) <= 0.0:
                good = False
                break
            fv, fvp, _, _, _, conv = point_update(
                Fp, Fv_n[i], Fvp_n[i], eps0_n[i], eps_prev[i], phi[i], a0[i], vf[i], P,
                dt[i], tol, max_iters, Fv[i], Fvp[i])
            if not conv:
                good = False
                break
            s = point_stress(Fp, fv, fvp, phi[i], a0[i], vf[i], P)[0]
            for I in range(6):
                a, b = _PAIRS[I, 0], _PAIRS[I, 1]
                C[i, I, J] = (s[a, b] - sigma[i, a, b]) / fd_eps
        ok[i] = good
