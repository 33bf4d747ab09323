"""Hygrothermal viscoelastic-viscoplastic free energy and Cauchy stress.

Energy densities are per unit reference volume (MPa); the reference
density is folded into every energy term.

All tensor arguments may carry leading batch axes. Fiber families enter as
arrays ``a0`` of shape ``(..., nf, 3)`` and ``vf`` of shape ``(..., nf)``;
use :func:`fiber_arrays` to convert a list of :class:`FiberFamily`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractViolation, DegenerateDeformation, ParameterDomainError, StateCorruption
from .phasefield import degradation

BOLTZMANN = 1.380649e-23  # J/K
# isochoric states with round-off below one still count as dilated
J_ROUNDOFF = 1e-12


@dataclass(frozen=True)
class MaterialParams:
    """Material constants (glass-fiber/epoxy defaults) and a few numerical knobs.

    ``fiber_dir_normalization`` selects how the current fiber direction is
    normalised in the fiber stress: ``"scaled"`` divides by
    ``sqrt(J^(2/3) I4)``, ``"unimodular"`` by ``sqrt(I4)``.
    ``fiber_w4`` selects the I4-derivative coefficient: ``"halved"`` carries a
    factor 1/2 on the g1', g2' terms, ``"consistent"`` is the exact derivative
    of the fiber energy.
    """

    mu_eq0: float = 760.0
    mu_neq0: float = 790.0
    kv0: float = 1154.0
    edot0: float = 1.0447e12
    dH: float = 1.977e-19
    m: float = 0.657
    tau0: float = 40.0
    a_w0: float = 0.8
    a_w1: float = 22.0
    b: float = 1.1
    sigma0: float = 30.0
    Gc: float = 0.19
    l0: float = 0.02
    alpha_w: float = 0.039
    alpha_theta: float = 4.19e-5
    alpha: float = 0.01093
    a1: float = 9.0
    a2: float = 1.0
    a3: float = 1.0
    kB: float = BOLTZMANN
    theta0: float = 296.0
    k_res: float = 1e-6
    fiber_dir_normalization: str = "scaled"
    fiber_w4: str = "halved"

    def __post_init__(self):
        positive = ("mu_eq0", "mu_neq0", "kv0", "edot0", "dH", "m", "tau0", "b",
                    "sigma0", "Gc", "l0", "kB", "theta0")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be positive")
        if not 0.0 < self.k_res < 1e-2:
            raise ContractViolation("k_res must satisfy 0 < k << 1")
        if self.fiber_dir_normalization not in ("scaled", "unimodular"):
            raise ContractViolation("fiber_dir_normalization must be 'scaled' or 'unimodular'")
        if self.fiber_w4 not in ("halved", "consistent"):
            raise ContractViolation("fiber_w4 must be 'halved' or 'consistent'")


@dataclass(frozen=True)
class EnvState:
    """Uniform, constant environment: temperature (K) and moisture mass fraction."""

    theta: float = 296.0
    w_w: float = 0.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ParameterDomainError("temperature must be positive")
        if not 0.0 <= self.w_w <= 0.02:
            raise ParameterDomainError("moisture fraction must lie in [0, 0.02]")


@dataclass(frozen=True)
class FiberFamily:
    a0: tuple
    vf: float

    def __post_init__(self):
        a0 = np.asarray(self.a0, dtype=float)
        if a0.shape != (3,) or abs(np.linalg.norm(a0) - 1.0) > 1e-12:
            raise ContractViolation("fiber direction must be a unit 3-vector")
        if not 0.0 <= self.vf <= 1.0:
            raise ContractViolation("fiber volume fraction must lie in [0, 1]")
        object.__setattr__(self, "a0", tuple(float(x) for x in a0))


def fiber_arrays(families):
    """Stack families into ``(a0, vf)`` arrays; an empty list gives ``nf = 0``."""
    families = list(families)
    if not families:
        return np.zeros((0, 3)), np.zeros(0)
    a0 = np.array([f.a0 for f in families], dtype=float)
    vf = np.array([f.vf for f in families], dtype=float)
    if vf.sum() > 1.0 + 1e-12:
        raise ContractViolation("fiber volume fractions sum above one")
    return a0, vf


@dataclass
class StressReport:
    """Stress and crack-driving energy split at one or many points.

    ``psi_eq`` and ``psi_neq`` are undegraded; ``sigma`` and ``sigma_neq``
    carry the degradation factor.
    """

    sigma: np.ndarray
    psi_eq: np.ndarray
    psi_neq: np.ndarray
    psi_vol: np.ndarray
    psi_vol_pos: np.ndarray
    Y: np.ndarray
    sigma_neq: np.ndarray
    J: np.ndarray
    Jm: np.ndarray
    Jtheta: float
    Jw: float
    extras: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# scalar laws
# --------------------------------------------------------------------------

def hygrothermal_factor(params: MaterialParams, env: EnvState):
    """Shared temperature/moisture multiplier of the shear and bulk moduli."""
    thermal = 2.0 - np.exp(params.alpha * (env.theta - params.theta0))
    moisture = 1.0 - 9.5 * env.w_w + 0.057 * env.w_w ** 2
    factor = thermal * moisture
    if factor <= 0.0:
        raise ParameterDomainError(
            f"hygrothermal factor {factor:.4g} <= 0 at theta={env.theta} K, w_w={env.w_w}")
    return float(factor)


def moduli(params: MaterialParams, env: EnvState):
    """``(mu_eq, mu_neq, k_v)`` at the given environment."""
    h = hygrothermal_factor(params, env)
    return params.mu_eq0 * h, params.mu_neq0 * h, params.kv0 * h


def volumetric_jacobians(F, params: MaterialParams, env: EnvState):
    """``(J, J_theta, J_w, J_m)`` with ``J = J_m J_theta J_w``."""
    J = T.det(F)
    if np.any(J <= 0.0):
        raise DegenerateDeformation("inverted element: det F <= 0")
    Jt = 1.0 + params.alpha_theta * (env.theta - params.theta0)
    Jw = 1.0 + params.alpha_w * env.w_w
    return J, Jt, Jw, J / (Jt * Jw)


def fiber_invariants(Cbar, a0):
    """``I4 = a0.C a0`` and ``I5 = a0.C^2 a0``; ``a0`` may hold several families."""
    Cbar = np.asarray(Cbar, dtype=float)
    a0 = np.asarray(a0, dtype=float)
    if a0.ndim == 1:
        Ca = Cbar @ a0
        return float(a0 @ Ca) if Cbar.ndim == 2 else np.sum(a0 * Ca, -1), np.sum(Ca * Ca, -1)
    Ca = np.einsum("...ij,...fj->...fi", Cbar, a0)
    return np.sum(a0 * Ca, -1), np.sum(Ca * Ca, -1)


def fiber_aux(I4, vf, params: MaterialParams):
    """Fiber stiffening functions and their I4-derivatives.

    Returns ``(f, df, g1, dg1, g2, dg2)``.
    """
    e = np.exp(params.a3 * (I4 - 1.0))
    f = params.a1 + params.a2 * e
    df = params.a2 * params.a3 * e
    p, q = 1.0 + vf, 1.0 - vf
    den1 = q * f + p
    g1 = (p * f + q) / den1
    dg1 = df * (p * p - q * q) / den1 ** 2
    num2_f = 1.0 + 0.4 * vf
    den2 = q * f + 0.4 + vf
    g2 = (num2_f * f + 0.4 * q) / den2
    dg2 = df * (num2_f * (0.4 + vf) - 0.4 * q * q) / den2 ** 2
    return f, df, g1, dg1, g2, dg2


def matrix_energy(Bbar, mu):
    """Neo-Hookean matrix energy ``mu/2 (tr B - 3)``."""
    return 0.5 * mu * (T.trace(Bbar) - 3.0)


def fiber_energy(Cbar, I1bar, fam, v_m, mu, params: MaterialParams):
    """Stretch-and-shear energy of one fiber family (``fam`` is a FiberFamily)."""
    I4, I5 = fiber_invariants(Cbar, np.asarray(fam.a0))
    return _fiber_energy(I1bar, I4, I5, fam.vf, v_m, mu, params)


def _fiber_energy(I1, I4, I5, vf, vm, mu, params):
    f, _, g1, _, g2, _ = fiber_aux(I4, vf, params)
    stretch = I4 + 2.0 / np.sqrt(I4) - 3.0
    shear = (I5 - I4 ** 2) / I4
    rest = I1 - (I5 + 2.0 * np.sqrt(I4)) / I4
    return 0.5 * mu * ((vm + vf * f) * stretch + g1 * shear + g2 * rest)


def _fiber_coefficients(I1, I4, I5, vf, vm, mu, params):
    f, df, g1, dg1, g2, dg2 = fiber_aux(I4, vf, params)
    W1 = 0.5 * mu * g2
    stretch = I4 + 2.0 / np.sqrt(I4) - 3.0
    shear = I5 - I4 ** 2
    rest = I1 - (I5 + 2.0 * np.sqrt(I4)) / I4
    # the default form halves the g1', g2' terms
    w = 0.5 if params.fiber_w4 == "halved" else 1.0
    W4 = 0.5 * mu * (
        vf * df * stretch
        + (vm + vf * f) * (1.0 - I4 ** -1.5)
        - g1 * (I5 / I4 ** 2 + 1.0)
        + g2 * (I5 / I4 ** 2 + I4 ** -1.5)
        + w * shear / I4 * dg1
        + w * rest * dg2
    )
    W5 = mu / (2.0 * I4) * (g1 - g2)
    return W1, W4, W5


def volumetric_energy(Jm, kv):
    return 0.5 * kv * ((Jm ** 2 - 1.0) / 2.0 - np.log(Jm))


def green_strain_norm(F):
    F = np.asarray(F, dtype=float)
    return T.frob(0.5 * (T.transpose(F) @ F - T.I3))


def viscous_rate(tau_neq, params: MaterialParams, env: EnvState):
    """Thermally activated viscous strain rate (1/s)."""
    tau_neq = np.asarray(tau_neq, dtype=float)
    if np.any(tau_neq < 0):
        raise ContractViolation("driving stress norm must be non-negative")
    beta = params.dH / (params.kB * env.theta)
    return params.edot0 * np.exp(beta * ((tau_neq / params.tau0) ** params.m - 1.0))


def viscoplastic_rate(tau_tot, eps, eps0, eps_rate, params: MaterialParams, env: EnvState):
    """Phenomenological viscoplastic strain rate (1/s); zero below the threshold."""
    a = params.a_w1 * env.w_w + params.a_w0
    over = np.maximum(np.asarray(eps, dtype=float) - eps0, 0.0)
    rate = a * over ** params.b * np.maximum(eps_rate, 0.0)
    return np.where(np.asarray(tau_tot) < params.sigma0, 0.0, rate)


# --------------------------------------------------------------------------
# stress
# --------------------------------------------------------------------------

def _branch(Fb, mu, a0, vf, vm, J, params):
    """Energy and Cauchy stress of one viscoelastic branch.

    ``Fb`` is the isochoric branch deformation (F_ve or F_e), ``mu`` its
    shear modulus. Returns ``(psi, sigma)`` with ``psi`` undegraded.
    """
    C = T.transpose(Fb) @ Fb
    B = Fb @ T.transpose(Fb)
    I1 = T.trace(C)
    devB = T.dev(B)
    psi = vm * matrix_energy(B, mu)
    sigma = (vm * mu / J)[..., None, None] * devB
    if a0.shape[-2] == 0:
        return psi, sigma

    Ca0 = np.einsum("...ij,...fj->...fi", C, a0)
    I4 = np.sum(a0 * Ca0, -1)
    I5 = np.sum(Ca0 * Ca0, -1)
    I1f = I1[..., None]
    muf = np.broadcast_to(mu, I1.shape)[..., None]
    vmf = np.asarray(vm)[..., None]
    psi = psi + np.sum(vf * _fiber_energy(I1f, I4, I5, vf, vmf, muf, params), -1)

    W1, W4, W5 = _fiber_coefficients(I1f, I4, I5, vf, vmf, muf, params)
    Fa0 = np.einsum("...ij,...fj->...fi", Fb, a0)
    if params.fiber_dir_normalization == "scaled":
        norm = np.sqrt(J[..., None] ** (2.0 / 3.0) * I4)
    else:
        norm = np.sqrt(I4)
    a = Fa0 / norm[..., None]
    Ba = np.einsum("...ij,...fj->...fi", B, a)
    aa = a[..., :, None] * a[..., None, :]
    aBa = a[..., :, None] * Ba[..., None, :]
    Id = T.I3
    term = (
        W1[..., None, None] * devB[..., None, :, :]
        + (W4 * I4)[..., None, None] * (aa - Id / 3.0)
        + (W5 * I4)[..., None, None] * (aBa + T.transpose(aBa))
        - (W5 * I4 * I5 * 2.0 / 3.0)[..., None, None] * Id
    )
    sigma = sigma + np.sum((vf * 2.0 / J[..., None])[..., None, None] * term, axis=-3)
    return psi, sigma


def cauchy_stress(F, Fv, Fvp, phi, families, params: MaterialParams, env: EnvState,
                  check_isochoric=True):
    """Degraded Cauchy stress and energy split for given kinematics.

    ``families`` is a list of :class:`FiberFamily` or an ``(a0, vf)`` pair
    of arrays broadcastable against the batch shape of ``F``.
    """
    F = np.asarray(F, dtype=float)
    a0, vf = families if isinstance(families, tuple) else fiber_arrays(families)
    J, Jt, Jw, Jm = volumetric_jacobians(F, params, env)
    if check_isochoric:
        dv, dvp = T.det(Fv), T.det(Fvp)
        if np.any(np.abs(dv - 1.0) > 1e-6) or np.any(np.abs(dvp - 1.0) > 1e-6):
            raise StateCorruption("internal deformation gradients lost unit determinant")
    mu_eq, mu_neq, kv = moduli(params, env)
    vm = 1.0 - np.sum(vf, -1)

    Fbar = F * (J ** (-1.0 / 3.0))[..., None, None]
    Fve = Fbar @ T.inv(Fvp)
    Fe = Fve @ T.inv(Fv)
    psi_eq, s_eq = _branch(Fve, mu_eq, a0, vf, vm, J, params)
    psi_neq, s_neq = _branch(Fe, mu_neq, a0, vf, vm, J, params)

    psi_vol = volumetric_energy(Jm, kv)
    s_vol = (0.5 * kv * (Jm - 1.0 / Jm) / J)[..., None, None] * T.I3
    g = degradation(phi, params.k_res)[0]
    g = np.asarray(g)[..., None, None]
    sigma = g * (s_eq + s_neq + s_vol)
    psi_vol_pos = np.where(J >= 1.0 - J_ROUNDOFF, psi_vol, 0.0)
    return StressReport(
        sigma=sigma,
        psi_eq=psi_eq,
        psi_neq=psi_neq,
        psi_vol=psi_vol,
        psi_vol_pos=psi_vol_pos,
        Y=psi_eq + psi_neq + psi_vol_pos,
        sigma_neq=g * s_neq,
        J=J,
        Jm=Jm,
        Jtheta=Jt,
        Jw=Jw,
        extras={"Fe": Fe, "Fve": Fve},
    )


def neq_stress(Fve, Fv, J, phi, families, params: MaterialParams, env: EnvState):
    """Degraded non-equilibrium stress and ``Fe`` for a given ``Fve`` and ``Fv``.

    Cheaper than :func:`cauchy_stress` when only the viscous branch moves.
    """
    a0, vf = families
    vm = 1.0 - np.sum(vf, -1)
    _, mu_neq, _ = moduli(params, env)
    Fe = Fve @ T.inv(Fv)
    _, s_neq = _branch(Fe, mu_neq, a0, vf, vm, J, params)
    g = np.asarray(degradation(phi, params.k_res)[0])[..., None, None]
    return g * s_neq, Fe
