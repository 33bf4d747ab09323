import math

import numpy as np
import pytest
import sympy as sp

from anisofrac import material as M
from anisofrac import tensor as T
from anisofrac.errors import ContractViolation, ParameterDomainError
from anisofrac.material import EnvState, FiberFamily, MaterialParams

P = MaterialParams()
LAM = 1.1
FBAR = np.diag([LAM, LAM ** -0.5, LAM ** -0.5])


# --- independent symbolic oracle of the fiber energy -------------------------

_I1, _I4, _I5, _vf, _vm, _mu = sp.symbols("I1 I4 I5 vf vm mu", positive=True)
_f = P.a1 + P.a2 * sp.exp(P.a3 * (_I4 - 1))
_g1 = ((1 + _vf) * _f + (1 - _vf)) / ((1 - _vf) * _f + 1 + _vf)
_g2 = ((1 + sp.Rational(2, 5) * _vf) * _f + sp.Rational(2, 5) * (1 - _vf)) / (
    (1 - _vf) * _f + sp.Rational(2, 5) + _vf)
_PSI = sp.Rational(1, 2) * _mu * (
    (_vm + _vf * _f) * (_I4 + 2 / sp.sqrt(_I4) - 3)
    + _g1 * (_I5 - _I4 ** 2) / _I4
    + _g2 * (_I1 - (_I5 + 2 * sp.sqrt(_I4)) / _I4)
)
_ARGS = (_I1, _I4, _I5, _vf, _vm, _mu)
psi_oracle = sp.lambdify(_ARGS, _PSI, "mpmath")
dpsi4_oracle = sp.lambdify(_ARGS, sp.diff(_PSI, _I4), "mpmath")
dpsi5_oracle = sp.lambdify(_ARGS, sp.diff(_PSI, _I5), "mpmath")
dpsi1_oracle = sp.lambdify(_ARGS, sp.diff(_PSI, _I1), "mpmath")


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# --- hygrothermal --------------------------------------------------------------

@pytest.mark.parametrize("theta, w, expected", [
    (296.0, 0.0, 1.0),
    (296.0, 0.01, 0.9050057),
    (300.0, 0.0, 2.0 - math.exp(0.01093 * 4.0)),
])
def test_hygrothermal_factor(theta, w, expected):
    assert M.hygrothermal_factor(P, EnvState(theta, w)) == pytest.approx(expected, abs=1e-6)


def test_hygrothermal_factor_300K_value():
    assert M.hygrothermal_factor(P, EnvState(300.0, 0.0)) == pytest.approx(0.955310, abs=1e-6)


def test_hygrothermal_factor_nonpositive_rejected():
    with pytest.raises(ParameterDomainError):
        M.hygrothermal_factor(P, EnvState(400.0, 0.0))


def test_env_bounds():
    with pytest.raises(ParameterDomainError):
        EnvState(296.0, -0.1)
    with pytest.raises(ParameterDomainError):
        EnvState(0.0, 0.0)


def test_volumetric_jacobians():
    assert M.volumetric_jacobians(np.eye(3), P, EnvState()) == (1.0, 1.0, 1.0, 1.0)
    J, Jt, Jw, Jm = M.volumetric_jacobians(np.eye(3), P, EnvState(300.0, 0.0))
    assert Jt == pytest.approx(1.0001676, abs=1e-12)
    assert Jm == pytest.approx(1.0 / 1.0001676, abs=1e-12)
    _, _, Jw, _ = M.volumetric_jacobians(np.eye(3), P, EnvState(296.0, 0.01))
    assert Jw == pytest.approx(1.00039, abs=1e-12)


def test_fiber_invariants():
    assert M.fiber_invariants(np.eye(3), np.array([1.0, 0, 0])) == (1.0, 1.0)
    C = FBAR.T @ FBAR
    I4, I5 = M.fiber_invariants(C, np.array([1.0, 0, 0]))
    assert (I4, I5) == (pytest.approx(1.21, abs=1e-14), pytest.approx(1.4641, abs=1e-14))
    I4, I5 = M.fiber_invariants(C, np.array([0.0, 1.0, 0]))
    assert I4 == pytest.approx(1.0 / LAM, abs=1e-14)
    assert I5 == pytest.approx(1.0 / LAM ** 2, abs=1e-14)
    assert round(float(I4), 4) == 0.9091 and round(float(I5), 4) == 0.8264


def test_fiber_aux_reference():
    f, df, g1, dg1, g2, dg2 = M.fiber_aux(1.0, 0.35, P)
    assert f == 10.0
    assert g1 == pytest.approx(14.15 / 7.85, abs=1e-14)
    assert g2 == pytest.approx(11.66 / 7.25, abs=1e-14)
    assert g1 == pytest.approx(1.80255, abs=1e-5)
    assert g2 == pytest.approx(1.60828, abs=1e-5)


def test_fiber_aux_derivatives_match_finite_differences():
    h = 1e-6
    for I4 in (0.8, 1.0, 1.3):
        lo = M.fiber_aux(I4 - h, 0.35, P)
        hi = M.fiber_aux(I4 + h, 0.35, P)
        mid = M.fiber_aux(I4, 0.35, P)
        for k in (0, 2, 4):
            assert mid[k + 1] == pytest.approx((hi[k] - lo[k]) / (2 * h), rel=1e-7)


def test_matrix_energy():
    assert M.matrix_energy(np.eye(3), 760.0) == 0.0
    B = FBAR @ FBAR.T
    expected = 0.5 * 760.0 * (1.21 + 2.0 / 1.1 - 3.0)
    assert M.matrix_energy(B, 760.0) == pytest.approx(expected, rel=1e-14)
    assert round(float(M.matrix_energy(B, 760.0)), 2) == 10.71
    assert M.matrix_energy(B, 1520.0) == pytest.approx(2 * M.matrix_energy(B, 760.0), rel=1e-14)


def test_fiber_energy_reference_state():
    fam = FiberFamily((1.0, 0.0, 0.0), 0.5)
    assert M.fiber_energy(np.eye(3), 3.0, fam, 0.5, 760.0, P) == pytest.approx(0.0, abs=1e-12)


def test_fiber_energy_axial_stretch_vs_symbolic():
    lam = 1.05
    F = np.diag([lam, lam ** -0.5, lam ** -0.5])
    C = F.T @ F
    fam = FiberFamily((1.0, 0.0, 0.0), 0.5)
    got = M.fiber_energy(C, np.trace(C), fam, 0.5, 760.0, P)
    ref = float(psi_oracle(np.trace(C), lam ** 2, lam ** 4, 0.5, 0.5, 760.0))
    assert got > 0
    assert got == pytest.approx(ref, rel=1e-12)


def test_fiber_energy_frame_indifference(rng):
    F = np.eye(3) + 0.05 * rng.normal(size=(3, 3))
    C = F.T @ F
    a = rng.normal(size=3)
    a /= np.linalg.norm(a)
    Q = random_rotation(rng)
    e1 = M.fiber_energy(C, np.trace(C), FiberFamily(tuple(a), 0.3), 0.7, 760.0, P)
    e2 = M.fiber_energy(Q @ C @ Q.T, np.trace(C), FiberFamily(tuple(Q @ a), 0.3), 0.7, 760.0, P)
    assert e1 == pytest.approx(e2, rel=1e-12)


@pytest.mark.parametrize("I1, I4, I5", [(3.0, 1.0, 1.0), (3.02, 1.1, 1.25), (3.1, 0.9, 0.85)])
def test_consistent_fiber_coefficients_are_energy_derivatives(I1, I4, I5):
    Pc = MaterialParams(fiber_w4="consistent")
    W1, W4, W5 = M._fiber_coefficients(I1, I4, I5, 0.35, 0.65, 760.0, Pc)
    args = (I1, I4, I5, 0.35, 0.65, 760.0)
    assert W1 == pytest.approx(float(dpsi1_oracle(*args)), rel=1e-12)
    assert W4 == pytest.approx(float(dpsi4_oracle(*args)), rel=1e-10, abs=1e-9)
    assert W5 == pytest.approx(float(dpsi5_oracle(*args)), rel=1e-12)


def test_printed_w4_cancels_at_reference():
    W1, W4, W5 = M._fiber_coefficients(3.0, 1.0, 1.0, 0.35, 0.65, 760.0, P)
    assert W4 + 2 * W5 == pytest.approx(0.0, abs=1e-10)


def test_volumetric_energy():
    assert M.volumetric_energy(1.0, 1154.0) == 0.0
    expected = 0.5 * 1154.0 * ((1.01 ** 2 - 1) / 2 - math.log(1.01))
    assert M.volumetric_energy(1.01, 1154.0) == pytest.approx(expected, rel=1e-14)
    # the half-k_v prefactor makes this 0.05751 MPa
    assert M.volumetric_energy(1.01, 1154.0) == pytest.approx(0.057509, abs=1e-6)
    assert M.volumetric_energy(0.99, 1154.0) > 0


FAMS = [FiberFamily((1.0, 0.0, 0.0), 0.35), FiberFamily((0.0, 1.0, 0.0), 0.15)]


def test_stress_free_reference():
    rep = M.cauchy_stress(np.eye(3), np.eye(3), np.eye(3), 0.0, FAMS, P, EnvState())
    assert np.max(np.abs(rep.sigma)) < 1e-10
    assert rep.Y == pytest.approx(0.0, abs=1e-12)


def test_full_degradation_scales_stress():
    F = np.diag([1.02, 0.99, 1.0])
    ref = M.cauchy_stress(F, np.eye(3), np.eye(3), 0.0, FAMS, P, EnvState())
    rep = M.cauchy_stress(F, np.eye(3), np.eye(3), 1.0, FAMS, P, EnvState())
    np.testing.assert_allclose(rep.sigma, P.k_res * ref.sigma / (1 + P.k_res), rtol=1e-12)
    assert T.frob(rep.sigma) <= P.k_res * T.frob(ref.sigma)
    # crack driving force stays undegraded
    assert rep.Y == pytest.approx(ref.Y, rel=1e-14)


def test_stress_symmetric_and_Y_nonnegative(rng):
    for _ in range(20):
        F = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
        if np.linalg.det(F) < 0.5:
            continue
        rep = M.cauchy_stress(F, np.eye(3), np.eye(3), 0.0, FAMS, P, EnvState(300.0, 0.01))
        s = rep.sigma
        assert T.frob(s - s.T) <= 1e-9 * T.frob(s)
        assert rep.Y >= 0


def test_objectivity(rng):
    F = np.eye(3) + 0.05 * rng.normal(size=(3, 3))
    env = EnvState(300.0, 0.01)
    base = M.cauchy_stress(F, np.eye(3), np.eye(3), 0.0, FAMS, P, env).sigma
    Qs = np.array([random_rotation(rng) for _ in range(100)])
    rot = M.cauchy_stress(Qs @ F, np.broadcast_to(np.eye(3), Qs.shape),
                          np.broadcast_to(np.eye(3), Qs.shape), 0.0, FAMS, P, env).sigma
    expected = Qs @ base @ T.transpose(Qs)
    err = T.frob(rot - expected) / T.frob(base)
    assert np.max(err) < 1e-8


def test_viscous_rate():
    assert M.viscous_rate(40.0, P, EnvState()) == P.edot0
    beta = 1.977e-19 / (1.380649e-23 * 300.0)
    expected = 1.0447e12 * math.exp(beta * (0.5 ** 0.657 - 1.0))
    got = M.viscous_rate(20.0, P, EnvState(300.0, 0.0))
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(2.7e4, rel=0.05)
    assert M.viscous_rate(20.0, P, EnvState(310.0, 0.0)) > got
    with pytest.raises(ContractViolation):
        M.viscous_rate(-1.0, P, EnvState())


def test_viscoplastic_rate():
    assert M.viscoplastic_rate(29.0, 0.11, 0.01, 1e-3, P, EnvState()) == 0.0
    dry = M.viscoplastic_rate(35.0, 0.11, 0.01, 1e-3, P, EnvState())
    assert dry == pytest.approx(0.8 * 0.1 ** 1.1 * 1e-3, rel=1e-12)
    assert dry == pytest.approx(6.35e-5, rel=1e-3)
    wet = M.viscoplastic_rate(35.0, 0.11, 0.01, 1e-3, P, EnvState(296.0, 0.01))
    assert wet == pytest.approx(1.02 * 0.1 ** 1.1 * 1e-3, rel=1e-12)
    assert wet == pytest.approx(8.10e-5, rel=1e-3)


def test_green_strain_norm(rng):
    assert M.green_strain_norm(np.eye(3)) == 0.0
    assert M.green_strain_norm(np.diag([1.1, 1.0, 1.0])) == pytest.approx(0.105, abs=1e-14)
    assert M.green_strain_norm(random_rotation(rng)) == pytest.approx(0.0, abs=1e-14)


def test_params_validation():
    with pytest.raises(ContractViolation):
        MaterialParams(mu_eq0=-1.0)
    with pytest.raises(ContractViolation):
        MaterialParams(k_res=0.5)
    with pytest.raises(ContractViolation):
        FiberFamily((1.0, 1.0, 0.0), 0.2)
