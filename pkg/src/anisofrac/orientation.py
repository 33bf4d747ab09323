"""Fiber orientation tensor and its principal fiber families."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .material import FiberFamily

LAMBDA_MIN = 1e-6


@dataclass(frozen=True)
class FiberSpec:
    """In-plane fiber population: angles in degrees and their weights.

    Use the presets :meth:`aligned`, :meth:`balanced` and :meth:`random2d`
    or pass explicit lists.
    """

    angles_deg: tuple
    weights: tuple

    def __post_init__(self):
        a = np.asarray(self.angles_deg, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if a.size == 0:
            raise ContractViolation("fiber list is empty")
        if a.shape != w.shape:
            raise ContractViolation("angles and weights differ in length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ContractViolation("fiber weights must be non-negative and sum to one")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
            raise ContractViolation("non-finite fiber angle or weight")
        object.__setattr__(self, "angles_deg", tuple(a.tolist()))
        object.__setattr__(self, "weights", tuple(w.tolist()))

    @classmethod
    def aligned(cls, angle_deg):
        return cls((angle_deg,), (1.0,))

    @classmethod
    def balanced(cls, angle1_deg, angle2_deg, w1=0.5, w2=0.5):
        return cls((angle1_deg, angle2_deg), (w1, w2))

    @classmethod
    def random2d(cls, n, seed=0):
        """``n`` fibers with angles drawn uniformly from [0, 180) degrees."""
        if n < 1:
            raise ContractViolation("random fiber count must be positive")
        rng = np.random.default_rng(seed)
        return cls(tuple(rng.uniform(0.0, 180.0, n)), tuple(np.full(n, 1.0 / n)))


def _double_angle(deg):
    """``cos 2a`` and ``sin 2a``, exact when ``2a`` is a multiple of 90 degrees."""
    two = np.mod(2.0 * np.asarray(deg, dtype=float), 360.0)
    c, s = np.cos(np.radians(two)), np.sin(np.radians(two))
    quadrant = two / 90.0
    exact = quadrant == np.round(quadrant)
    k = np.round(quadrant).astype(int) % 4
    c = np.where(exact, np.array([1.0, 0.0, -1.0, 0.0])[k], c)
    s = np.where(exact, np.array([0.0, 1.0, 0.0, -1.0])[k], s)
    return c, s


def build_orientation(spec: FiberSpec):
    """Second-order orientation tensor ``A = sum_k w_k a_k (x) a_k``.

    Built from the double-angle form ``a (x) a = [[1 + cos 2a, sin 2a],
    [sin 2a, 1 - cos 2a]] / 2`` so quadrant-symmetric populations come out exact.
    """
    w = np.asarray(spec.weights)
    c, s = _double_angle(spec.angles_deg)
    A = np.zeros((3, 3))
    A[0, 0] = np.sum(w * (1.0 + c)) / 2.0
    A[1, 1] = np.sum(w * (1.0 - c)) / 2.0
    A[0, 1] = A[1, 0] = np.sum(w * s) / 2.0
    return A


def decompose_families(A, vf_total, lambda_min=LAMBDA_MIN):
    """Split ``A`` into principal fiber families.

    Eigenvalues below ``lambda_min`` are dropped; the retained families share
    ``vf_total`` in proportion to their eigenvalues, and the rounding residual
    goes to the largest family so the fractions add up to ``vf_total``.
    """
    if not 0.0 <= vf_total < 1.0:
        raise ContractViolation("total fiber fraction must lie in [0, 1)")
    if vf_total == 0.0:
        return []
    eig = T.sym_eig(A)
    lam = eig.values
    keep = np.flatnonzero(lam >= lambda_min)
    if keep.size == 0:
        raise ContractViolation("orientation tensor has no significant eigenvalue")
    share = lam[keep] / lam[keep].sum()
    vf = vf_total * share
    vf[0] += vf_total - vf.sum()
    fams = []
    for i, v in zip(keep, vf):
        d = eig.vectors[:, i]
        fams.append(FiberFamily(tuple(d / np.linalg.norm(d)), float(v)))
    return fams
