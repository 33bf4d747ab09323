"""Phase-field pieces: degradation, crack-resistance tensor, history, closed form."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class FractureParams:
    """Fracture constants. ``Gc`` in N/mm, ``l0`` in mm."""

    Gc: float = 0.19
    l0: float = 0.02
    alpha_hat: float = 10.0
    k: float = 1e-6

    def __post_init__(self):
        if self.Gc <= 0 or self.l0 <= 0 or self.k <= 0:
            raise ContractViolation("Gc, l0 and k must be positive")
        if self.alpha_hat < 0:
            raise ContractViolation("alpha_hat must be non-negative")


def degradation(phi, k=1e-6):
    """Return ``(g, g', g'')`` for ``g = (1 - phi)^2 + k``; phi is clamped to [0, 1]."""
    phi = np.clip(phi, 0.0, 1.0)
    g = (1.0 - phi) ** 2 + k
    dg = -2.0 * (1.0 - phi)
    d2g = 2.0 * np.ones_like(phi, dtype=float)
    return g, dg, d2g


def aniso_tensor(A, alpha_hat):
    """Crack-resistance tensor ``I + alpha_hat * A``."""
    if alpha_hat < 0:
        raise ContractViolation("alpha_hat must be non-negative")
    A = np.asarray(A, dtype=float)
    return np.eye(A.shape[-1]) + alpha_hat * A


def update_history(H, Y):
    return np.maximum(H, Y)


def homogeneous_phi(H, fp: FractureParams):
    """Phase field of a spatially uniform state driven by history ``H``.

    Balancing ``Gc/l0 * phi = 2 (1 - phi) H`` gives ``2H / (Gc/l0 + 2H)``.
    Used only as a verification oracle.
    """
    H = np.asarray(H, dtype=float)
    if np.any(H < 0):
        raise ContractViolation("history must be non-negative")
    with np.errstate(invalid="ignore"):
        out = 2.0 * H / (fp.Gc / fp.l0 + 2.0 * H)
    return np.where(np.isinf(H), 1.0, out)
