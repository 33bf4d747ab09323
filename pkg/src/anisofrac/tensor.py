"""Small 3x3 tensor algebra.

Every function accepts a single tensor of shape ``(3, 3)`` or a stack of
shape ``(..., 3, 3)`` and operates pointwise over the leading axes, so the
constitutive layer can evaluate thousands of Gauss points in one call.
Results for one entry of a stack never depend on the other entries.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateDeformation

I3 = np.eye(3)

# Voigt ordering used by the tangent layer: 11, 22, 33, 12, 13, 23
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ContractViolation("non-finite tensor component")


def trace(T):
    return np.trace(T, axis1=-2, axis2=-1)


def dev(T):
    """Deviatoric part ``T - tr(T)/3 I``."""
    T = np.asarray(T, dtype=float)
    _check_finite(T)
    return T - (trace(T) / 3.0)[..., None, None] * I3


def frob(T):
    """Frobenius norm over the last two axes."""
    T = np.asarray(T, dtype=float)
    _check_finite(T)
    return np.sqrt(np.sum(T * T, axis=(-2, -1)))


def det(T):
    return np.linalg.det(T)


def inv(T):
    return np.linalg.inv(T)


def transpose(T):
    return np.swapaxes(T, -1, -2)


def sym(T):
    return 0.5 * (T + transpose(T))


# Pade(13) coefficients (Higham 2005)
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


def mat_exp(L):
    """Matrix exponential by scaling and squaring with a [13/13] Pade approximant.

    The scaling exponent is chosen per entry of the stack, so batching does
    not change any individual result.
    """
    L = np.asarray(L, dtype=float)
    _check_finite(L)
    single = L.ndim == 2
    A = L.reshape(-1, 3, 3)
    norm1 = np.max(np.sum(np.abs(A), axis=-2), axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norm1 > _THETA13, np.ceil(np.log2(norm1 / _THETA13)), 0.0)
    s = s.astype(int)
    A = A / (2.0 ** s)[:, None, None]
    b = _PADE13
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I3)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I3
    R = np.linalg.solve(V - U, V + U)
    for k in range(int(s.max(initial=0))):
        todo = s > k
        R[todo] = R[todo] @ R[todo]
    return R[0] if single else R.reshape(L.shape)


@dataclass(frozen=True)
class SymEig3:
    """Eigenpairs of a symmetric 3x3 tensor, eigenvalues sorted descending.

    ``vectors[..., :, i]`` is the unit eigenvector belonging to ``values[..., i]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self):
        V = self.vectors
        return (V * self.values[..., None, :]) @ transpose(V)


def sym_eig(A, rtol=1e-10):
    """Symmetric eigendecomposition with descending order and a fixed sign.

    Each eigenvector is flipped so that its largest-magnitude component is
    positive (first one wins on ties). Eigenvectors of a degenerate
    eigenspace are an arbitrary orthonormal basis of that space.
    """
    A = np.asarray(A, dtype=float)
    _check_finite(A)
    asym = frob(A - transpose(A))
    scale = frob(A)
    if np.any(asym > rtol * np.maximum(scale, np.finfo(float).tiny)):
        raise ContractViolation("sym_eig requires a symmetric tensor")
    w, V = np.linalg.eigh(sym(A))
    w = w[..., ::-1]
    V = V[..., :, ::-1]
    idx = np.argmax(np.abs(V), axis=-2)
    lead = np.take_along_axis(V, idx[..., None, :], axis=-2)
    V = V * np.where(lead < 0.0, -1.0, 1.0)
    return SymEig3(values=w, vectors=V)


def polar(F):
    """Right polar decomposition ``F = R U`` via the spectral root of ``F^T F``."""
    F = np.asarray(F, dtype=float)
    _check_finite(F)
    if np.any(det(F) <= 1e-12):
        raise DegenerateDeformation("polar decomposition needs det F > 0")
    C = transpose(F) @ F
    w, V = np.linalg.eigh(sym(C))
    root = np.sqrt(w)
    U = (V * root[..., None, :]) @ transpose(V)
    U_inv = (V / root[..., None, :]) @ transpose(V)
    R = F @ U_inv
    return R, U


def to_voigt(T):
    """Pack a symmetric tensor as ``(11, 22, 33, 12, 13, 23)``."""
    T = np.asarray(T, dtype=float)
    return np.stack([T[..., i, j] for i, j in VOIGT_PAIRS], axis=-1)


def from_voigt(v):
    v = np.asarray(v, dtype=float)
    T = np.empty(v.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(VOIGT_PAIRS):
        T[..., i, j] = v[..., k]
        T[..., j, i] = v[..., k]
    return T


def rotation_z(angle_rad):
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
