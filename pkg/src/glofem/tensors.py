"""Small helpers for symmetric 2nd-order tensors in plane-strain storage.

Tensors are stored as 4-vectors [xx, yy, zz, xy] with *tensorial* shear
(xy is the tensor component, not the engineering strain).  Contractions
must therefore weight the shear entry twice.
"""

from __future__ import annotations

import numpy as np

# contraction weights: a:b = sum_i W[i] a_i b_i for [xx, yy, zz, xy] storage
W = np.array([1.0, 1.0, 1.0, 2.0])

# deviatoric projector in 4-vector storage
DEV = np.array(
    [
        [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 0.0],
        [-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0, 0.0],
        [-1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)


def contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Double contraction a:b over the last axis (batched)."""
    ab = a * b
    return ab[..., 0] + ab[..., 1] + ab[..., 2] + 2.0 * ab[..., 3]


def trace(a: np.ndarray) -> np.ndarray:
    return a[..., 0] + a[..., 1] + a[..., 2]


def deviator(a: np.ndarray) -> np.ndarray:
    tr3 = trace(a)[..., None] / 3.0
    out = a.copy()
    out[..., :3] -= tr3
    return out


def j2(a: np.ndarray) -> np.ndarray:
    """Von Mises equivalent sqrt(3/2 dev(a):dev(a)) over the last axis."""
    d = deviator(a)
    return np.sqrt(1.5 * contract(d, d))


def enforce_traceless(a: np.ndarray) -> np.ndarray:
    """Set zz := -(xx + yy) so the float trace is exactly zero."""
    out = a.copy()
    out[..., 2] = -(out[..., 0] + out[..., 1])
    return out


def to_matrix(a: np.ndarray) -> np.ndarray:
    """4-vector -> symmetric 3x3 matrix."""
    m = np.zeros(a.shape[:-1] + (3, 3))
    m[..., 0, 0] = a[..., 0]
    m[..., 1, 1] = a[..., 1]
    m[..., 2, 2] = a[..., 2]
    m[..., 0, 1] = m[..., 1, 0] = a[..., 3]
    return m


def from_matrix(m: np.ndarray) -> np.ndarray:
    """Symmetric 3x3 matrix -> 4-vector (xz/yz components must be zero)."""
    a = np.zeros(m.shape[:-2] + (4,))
    a[..., 0] = m[..., 0, 0]
    a[..., 1] = m[..., 1, 1]
    a[..., 2] = m[..., 2, 2]
    a[..., 3] = 0.5 * (m[..., 0, 1] + m[..., 1, 0])
    return a


def matrix4_to_tensor4(t: np.ndarray) -> np.ndarray:
    """Expand a 4x4 tangent d(sig)/d(eps) in vector storage to a full
    (3,3,3,3) array with minor symmetries."""
    idx = [(0, 0), (1, 1), (2, 2), (0, 1)]
    out = np.zeros((3, 3, 3, 3))
    for a, (i, j) in enumerate(idx):
        for b, (k, l) in enumerate(idx):
            # column b differentiates wrt the tensor component (k,l); a
            # symmetric perturbation of an off-diagonal entry hits both
            # (k,l) and (l,k), so the stored column already carries the
            # total sensitivity and is split evenly here.
            v = t[a, b] if k == l else 0.5 * t[a, b]
            out[i, j, k, l] = v
            out[i, j, l, k] = v
            out[j, i, k, l] = v
            out[j, i, l, k] = v
    return out
