"""Discrete differential operators on pixel grids.

Scalar fields are float64 arrays of shape (C, N1, N2): C channels, N1 rows,
N2 columns. Vector (dual) fields attach a 2-vector to every channel/pixel
and have shape (C, 2, N1, N2); component 0 points down the rows (the i
direction), component 1 along the columns (j).

``grad`` uses forward differences with a zero last row/column (Neumann
boundary) and ``div`` is its exact negative adjoint, so

    <grad(u), p> == -<u, div(p)>

holds to machine precision for every u and p.  The dual projection
iterations and every gradient check in this package rely on that identity.
"""

from __future__ import annotations

import numpy as np


def check_field(u: np.ndarray) -> np.ndarray:
    """Validate a scalar field: shape (C, N1, N2), finite, float64."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or min(u.shape) < 1:
        raise ValueError(f"scalar field must have shape (C, N1, N2), got {u.shape}")
    if not np.isfinite(u).all():
        raise ValueError("scalar field contains non-finite values")
    return u


def check_dual_field(p: np.ndarray, projected: bool = False) -> np.ndarray:
    """Validate a dual field: shape (C, 2, N1, N2), finite; optionally norms <= 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 4 or p.shape[1] != 2:
        raise ValueError(f"dual field must have shape (C, 2, N1, N2), got {p.shape}")
    if not np.isfinite(p).all():
        raise ValueError("dual field contains non-finite values")
    if projected and dual_norms(p).max() > 1.0 + 1e-12:
        raise ValueError("projected dual field has a 2-vector of norm > 1")
    return p


def grad(u: np.ndarray) -> np.ndarray:
    """Forward-difference gradient of a (C, N1, N2) field, zero at the far edge."""
    c, n1, n2 = u.shape
    out = np.zeros((c, 2, n1, n2), dtype=np.float64)
    out[:, 0, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    out[:, 1, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return out


def div(p: np.ndarray) -> np.ndarray:
    """Discrete divergence of a (C, 2, N1, N2) dual field, <grad u, p> = -<u, div p>."""
    c, _, n1, n2 = p.shape
    out = np.zeros((c, n1, n2), dtype=np.float64)
    p1, p2 = p[:, 0], p[:, 1]
    if n1 > 1:
        out[:, 0, :] += p1[:, 0, :]
        out[:, 1:-1, :] += p1[:, 1:-1, :] - p1[:, :-2, :]
        out[:, -1, :] -= p1[:, -2, :]
    if n2 > 1:
        out[:, :, 0] += p2[:, :, 0]
        out[:, :, 1:-1] += p2[:, :, 1:-1] - p2[:, :, :-2]
        out[:, :, -1] -= p2[:, :, -2]
    return out


def dual_norms(p: np.ndarray) -> np.ndarray:
    """Per-channel per-pixel Euclidean norm of the 2-vectors, shape (C, N1, N2)."""
    return np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2)


def project_unit_disc(p: np.ndarray) -> np.ndarray:
    """Project every 2-vector onto the unit disc: y if ||y|| <= 1 else y/||y||."""
    scale = np.maximum(dual_norms(p), 1.0)
    return p / scale[:, None, :, :]


def tv_value(u: np.ndarray) -> float:
    """Isotropic total variation: sum over channels and pixels of ||grad u||_2."""
    return float(dual_norms(grad(u)).sum())
