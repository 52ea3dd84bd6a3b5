"""Twelve-parameter affine model and volume warping.

Conventions
-----------
``M = T @ Rz @ Ry @ Rx @ K @ S`` acting on homogeneous normalized coordinates,
where ``K`` is unit upper-triangular with ``(kxy, kxz, kyz)`` above the
diagonal and ``S = diag(sx, sy, sz)``. Rotations are right-handed, in
radians, about the grid centre (the origin of normalized space).

``M`` maps *fixed* coordinates into *moving* coordinates (pull-back), so the
warped image is ``moving(M @ c)`` sampled on the fixed grid.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import InvalidArgumentError, SingularMatrixError
from .volume import Volume, nearest, trilinear

PARAM_NAMES = ("tx", "ty", "tz", "rx", "ry", "rz", "sx", "sy", "sz", "kxy", "kxz", "kyz")


@dataclass(frozen=True)
class AffineParams:
    t: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    r: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    s: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    k: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("t", "r", "s", "k"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3:
                raise InvalidArgumentError(f"{name} must have three components")
            object.__setattr__(self, name, value)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_vector(cls, v):
        v = [float(x) for x in v]
        if len(v) != 12:
            raise InvalidArgumentError(f"expected 12 affine parameters, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), tuple(v[9:12]))

    def as_vector(self):
        return np.array(self.t + self.r + self.s + self.k, dtype=float)

    def validate(self):
        if any(sc == 0.0 for sc in self.s):
            raise InvalidArgumentError(f"scale factors must be nonzero, got {self.s}")
        return self


def _rotations(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dRy = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    dRz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return (Rx, Ry, Rz), (dRx, dRy, dRz)


def _shear(k):
    kxy, kxz, kyz = k
    return np.array([[1.0, kxy, kxz], [0.0, 1.0, kyz], [0.0, 0.0, 1.0]])


def build_matrix(p):
    """Homogeneous 4x4 matrix of ``p`` (see module docstring for the order)."""
    p.validate()
    (Rx, Ry, Rz), _ = _rotations(*p.r)
    m = np.eye(4)
    m[:3, :3] = Rz @ Ry @ Rx @ _shear(p.k) @ np.diag(p.s)
    m[:3, 3] = p.t
    return m


def matrix_derivatives(p):
    """Derivatives of ``build_matrix(p)`` with respect to the 12 parameters.

    Returns an array of shape (12, 4, 4) ordered as :data:`PARAM_NAMES`.
    """
    p.validate()
    (Rx, Ry, Rz), (dRx, dRy, dRz) = _rotations(*p.r)
    K = _shear(p.k)
    S = np.diag(p.s)
    R = Rz @ Ry @ Rx
    d = np.zeros((12, 4, 4))
    for a in range(3):
        d[a, a, 3] = 1.0
    d[3, :3, :3] = Rz @ Ry @ dRx @ K @ S
    d[4, :3, :3] = Rz @ dRy @ Rx @ K @ S
    d[5, :3, :3] = dRz @ Ry @ Rx @ K @ S
    RK = R @ K
    for a in range(3):
        d[6 + a, :3, a] = RK[:, a]
    for j, (row, col) in enumerate(((0, 1), (0, 2), (1, 2))):
        dK = np.zeros((3, 3))
        dK[row, col] = 1.0
        d[9 + j, :3, :3] = R @ dK @ S
    return d


def compose(a, b):
    out = np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)
    out[3] = (0.0, 0.0, 0.0, 1.0)
    return out


def invert(m):
    m = np.asarray(m, dtype=float)
    lin = m[:3, :3]
    # relative singularity test; the scale of lin is arbitrary
    if np.linalg.cond(lin) > 1e14:
        raise SingularMatrixError("affine matrix is singular")
    inv_lin = np.linalg.inv(lin)
    out = np.eye(4)
    out[:3, :3] = inv_lin
    out[:3, 3] = -inv_lin @ m[:3, 3]
    return out


def params_from_matrix(m):
    """Parameters reproducing the 4x4 matrix ``m`` (inverse of :func:`build_matrix`).

    The linear block is split as ``Q @ U`` (QR with a positive diagonal);
    ``U`` gives scales and shears, ``Q`` the rotation angles. Requires a
    positive determinant, i.e. no reflection.
    """
    m = np.asarray(m, dtype=float)
    lin = m[:3, :3]
    det = np.linalg.det(lin)
    if not det > 0 or np.linalg.cond(lin) > 1e14:
        raise SingularMatrixError("matrix is singular or contains a reflection")
    q, u = np.linalg.qr(lin)
    signs = np.sign(np.diag(u))
    q, u = q * signs, signs[:, None] * u
    s = np.diag(u).copy()
    shear = u / s
    ry = -math.asin(max(-1.0, min(1.0, q[2, 0])))
    rx = math.atan2(q[2, 1], q[2, 2])
    rz = math.atan2(q[1, 0], q[0, 0])
    return AffineParams(tuple(m[:3, 3]), (rx, ry, rz), tuple(s), (shear[0, 1], shear[0, 2], shear[1, 2]))


def fixed_to_moving_voxels(matrix, fixed, moving):
    """Moving-grid voxel coordinates (N, 3) of every fixed voxel centre.

    N follows the C-order ravel of the fixed grid.
    """
    c = fixed.grid_coords().reshape(-1, 3)
    cm = c @ matrix[:3, :3].T + matrix[:3, 3]
    return moving.to_voxel(cm)


def warp_matrix(moving, fixed, matrix, interp="trilinear"):
    """Resample ``moving`` onto ``fixed``'s grid through ``matrix``."""
    u = fixed_to_moving_voxels(np.asarray(matrix, dtype=float), fixed, moving)
    if interp == "trilinear":
        values, valid = trilinear(moving.data, u)
    elif interp == "nearest":
        values, valid = nearest(moving.data, u)
    else:
        raise InvalidArgumentError(f"unknown interpolation {interp!r}")
    warped = Volume(values.reshape(fixed.dims), fixed.spacing, fixed.header)
    return warped, valid.reshape(fixed.dims)


def warp(moving, fixed, p, interp="trilinear"):
    """Warp ``moving`` onto the fixed grid with parameters ``p``.

    Returns ``(warped, validity)``; ``validity`` is a boolean array on the
    fixed grid marking samples that fell inside the moving image.
    """
    return warp_matrix(moving, fixed, build_matrix(p), interp)


def params_to_world_matrix(p, fixed, moving):
    """Millimetre-space fixed -> moving matrix.

    Millimetres are measured from each grid's centre along its voxel axes
    (orientation blocks of the source files are not applied).
    """
    m = build_matrix(p) if isinstance(p, AffineParams) else np.asarray(p, dtype=float)
    to_norm = np.diag([1.0 / fixed.half_extent] * 3 + [1.0])
    from_norm = np.diag([moving.half_extent] * 3 + [1.0])
    return from_norm @ m @ to_norm
