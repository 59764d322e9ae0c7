"""Affine transforms in grid-millimetre coordinates.

A point's grid-millimetre position is ``spacing * index`` (the volume's world
affine is carried along for I/O but not used for resampling).  A transform
maps moving-image positions onto fixed-image positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_PARAMS = 12
PARAM_NAMES = (
    "tx", "ty", "tz",
    "rx", "ry", "rz",
    "sx", "sy", "sz",
    "shxy", "shxz", "shyz",
)
IDENTITY_PARAMS = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0], dtype=np.float64)


class SingularTransformError(ValueError):
    pass


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` for angles in radians."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class AffineTransform:
    """``x -> matrix @ x + translation``.

    ``params`` keeps the 12-scalar parameterization (translation, rotation in
    radians, scale, shear) when the transform was built from one; the
    rotation/scale/shear part acts about ``center``.
    """

    matrix: np.ndarray
    translation: np.ndarray
    params: np.ndarray | None = field(default=None, compare=False)
    center: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(np.eye(3), np.zeros(3), IDENTITY_PARAMS.copy(), np.zeros(3))

    @classmethod
    def translation_only(cls, shift) -> AffineTransform:
        p = IDENTITY_PARAMS.copy()
        p[:3] = shift
        return cls(np.eye(3), np.asarray(shift, dtype=np.float64), p, np.zeros(3))

    @classmethod
    def from_params(cls, params, center=(0.0, 0.0, 0.0)) -> AffineTransform:
        """Build ``x -> A (x - c) + c + t`` with ``A = R @ Shear @ Scale``."""
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {p.shape}")
        c = np.asarray(center, dtype=np.float64)
        R = rotation_matrix(*p[3:6])
        S = np.diag(p[6:9])
        Sh = np.array([[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]])
        A = R @ Sh @ S
        return cls(A, c + p[:3] - A @ c, p.copy(), c)

    @classmethod
    def from_homogeneous(cls, h) -> AffineTransform:
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (4, 4) or not np.array_equal(h[3], [0, 0, 0, 1]):
            raise ValueError("homogeneous transform must be 4x4 with last row (0,0,0,1)")
        return cls(h[:3, :3], h[:3, 3])

    def homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.translation
        return h

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)) and not self.translation.any())

    def inverse(self) -> AffineTransform:
        if self.is_identity:
            return AffineTransform(np.eye(3), np.zeros(3))
        det = np.linalg.det(self.matrix)
        if not np.isfinite(det) or abs(det) < 1e-12:
            raise SingularTransformError(f"affine matrix is singular (det={det:g})")
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def compose(self, other: AffineTransform) -> AffineTransform:
        """``self ∘ other``: apply ``other`` first."""
        return AffineTransform(self.matrix @ other.matrix,
                               self.matrix @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + self.translation
