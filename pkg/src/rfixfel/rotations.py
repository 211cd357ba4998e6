"""Unit quaternions, rotation matrices and quadrature sets on SO(3).

Quaternions are stored scalar-first, ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

__all__ = [
    "RotationSet",
    "quat_to_matrix",
    "quat_multiply",
    "quat_conjugate",
    "random_quaternion",
    "shoemake",
    "rotation_angle",
]


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion.

    Accepts a single quaternion of shape (4,) or a stack of shape (..., 4)
    and returns matrices of shape (..., 3, 3). The quaternion is normalized
    first, so slightly denormalized input is tolerated.
    """
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_multiply(p, q):
    """Hamilton product; ``R(p * q) == R(p) @ R(q)``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def random_quaternion(rng, size=None):
    """Haar-uniform unit quaternion(s) by normalizing a 4-D standard normal."""
    shape = (4,) if size is None else (size, 4)
    g = rng.standard_normal(shape)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def shoemake(u):
    """Map points of the unit cube (..., 3) to uniform unit quaternions."""
    u = np.asarray(u, dtype=float)
    u1, u2, u3 = u[..., 0], u[..., 1], u[..., 2]
    r1 = np.sqrt(1.0 - u1)
    r2 = np.sqrt(u1)
    t1 = 2.0 * np.pi * u2
    t2 = 2.0 * np.pi * u3
    return np.stack([r2 * np.cos(t2), r1 * np.sin(t1), r1 * np.cos(t1), r2 * np.sin(t2)], axis=-1)


def rotation_angle(q):
    """Rotation angle in [0, pi] of unit quaternion(s)."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arccos(np.clip(np.abs(q[..., 0]), 0.0, 1.0))


@dataclass(frozen=True)
class RotationSet:
    """Weighted quadrature nodes on SO(3).

    Attributes
    ----------
    quaternions : ndarray, shape (R, 4)
        Unit quaternions.
    weights : ndarray, shape (R,)
        Nonnegative weights summing to one.
    """

    quaternions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        q = np.ascontiguousarray(self.quaternions, dtype=float).reshape(-1, 4)
        w = np.ascontiguousarray(self.weights, dtype=float).reshape(-1)
        if len(q) == 0:
            raise ValueError("rotation set is empty")
        if len(w) != len(q):
            raise ValueError("one weight per quaternion required")
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-12):
            raise ValueError("quaternions must have unit norm")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        q.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "quaternions", q)
        object.__setattr__(self, "weights", w)
        R = quat_to_matrix(q)
        R.setflags(write=False)
        object.__setattr__(self, "_matrices", R)

    def __len__(self):
        return len(self.weights)

    @property
    def matrices(self) -> np.ndarray:
        return self._matrices

    @classmethod
    def uniform(cls, quaternions) -> "RotationSet":
        q = np.asarray(quaternions, dtype=float).reshape(-1, 4)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        return cls(q, np.full(len(q), 1.0 / len(q)))

    @classmethod
    def low_discrepancy(cls, n: int = 192, seed: int = 0) -> "RotationSet":
        """Scrambled Halton points pushed through the Shoemake map, equal weights."""
        if n < 1:
            raise ValueError("need at least one rotation node")
        u = qmc.Halton(d=3, scramble=True, seed=np.random.default_rng(seed)).random(n)
        return cls.uniform(shoemake(u))

    def compose(self, q_left) -> "RotationSet":
        """Left-compose every node with a fixed rotation: s -> q_left * s."""
        return RotationSet(quat_multiply(np.asarray(q_left, float), self.quaternions), self.weights)
