"""Rigid-body math on SE(3): exp/log maps, composition, Mahalanobis metrics.

Rotations are kept as 3x3 matrices throughout (the solver Jacobians are
stated in matrix form) and re-orthonormalized via polar decomposition
whenever they are rebuilt from noisy input or iterative updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle exp/log switch to second-order series to
# avoid the 0/0 in sin(theta)/theta.
SMALL_ANGLE = 1e-8


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_global = rotation @ p_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = _as_vec3(self.translation)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal (tol 1e-9)")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant != 1 (tol 1e-9)")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())


@dataclass(frozen=True)
class Twist:
    """Tangent-space element: axis-angle rotation part plus translation part."""

    rot_part: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_part: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _as_vec3(self.rot_part)
        t = _as_vec3(self.trans_part)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("twist has non-finite entries")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rot_part", r)
        object.__setattr__(self, "trans_part", t)

    @classmethod
    def from_vector(cls, v) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        """6-vector, rotation part first."""
        return np.concatenate([self.rot_part, self.trans_part])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


def skew(v) -> np.ndarray:
    x, y, z = _as_vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(r) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (Rodrigues)."""
    r = _as_vec3(r)
    theta = np.linalg.norm(r)
    S = skew(r)
    if theta < SMALL_ANGLE:
        return np.eye(3) + S + 0.5 * (S @ S)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * S
        + ((1.0 - np.cos(theta)) / theta**2) * (S @ S)
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < SMALL_ANGLE:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from
        # the symmetric part (R + I)/2 = axis axis^T at exactly pi.
        M = 0.5 * (R + np.eye(3))
        i = int(np.argmax(np.diag(M)))
        axis = np.zeros(3)
        axis[i] = np.sqrt(max(M[i, i], 0.0))
        for j in range(3):
            if j != i:
                axis[j] = M[i, j] / axis[i]
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def _so3_left_jacobian(r: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(r)
    S = skew(r)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * S + (S @ S) / 6.0
    return (
        np.eye(3)
        + ((1.0 - np.cos(theta)) / theta**2) * S
        + ((theta - np.sin(theta)) / theta**3) * (S @ S)
    )


def _so3_left_jacobian_inv(r: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(r)
    S = skew(r)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * S + (S @ S) / 12.0
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) - 0.5 * S + (1.0 / theta**2) * (1.0 - A / (2.0 * B)) * (S @ S)


def exp_map(xi: Twist) -> Pose:
    """SE(3) exponential of a twist."""
    R = so3_exp(xi.rot_part)
    t = _so3_left_jacobian(xi.rot_part) @ xi.trans_part
    return Pose(R, t)


def log_map(T: Pose) -> Twist:
    """Inverse of exp_map; rotation part has norm <= pi."""
    r = so3_log(T.rotation)
    t = _so3_left_jacobian_inv(r) @ T.translation
    return Twist(r, t)


def apply(T: Pose, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite point")
    return p @ T.rotation.T + T.translation


def compose(A: Pose, B: Pose) -> Pose:
    return Pose(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def inverse(T: Pose) -> Pose:
    Rt = T.rotation.T
    return Pose(Rt, -(Rt @ T.translation))


def relative_twist(new: Pose, old: Pose) -> Twist:
    """Error state between two poses: left rotation error, additive translation."""
    return Twist(so3_log(new.rotation @ old.rotation.T), new.translation - old.translation)


def retract(T: Pose, delta: np.ndarray) -> Pose:
    """Apply a 6-vector error state [dr, dp]: R <- Exp(dr) R, p <- p + dp.

    This is the linearization used by the pose solver; the rotation is
    re-orthonormalized to stop drift over many iterations.
    """
    delta = np.asarray(delta, dtype=float).reshape(6)
    R = so3_exp(delta[:3]) @ T.rotation
    return Pose(orthonormalize(R), T.translation + delta[3:])


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def mahalanobis_sq(x, mu, sigma_inv) -> float:
    """(x - mu)^T sigma_inv (x - mu) for an SPD inverse covariance."""
    x = _as_vec3(x)
    mu = _as_vec3(mu)
    sigma_inv = np.asarray(sigma_inv, dtype=float)
    if not (
        np.all(np.isfinite(x)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma_inv))
    ):
        raise ValueError("non-finite input to mahalanobis_sq")
    d = x - mu
    return float(d @ sigma_inv @ d)
