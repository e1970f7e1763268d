"""SE(2) pose arithmetic and the SE(3) ground-plane projection.

Poses are plain length-3 float arrays (x, y, theta) in meters/radians.
Everything here is vector-friendly: functions accept either a single pose
(shape (3,)) or a stack of poses (shape (N, 3)).
"""

import numpy as np

__all__ = [
    "wrap_angle",
    "se2_compose",
    "se2_inverse",
    "se2_between",
    "rot2",
    "se2_to_matrix",
    "se2_from_matrix",
    "project_se3",
    "is_rigid_rotation",
]


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(theta) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


def rot2(theta):
    """2x2 rotation matrix (or (N,2,2) stack) for heading theta."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def se2_compose(a, b):
    """Compose two poses: apply b in the frame of a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca, sa = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = a[..., 0] + ca * b[..., 0] - sa * b[..., 1]
    out[..., 1] = a[..., 1] + sa * b[..., 0] + ca * b[..., 1]
    out[..., 2] = wrap_angle(a[..., 2] + b[..., 2])
    return out


def se2_inverse(a):
    a = np.asarray(a, dtype=np.float64)
    ca, sa = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(a.shape)
    out[..., 0] = -(ca * a[..., 0] + sa * a[..., 1])
    out[..., 1] = -(-sa * a[..., 0] + ca * a[..., 1])
    out[..., 2] = wrap_angle(-a[..., 2])
    return out


def se2_between(a, b):
    """Relative pose taking a to b, i.e. a^-1 * b."""
    return se2_compose(se2_inverse(a), b)


def se2_to_matrix(pose):
    x, y, theta = pose
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def se2_from_matrix(m):
    return np.array([m[0, 2], m[1, 2], np.arctan2(m[1, 0], m[0, 0])])


def is_rigid_rotation(rot, tol=1e-6):
    """True when rot is orthonormal with determinant +1 (within tol)."""
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        return False
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    return err <= tol and np.linalg.det(rot) > 0.0


def project_se3(transform, tol=1e-6):
    """Project a rigid SE(3) frame-to-frame motion onto the x-y plane.

    Takes a 4x4 (or 3x4) homogeneous transform and returns the SE(2)
    delta (t_x, t_y, yaw) with yaw = atan2(R10, R00).  Raises ValueError
    if the rotation block is not orthonormal with positive determinant.
    """
    transform = np.asarray(transform, dtype=np.float64)
    if transform.shape == (3, 4):
        rot, trans = transform[:, :3], transform[:, 3]
    elif transform.shape == (4, 4):
        rot, trans = transform[:3, :3], transform[:3, 3]
    else:
        raise ValueError(f"expected 4x4 or 3x4 transform, got {transform.shape}")
    if not is_rigid_rotation(rot, tol=tol):
        raise ValueError("rotation block is not a proper rotation")
    yaw = np.arctan2(rot[1, 0], rot[0, 0])
    return np.array([trans[0], trans[1], yaw])
