"""Rigid transforms and the small amount of 3D geometry the scene needs."""

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"rotation axis must be unit length, |axis|={n}")
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    c, s = np.cos(angle), np.sin(angle)
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


@dataclass
class Transform:
    """Rotation (3x3 orthonormal) plus translation (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity():
        return Transform()

    @staticmethod
    def from_axis_angle(axis, angle, translation=(0.0, 0.0, 0.0)):
        return Transform(rotation_about_axis(axis, angle), np.asarray(translation, dtype=np.float64))

    def validate(self, tol=ORTHO_TOL):
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"rotation not orthonormal (max residual {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > tol:
            raise ValueError(f"rotation determinant {det} != +1")
        return self

    def compose(self, other):
        """self applied after other: (self @ other)(p) = self(other(p))."""
        return Transform(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self):
        rt = self.rotation.T
        return Transform(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform one point [3] or a stack [...,3]."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def as_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @staticmethod
    def from_dict(d):
        return Transform(np.array(d["rotation"]), np.array(d["translation"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0), roll=0.0):
    """Camera-in-world pose looking from eye at target.

    Camera axes: x right, y down, z forward (matches the projection
    convention v = fy*y/z + cy with v growing downward in the image).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    f = target - eye
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    f = f / nf
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(f, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("look_at: view direction parallel to up vector")
    right = right / nr
    down = np.cross(f, right)
    pose = Transform(np.column_stack([right, down, f]), eye)
    if roll:
        pose = pose.compose(Transform.from_axis_angle((0.0, 0.0, 1.0), roll))
    return pose


def segment_distance(p0, p1, q0, q1):
    """Minimum distance between segments [p0,p1] and [q0,q1]."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    u = p1 - p0
    v = q1 - q0
    w = p0 - q0
    a = u @ u
    b = u @ v
    c = v @ v
    d = u @ w
    e = v @ w
    denom = a * c - b * b
    if denom > 1e-14:
        s = np.clip((b * e - c * d) / denom, 0.0, 1.0)
    else:
        s = 0.0  # near-parallel: pin one endpoint, optimize the other
    t = (b * s + e) / c if c > 1e-14 else 0.0
    t = np.clip(t, 0.0, 1.0)
    # Re-clamp s for the chosen t (exact for the clamped quadratic).
    if a > 1e-14:
        s = np.clip((b * t - d) / a, 0.0, 1.0)
    closest_p = p0 + s * u
    closest_q = q0 + t * v
    return float(np.linalg.norm(closest_p - closest_q))
