"""Pinhole camera model and the pose sampler used during generation."""

from dataclasses import dataclass

import numpy as np

from .geometry import Transform, look_at


class BehindCameraError(ValueError):
    """Projection requested for a point with non-positive depth."""


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Transform  # camera in world frame; x right, y down, z forward

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        return self

    def world_to_camera(self, points):
        return self.pose.inverse().apply(points)

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "pose": self.pose.as_dict()}

    @staticmethod
    def from_dict(d):
        return CameraModel(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                           cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]),
                           pose=Transform.from_dict(d["pose"]))


def project(camera, point_cam):
    """Camera-frame point to continuous pixel coordinates (u, v)."""
    p = np.asarray(point_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError(f"point depth {np.min(z)} <= 0")
    u = camera.fx * p[..., 0] / z + camera.cx
    v = camera.fy * p[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1) if p.ndim > 1 else (float(u), float(v))


def sample_camera(rng, reach, image_size=(480, 360), fx=620.0, fy=620.0,
                  distance_range=(1.2, 2.5), elevation_range=(0.15, 1.05),
                  aim_height=0.30, aim_jitter=0.12, roll_jitter=0.15):
    """Random camera at a uniform distance from the robot base.

    The camera sits on a sphere around the base (so the recorded distance
    is exactly |translation|) and aims near the robot's mid-height with
    some jitter, plus a small roll about the optical axis.
    """
    w, h = image_size
    d = rng.uniform(*distance_range)
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = rng.uniform(*elevation_range)
    eye = d * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    target = np.array([0.0, 0.0, aim_height * reach]) + rng.uniform(-1, 1, 3) * aim_jitter * reach
    roll = rng.uniform(-roll_jitter, roll_jitter)
    pose = look_at(eye, target, roll=roll)
    cam = CameraModel(fx=fx, fy=fy, cx=w / 2.0, cy=h / 2.0,
                      width=w, height=h, pose=pose)
    return cam.validate(), float(d)
