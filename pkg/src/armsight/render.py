"""Software rasterizer: per-pixel ray-capsule intersection with a z-buffer.

Rays leave the camera origin through pixel centers with direction
((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1), so the ray parameter t IS the depth z.
The robot mask is exactly the set of pixels whose nearest hit belongs to
a robot capsule; background pixels (procedural gradient, painted shapes
and far distractor capsules) are untouched by the robot pass, which keeps
a robot-free render of the same background stream bit-identical there.
"""

from dataclasses import dataclass

import numpy as np

from .camera import project
from .robots import forward_kinematics, world_capsules

AMBIENT = 0.35
DIFFUSE = 0.65
NEAR_Z = 0.10  # below this depth the bbox shortcut is unsafe; use the full frame


class DegenerateSampleError(RuntimeError):
    """Scene unusable: robot base projects outside the image."""


@dataclass(frozen=True)
class BackgroundSpec:
    rect_range: tuple = (2, 7)
    ellipse_range: tuple = (1, 5)
    distractor_range: tuple = (0, 2)
    distractor_depth_span: float = 1.5


def ray_capsule_depth(dirs, a, b, radius):
    """Depth of the nearest intersection for rays from the origin.

    dirs: [N,3] with unit z; returns [N] depths, np.inf where missed.
    Valid for an origin outside the capsule.
    """
    t_best = np.full(dirs.shape[0], np.inf)
    axis = b - a
    length = np.linalg.norm(axis)
    if length > 1e-12:
        u = axis / length
        m = -a
        d_par = dirs @ u
        m_par = m @ u
        d_perp = dirs - d_par[:, None] * u
        m_perp = m - m_par * u
        A = np.einsum("ij,ij->i", d_perp, d_perp)
        B = 2.0 * (d_perp @ m_perp)
        C = m_perp @ m_perp - radius * radius
        disc = B * B - 4.0 * A * C
        ok = (disc >= 0) & (A > 1e-14)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok, (-B - sq) / np.where(ok, 2.0 * A, 1.0), np.inf)
        # entry point must fall on the finite cylinder section
        xi = t * d_par - (a @ u)
        valid = ok & (t > 0) & (xi >= 0) & (xi <= length)
        t_best = np.where(valid, t, t_best)
    for c in (a, b):
        # spherical caps
        A = np.einsum("ij,ij->i", dirs, dirs)
        B = -2.0 * (dirs @ c)
        C = c @ c - radius * radius
        disc = B * B - 4.0 * A * C
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok, (-B - sq) / (2.0 * A), np.inf)
        t_best = np.minimum(t_best, np.where(ok & (t > 0), t, np.inf))
        if length <= 1e-12:
            break  # degenerate capsule: one sphere
    return t_best


def _pixel_dirs(camera, u0, u1, v0, v1):
    us = (np.arange(u0, u1) + 0.5 - camera.cx) / camera.fx
    vs = (np.arange(v0, v1) + 0.5 - camera.cy) / camera.fy
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def _capsule_bbox(camera, a, b, radius):
    """Conservative pixel bbox of the capsule silhouette, or None if the
    geometry gets too close to the camera plane for the shortcut."""
    u_min, u_max = np.inf, -np.inf
    v_min, v_max = np.inf, -np.inf
    for p in (a, b):
        z = p[2]
        if z - radius < NEAR_Z:
            return None
        ru = camera.fx * radius / z * 1.5 + 4.0
        rv = camera.fy * radius / z * 1.5 + 4.0
        u = camera.fx * p[0] / z + camera.cx
        v = camera.fy * p[1] / z + camera.cy
        u_min, u_max = min(u_min, u - ru), max(u_max, u + ru)
        v_min, v_max = min(v_min, v - rv), max(v_max, v + rv)
    u0 = max(int(np.floor(u_min)), 0)
    u1 = min(int(np.ceil(u_max)) + 1, camera.width)
    v0 = max(int(np.floor(v_min)), 0)
    v1 = min(int(np.ceil(v_max)) + 1, camera.height)
    if u0 >= u1 or v0 >= v1:
        return (0, 0, 0, 0)  # fully off-screen
    return (u0, u1, v0, v1)


def paint_capsules(image, depth, camera, capsules, light):
    """Z-buffered Lambert-shaded capsule pass; returns the hit mask."""
    hit_any = np.zeros(depth.shape, dtype=bool)
    for a, b, radius, color in capsules:
        box = _capsule_bbox(camera, a, b, radius)
        if box == (0, 0, 0, 0):
            continue
        if box is None:
            u0, u1, v0, v1 = 0, camera.width, 0, camera.height
        else:
            u0, u1, v0, v1 = box
        dirs = _pixel_dirs(camera, u0, u1, v0, v1).reshape(-1, 3)
        t = ray_capsule_depth(dirs, a, b, radius)
        t = t.reshape(v1 - v0, u1 - u0)
        sub_depth = depth[v0:v1, u0:u1]
        win = t < sub_depth
        if not win.any():
            continue
        pts = dirs.reshape(v1 - v0, u1 - u0, 3)[win] * t[win][:, None]
        axis = b - a
        length = np.linalg.norm(axis)
        if length > 1e-12:
            u = axis / length
            h = np.clip((pts - a) @ u, 0.0, length)
            closest = a + h[:, None] * u
        else:
            closest = a
        n = pts - closest
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        lam = AMBIENT + DIFFUSE * np.maximum(n @ light, 0.0)
        sub_depth[win] = t[win]
        image[v0:v1, u0:u1][win] = np.clip(color[None, :] * lam[:, None], 0.0, 1.0)
        hit_any[v0:v1, u0:u1][win] = True
    return hit_any


def _random_light(rng):
    v = rng.normal(size=3)
    v[2] = abs(v[2]) + 0.4  # from above-ish
    return v / np.linalg.norm(v)


def render_background(camera, rng, spec, distractor_min_depth):
    """Procedural backdrop: gradient, painted shapes, then far distractor
    capsules with their own light. Returns (image float [H,W,3], depth)."""
    w, h = camera.width, camera.height
    c0 = rng.uniform(0.08, 0.92, 3)
    c1 = rng.uniform(0.08, 0.92, 3)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    xx, yy = np.meshgrid(np.arange(w), np.arange(h))
    ramp = (np.cos(phi) * xx / w + np.sin(phi) * yy / h)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    image = c0[None, None, :] + ramp[:, :, None] * (c1 - c0)[None, None, :]

    for _ in range(int(rng.integers(spec.rect_range[0], spec.rect_range[1] + 1))):
        x0, x1 = np.sort(rng.integers(0, w, 2))
        y0, y1 = np.sort(rng.integers(0, h, 2))
        image[y0:y1 + 1, x0:x1 + 1] = rng.uniform(0.05, 0.95, 3)
    for _ in range(int(rng.integers(spec.ellipse_range[0], spec.ellipse_range[1] + 1))):
        ex, ey = rng.uniform(0, w), rng.uniform(0, h)
        rx, ry = rng.uniform(w * 0.03, w * 0.25), rng.uniform(h * 0.03, h * 0.25)
        sel = ((xx - ex) / rx) ** 2 + ((yy - ey) / ry) ** 2 <= 1.0
        image[sel] = rng.uniform(0.05, 0.95, 3)

    depth = np.full((h, w), np.inf)
    n_dis = int(rng.integers(spec.distractor_range[0], spec.distractor_range[1] + 1))
    if n_dis:
        light = _random_light(rng)
        caps = []
        for _ in range(n_dis):
            z0 = distractor_min_depth + rng.uniform(0.0, spec.distractor_depth_span)
            z1 = distractor_min_depth + rng.uniform(0.0, spec.distractor_depth_span)
            spread = 0.9
            a = np.array([rng.uniform(-spread, spread) * z0,
                          rng.uniform(-spread, spread) * z0, z0])
            b = np.array([rng.uniform(-spread, spread) * z1,
                          rng.uniform(-spread, spread) * z1, z1])
            caps.append((a, b, rng.uniform(0.05, 0.22), rng.uniform(0.1, 0.9, 3)))
        paint_capsules(image, depth, camera, caps, light)
    return image, depth


def quantize(image):
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def render(model, angles, camera, background_spec, rng):
    """Render one sample; returns (uint8 image [H,W,3], bool mask [H,W]).

    Consumes the rng in a fixed order: background stream seed first, then
    light stream seed, so a robot-free render with the same rng state
    reproduces the background bit for bit.
    """
    bg_rng = np.random.default_rng(int(rng.integers(0, 2 ** 63)))
    light_rng = np.random.default_rng(int(rng.integers(0, 2 ** 63)))

    frames = forward_kinematics(model, angles)
    to_cam = camera.pose.inverse()
    caps_cam = [(to_cam.apply(a), to_cam.apply(b), r, c)
                for a, b, r, c in world_capsules(model, frames)]

    base_cam = to_cam.apply(np.zeros(3))
    if base_cam[2] <= 0:
        raise DegenerateSampleError("robot base behind the camera")
    u, v = project(camera, base_cam)
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise DegenerateSampleError(f"robot base projects outside the image at ({u:.0f},{v:.0f})")

    cam_dist = float(np.linalg.norm(camera.pose.translation))
    image, depth = render_background(camera, bg_rng, background_spec,
                                     distractor_min_depth=cam_dist + model.reach + 0.3)
    light = _random_light(light_rng)
    mask = paint_capsules(image, depth, camera, caps_cam, light)
    return quantize(image), mask


def estimate_foreground_fraction(model, angles, camera):
    """Cheap overlap-ignoring area estimate used to pre-filter samples
    before paying for a full render."""
    frames = forward_kinematics(model, angles)
    to_cam = camera.pose.inverse()
    area = 0.0
    for a, b, r, _ in world_capsules(model, frames):
        a, b = to_cam.apply(a), to_cam.apply(b)
        z = max((a[2] + b[2]) / 2.0, 1e-6)
        r_px = camera.fx * r / z
        seg_px = camera.fx * np.linalg.norm((a - b)[:2]) / z
        area += 2.0 * r_px * seg_px + np.pi * r_px * r_px
    return area / (camera.width * camera.height)
