"""Parametric robot-arm catalog: kinematic chains with capsule links.

Five desk-scale arms: three 6-DoF variants at different scales sharing a
silver/blue scheme, plus two 7-DoF arms (silver/orange and a low-contrast
white/black one). Geometry is deliberately simple (capsules only) so the
renderer and the collision checks stay exactly invertible.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Transform, segment_distance

MAX_JOINTS = 7
TABLE_TOL = 1e-9
# Structural contacts (e.g. a joint sphere resting on its grandparent link)
# are discovered at build time with this clearance margin.
CONTACT_MARGIN = 0.005


class KinematicsError(ValueError):
    """Bad joint vector: wrong length or out-of-limit angle."""


class ConfigSamplingError(RuntimeError):
    """Collision-free configuration not found within the attempt budget."""


@dataclass(frozen=True)
class JointSpec:
    axis: np.ndarray              # unit rotation axis, parent frame
    origin: Transform             # parent frame -> this joint's rest frame
    limits: tuple                 # (min, max) radians


@dataclass(frozen=True)
class CapsuleSpec:
    a: np.ndarray                 # endpoints in the owning joint's frame
    b: np.ndarray
    radius: float
    color: np.ndarray             # rgb in [0,1]
    owner: int                    # joint index; -1 = base (world) frame


@dataclass
class RobotModel:
    name: str
    family: str                   # grouping key for reports (ur/kuka/panda)
    type_id: int
    joints: list
    links: list
    base_color_scheme: tuple      # (body rgb, accent rgb)
    reach: float = 0.0
    collision_pairs: list = field(default_factory=list)

    @property
    def joint_count(self):
        return len(self.joints)

    def validate(self):
        if self.joint_count not in (6, 7):
            raise ValueError(f"{self.name}: joint count {self.joint_count} not in (6, 7)")
        for i, j in enumerate(self.joints):
            if abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                raise ValueError(f"{self.name}: joint {i} axis not unit length")
            if not j.limits[0] < j.limits[1]:
                raise ValueError(f"{self.name}: joint {i} limits {j.limits} not increasing")
        return self

    def limit_midpoints(self):
        return np.array([(j.limits[0] + j.limits[1]) / 2.0 for j in self.joints])


def forward_kinematics(model, angles):
    """Per-joint world transforms for a joint-angle vector.

    Joint i's frame is the chain product origin_1*rot_1*...*origin_i*rot_i.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (model.joint_count,):
        raise KinematicsError(
            f"{model.name}: expected {model.joint_count} angles, got shape {angles.shape}")
    for i, (joint, a) in enumerate(zip(model.joints, angles)):
        lo, hi = joint.limits
        if not lo - 1e-12 <= a <= hi + 1e-12:
            raise KinematicsError(
                f"{model.name}: joint {i} angle {a:.4f} outside limits [{lo:.4f}, {hi:.4f}]")
    frames = []
    t = Transform.identity()
    for joint, a in zip(model.joints, angles):
        t = t.compose(joint.origin).compose(Transform.from_axis_angle(joint.axis, a))
        frames.append(t)
    return frames


def world_capsules(model, frames):
    """Capsules in the world frame: list of (a, b, radius, color)."""
    out = []
    for cap in model.links:
        if cap.owner < 0:
            a, b = cap.a, cap.b
        else:
            f = frames[cap.owner]
            a, b = f.apply(cap.a), f.apply(cap.b)
        out.append((a, b, cap.radius, cap.color))
    return out


def config_in_collision(model, angles):
    """True if any checked link pair intersects or any link dips below z=0."""
    frames = forward_kinematics(model, angles)
    caps = world_capsules(model, frames)
    for a, b, r, _ in caps:
        if min(a[2], b[2]) - r < -TABLE_TOL:
            return True
    for k, l in model.collision_pairs:
        ak, bk, rk, _ = caps[k]
        al, bl, rl, _ = caps[l]
        if segment_distance(ak, bk, al, bl) < rk + rl:
            return True
    return False


def sample_configuration(model, rng, max_attempts=200):
    """Rejection-sample a collision-free, in-limit configuration."""
    lo = np.array([j.limits[0] for j in model.joints])
    hi = np.array([j.limits[1] for j in model.joints])
    for _ in range(max_attempts):
        angles = rng.uniform(lo, hi)
        if not config_in_collision(model, angles):
            return angles
    raise ConfigSamplingError(
        f"{model.name}: no collision-free configuration in {max_attempts} attempts")


# -- catalog ---------------------------------------------------------------

def _rgb(r, g, b):
    return np.array([r, g, b], dtype=np.float64)


def _build_collision_pairs(model):
    """All owner-nonadjacent link pairs minus structural contacts at the
    limit-midpoint reference pose."""
    pairs = []
    frames = forward_kinematics(model, model.limit_midpoints())
    caps = world_capsules(model, frames)
    for k in range(len(caps)):
        for l in range(k + 1, len(caps)):
            if abs(model.links[k].owner - model.links[l].owner) <= 1:
                continue
            ak, bk, rk, _ = caps[k]
            al, bl, rl, _ = caps[l]
            if segment_distance(ak, bk, al, bl) < rk + rl + CONTACT_MARGIN:
                continue
            pairs.append((k, l))
    model.collision_pairs = pairs
    return model


def _chain_model(name, family, type_id, joint_table, link_table, scheme):
    """joint_table rows: (axis, translation, limits).
    link_table rows: (owner, a, b, radius, color)."""
    joints = [JointSpec(axis=np.asarray(ax, dtype=np.float64),
                        origin=Transform(np.eye(3), np.asarray(tr, dtype=np.float64)),
                        limits=(float(lo), float(hi)))
              for ax, tr, (lo, hi) in joint_table]
    links = [CapsuleSpec(a=np.asarray(a, dtype=np.float64),
                         b=np.asarray(b, dtype=np.float64),
                         radius=float(r), color=np.asarray(c, dtype=np.float64),
                         owner=int(owner))
             for owner, a, b, r, c in link_table]
    reach = float(sum(np.linalg.norm(j.origin.translation) for j in joints))
    model = RobotModel(name=name, family=family, type_id=type_id, joints=joints,
                       links=links, base_color_scheme=scheme, reach=reach)
    model.validate()
    return _build_collision_pairs(model)


def _ur_like(name, type_id, scale, rscale, body, accent, forearm=0.39):
    s, rs = scale, rscale
    z, y = (0, 0, 1), (0, 1, 0)
    pi = np.pi
    joint_table = [
        (z, (0, 0, 0.090 * s), (-pi, pi)),
        (y, (0, 0, 0.084 * s), (-2.4, -0.7)),
        (y, (0.42 * s, 0, 0), (-2.4, 2.4)),
        (y, (forearm * s, 0, 0), (-1.7, 1.7)),
        (z, (0.10 * s, 0, 0), (-pi, pi)),
        (y, (0, 0, 0.074 * s), (-1.7, 1.7)),
    ]
    rb = 0.072 * rs
    r = [0.060 * rs, 0.056 * rs, 0.046 * rs, 0.040 * rs, 0.036 * rs]
    link_table = [
        (-1, (0, 0, rb), (0, 0, max(0.090 * s, rb + 0.02)), rb, body),
        (0, (0, 0, 0), (0, 0, 0.084 * s), r[0], body),
        (1, (0, 0, 0), (0.42 * s, 0, 0), r[1], body),
        (2, (0, 0, 0), (forearm * s, 0, 0), r[2], body),
        (3, (0, 0, 0), (0.10 * s, 0, 0), r[3], body),
        (5, (0, 0, 0), (0, 0, 0.080 * s), r[4], body),
    ]
    # First sphere must clear the table: it sits at the joint-1 height.
    sphere_r = [min(1.30 * r[0], 0.85 * 0.090 * s), 1.25 * r[1], 1.25 * r[2],
                1.30 * r[3], 1.30 * r[4], 1.20 * r[4]]
    for i in range(6):
        link_table.append((i, (0, 0, 0), (0, 0, 0), sphere_r[i], accent))
    return _chain_model(name, "ur", type_id, joint_table, link_table, (body, accent))


def _kuka_like(name, type_id, scale, rscale, body, accent):
    s, rs = scale, rscale
    z, y = (0, 0, 1), (0, 1, 0)
    pi = np.pi
    joint_table = [
        (z, (0, 0, 0.16 * s), (-pi, pi)),
        (y, (0, 0, 0.09 * s), (-2.0, 2.0)),
        (z, (0, 0, 0.20 * s), (-pi, pi)),
        (y, (0, 0, 0.09 * s), (-2.0, 2.0)),
        (z, (0, 0, 0.20 * s), (-pi, pi)),
        (y, (0, 0, 0.08 * s), (-2.0, 2.0)),
        (z, (0, 0, 0.10 * s), (-pi, pi)),
    ]
    rb = 0.080 * rs
    r = [0.064 * rs, 0.060 * rs, 0.056 * rs, 0.050 * rs, 0.044 * rs, 0.040 * rs]
    link_table = [
        (-1, (0, 0, rb), (0, 0, max(0.16 * s, rb + 0.02)), rb, body),
        (0, (0, 0, 0), (0, 0, 0.09 * s), r[0], body),
        (1, (0, 0, 0), (0, 0, 0.20 * s), r[1], body),
        (2, (0, 0, 0), (0, 0, 0.09 * s), r[2], body),
        (3, (0, 0, 0), (0, 0, 0.20 * s), r[3], body),
        (4, (0, 0, 0), (0, 0, 0.08 * s), r[4], body),
        (6, (0, 0, 0), (0, 0, 0.09 * s), r[5], body),
    ]
    for i in range(7):
        link_table.append((i, (0, 0, 0), (0, 0, 0), 1.28 * r[min(i, 5)], accent))
    return _chain_model(name, "kuka", type_id, joint_table, link_table, (body, accent))


def _panda_like(name, type_id, scale, rscale, body, accent):
    s, rs = scale, rscale
    z, y = (0, 0, 1), (0, 1, 0)
    pi = np.pi
    joint_table = [
        (z, (0, 0, 0.14 * s), (-pi, pi)),
        (y, (0, 0, 0.08 * s), (-1.9, 1.9)),
        (z, (0, 0, 0.17 * s), (-pi, pi)),
        (y, (0.065 * s, 0, 0.13 * s), (-2.1, 2.1)),
        (z, (-0.055 * s, 0, 0.16 * s), (-pi, pi)),
        (y, (0, 0, 0.07 * s), (-1.9, 1.9)),
        (z, (0.055 * s, 0, 0.10 * s), (-pi, pi)),
    ]
    rb = 0.085 * rs
    r = [0.068 * rs, 0.062 * rs, 0.056 * rs, 0.050 * rs, 0.044 * rs, 0.040 * rs]
    link_table = [
        (-1, (0, 0, rb), (0, 0, max(0.14 * s, rb + 0.02)), rb, body),
        (0, (0, 0, 0), (0, 0, 0.08 * s), r[0], body),
        (1, (0, 0, 0), (0, 0, 0.17 * s), r[1], body),
        (2, (0, 0, 0), (0.065 * s, 0, 0.13 * s), r[2], body),
        (3, (0, 0, 0), (-0.055 * s, 0, 0.16 * s), r[3], body),
        (4, (0, 0, 0), (0, 0, 0.07 * s), r[4], body),
        (6, (0, 0, 0), (0, 0, 0.09 * s), r[5], body),
    ]
    for i in range(7):
        link_table.append((i, (0, 0, 0), (0, 0, 0), 1.28 * r[min(i, 5)], accent))
    return _chain_model(name, "panda", type_id, joint_table, link_table, (body, accent))


def _build_catalog():
    silver_a = _rgb(0.75, 0.75, 0.78)
    silver_b = _rgb(0.70, 0.71, 0.75)
    silver_c = _rgb(0.65, 0.67, 0.72)
    models = [
        _ur_like("ur3", 0, scale=0.70, rscale=0.95, body=silver_a,
                 accent=_rgb(0.08, 0.20, 0.88), forearm=0.36),
        _ur_like("ur5", 1, scale=1.00, rscale=1.00, body=silver_b,
                 accent=_rgb(0.16, 0.38, 0.80)),
        _ur_like("ur10", 2, scale=1.30, rscale=1.12, body=silver_c,
                 accent=_rgb(0.32, 0.56, 0.95), forearm=0.45),
        _kuka_like("kuka", 3, scale=0.95, rscale=1.05,
                   body=_rgb(0.78, 0.77, 0.76), accent=_rgb(0.95, 0.45, 0.04)),
        _panda_like("panda", 4, scale=0.90, rscale=1.05,
                    body=_rgb(0.92, 0.92, 0.91), accent=_rgb(0.10, 0.10, 0.11)),
    ]
    return {m.name: m for m in models}


CATALOG = _build_catalog()
CANONICAL_ORDER = tuple(CATALOG.keys())


def catalog_names():
    return list(CANONICAL_ORDER)


def get_model(name):
    try:
        return CATALOG[name]
    except KeyError:
        raise ValueError(
            f"unknown robot type '{name}'; catalog: {', '.join(CANONICAL_ORDER)}") from None


def joint_counts(class_names):
    return [get_model(n).joint_count for n in class_names]
