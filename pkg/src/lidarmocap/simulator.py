"""Virtual spinning LiDAR raycast against a skeleton-driven capsule body.

The sensor fires a fixed laser pattern (uniform channel elevations across the
vertical field of view, uniform azimuth steps) from a configurable pose and
reports the nearest ray-capsule intersection per ray, in global coordinates.
Motion runs at 60 fps and clouds are captured every third frame (20 fps).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .container import CLOUD_STRIDE, SyncedClip
from .errors import AugmentationError, RateError, ShapeError, ShapeRangeError
from .procedural import apose_joint_rows, standing_root_row
from .skeleton import (
    FPS,
    FRAME_TIME,
    Skeleton,
    axis_angle_to_matrix,
    fk,
    mirror_clip,
    mirror_points,
    rotate_clip_y,
)

DEG = np.pi / 180.0


@dataclass(frozen=True)
class LidarSpec:
    """Laser pattern and mounting pose of the simulated sensor.

    Default mounting: 3.5 m from the capture-zone origin, 1 m above ground,
    pitched 20 degrees downward, spinning a full 360 degrees.
    """

    channel_count: int = 128
    vertical_fov_deg: float = 105.0
    horizontal_fov_deg: float = 360.0
    horizontal_step_deg: float = 0.6
    max_range_m: float = 20.0
    rate_hz: int = 20
    position: tuple = (0.0, 1.0, 3.5)
    yaw_deg: float = 180.0
    pitch_deg: float = 20.0
    roll_deg: float = 0.0

    def __post_init__(self):
        if self.channel_count < 1:
            raise ShapeError("channel_count must be >= 1")
        if self.max_range_m <= 0:
            raise ShapeError("max_range_m must be positive")
        if FPS % self.rate_hz != 0:
            raise RateError(f"rate {self.rate_hz} Hz must divide {FPS}")

    def rotation(self):
        """Sensor-to-world rotation; sensor forward is +z before mounting."""
        return (axis_angle_to_matrix([0, 1, 0], self.yaw_deg * DEG)
                @ axis_angle_to_matrix([1, 0, 0], self.pitch_deg * DEG)
                @ axis_angle_to_matrix([0, 0, 1], self.roll_deg * DEG))

    def ray_directions(self):
        """(n_rays, 3) unit directions in world coordinates."""
        half_v = 0.5 * self.vertical_fov_deg
        elev = np.linspace(-half_v, half_v, self.channel_count) * DEG
        n_az = int(round(self.horizontal_fov_deg / self.horizontal_step_deg))
        az = (-0.5 * self.horizontal_fov_deg
              + self.horizontal_step_deg * np.arange(n_az)) * DEG
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(az), np.sin(az)
        d = np.empty((self.channel_count, n_az, 3))
        d[:, :, 0] = ce[:, None] * sa[None, :]
        d[:, :, 1] = se[:, None] * np.ones_like(ca)[None, :]
        d[:, :, 2] = ce[:, None] * ca[None, :]
        return (d.reshape(-1, 3) @ self.rotation().T)

    def to_json(self):
        return json.dumps({
            "channel_count": self.channel_count,
            "vertical_fov_deg": self.vertical_fov_deg,
            "horizontal_fov_deg": self.horizontal_fov_deg,
            "horizontal_step_deg": self.horizontal_step_deg,
            "max_range_m": self.max_range_m,
            "rate_hz": self.rate_hz,
            "position": list(self.position),
            "yaw_deg": self.yaw_deg,
            "pitch_deg": self.pitch_deg,
            "roll_deg": self.roll_deg,
        }, indent=2)

    @staticmethod
    def from_json(text):
        doc = json.loads(text)
        doc["position"] = tuple(doc.get("position", (0.0, 1.0, 3.5)))
        return LidarSpec(**doc)


# ---------------------------------------------------------------------------
# capsule body
# ---------------------------------------------------------------------------

# base capsule radius by child joint name
_BASE_RADII = {
    "Spine": 0.120, "Spine1": 0.115, "Neck": 0.090, "Head": 0.095,
    "LeftShoulder": 0.055, "LeftArm": 0.047, "LeftForeArm": 0.040, "LeftHand": 0.035,
    "RightShoulder": 0.055, "RightArm": 0.047, "RightForeArm": 0.040, "RightHand": 0.035,
    "LeftUpLeg": 0.080, "LeftLeg": 0.075, "LeftFoot": 0.058, "LeftToe": 0.040,
    "RightUpLeg": 0.080, "RightLeg": 0.075, "RightFoot": 0.058, "RightToe": 0.040,
}

# shape-component weights: lengths blend overall size with a regional
# component; radii blend overall girth with a regional one
_TORSO = ("Spine", "Spine1", "Neck")
_HEAD = ("Head",)
_ARMS = ("LeftShoulder", "LeftArm", "LeftForeArm", "LeftHand",
         "RightShoulder", "RightArm", "RightForeArm", "RightHand")
_LEGS = ("LeftUpLeg", "LeftLeg", "LeftFoot", "LeftToe",
         "RightUpLeg", "RightLeg", "RightFoot", "RightToe")

N_SHAPE = 10
LENGTH_SPAN = 0.15   # fractional bone-length change at a shape extreme
RADIUS_SPAN = 0.25   # fractional capsule-radius change at a shape extreme


@dataclass(frozen=True)
class BodyModel:
    """Capsule body: one capsule per non-root joint of a scaled skeleton."""

    skeleton: Skeleton
    capsules: tuple          # ((parent_joint, child_joint, radius_m), ...)
    shape: np.ndarray = field(default_factory=lambda: np.zeros(N_SHAPE))

    def capsule_segments(self, joints_rows, root_row_):
        """Global (a, b, radius) arrays for a posed frame."""
        pos, _ = fk(self.skeleton, joints_rows, root_row_)
        a = np.stack([pos[p] for p, _, _ in self.capsules])
        b = np.stack([pos[c] for _, c, _ in self.capsules])
        r = np.array([r for _, _, r in self.capsules])
        return a, b, r


def _length_weight(name, beta):
    """Per-bone length factor in [1 - span, 1 + span]."""
    if name in _TORSO:
        regional = beta[1]
    elif name in _HEAD:
        regional = beta[7]
    elif name in _ARMS:
        regional = beta[2]
    else:
        regional = beta[3]
    return 1.0 + LENGTH_SPAN * (0.5 * beta[0] + 0.5 * regional) / 2.0


def _radius_weight(name, beta):
    if name in _TORSO:
        regional = beta[5]
    elif name in _HEAD:
        regional = beta[7]
    else:
        regional = beta[6]
    return 1.0 + RADIUS_SPAN * (0.5 * beta[4] + 0.5 * regional) / 2.0


def body_for_skeleton(skeleton, beta):
    """Capsule set for an already-scaled skeleton (radii depend only on beta)."""
    beta = np.asarray(beta, dtype=np.float64)
    capsules = tuple(
        (skeleton.parent_index[j], j,
         _BASE_RADII[skeleton.joint_names[j]] * _radius_weight(skeleton.joint_names[j], beta))
        for j in range(1, skeleton.n_joints)
    )
    return BodyModel(skeleton=skeleton, capsules=capsules, shape=beta.copy())


def build_body(beta, base_skeleton):
    """Deterministic capsule body for shape parameters in [-2, 2]^10.

    beta = 0 reproduces the base skeleton exactly. Component 8 tilts the
    shoulder offsets and component 9 widens the hips, so offset directions
    (not just lengths) vary across the shape space.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (N_SHAPE,):
        raise ShapeRangeError(f"shape vector must have {N_SHAPE} components")
    if np.any(np.abs(beta) > 2.0 + 1e-12):
        raise ShapeRangeError("shape components must lie in [-2, 2]")

    sk = base_skeleton
    offsets = sk.rest_offsets.copy()
    for j in range(1, sk.n_joints):
        name = sk.joint_names[j]
        target_len = np.linalg.norm(offsets[j]) * _length_weight(name, beta)
        # direction-shaping components: tilt the offset, then restore the
        # shaped length so bones never exceed the +-15% envelope
        if name.endswith("Shoulder"):
            offsets[j, 0] *= 1.0 + 0.20 * beta[8] / 2.0
        elif name.endswith("UpLeg"):
            offsets[j, 0] *= 1.0 + 0.20 * beta[9] / 2.0
        elif name.endswith("Toe"):
            offsets[j, 2] *= 1.0 + 0.16 * beta[3] / 2.0
        offsets[j] = offsets[j] / np.linalg.norm(offsets[j]) * target_len

    upleg = sk.index_of("LeftUpLeg")
    leg = sk.index_of("LeftLeg")
    foot = sk.index_of("LeftFoot")
    toe = sk.index_of("LeftToe")
    hip_height = (-offsets[upleg, 1] + np.linalg.norm(offsets[leg])
                  + np.linalg.norm(offsets[foot]) - offsets[toe, 1])

    scaled = Skeleton(
        joint_names=sk.joint_names,
        parent_index=sk.parent_index,
        rest_offsets=offsets,
        initial_hip_height=float(hip_height),
        mirror_map=sk.mirror_map,
    )
    return body_for_skeleton(scaled, beta)


# ---------------------------------------------------------------------------
# raycasting
# ---------------------------------------------------------------------------

def _ray_capsule_t(origin, dirs, seg_a, seg_b, radius):
    """Nearest positive hit parameter per (ray, capsule); inf where missed.

    dirs: (R, 3) unit; seg_a/seg_b: (K, 3); radius: (K,). Returns (R, K).
    """
    axis = seg_b - seg_a                               # (K, 3)
    length = np.linalg.norm(axis, axis=1)
    ahat = axis / np.maximum(length, 1e-12)[:, None]
    m = origin[None, :] - seg_a                        # (K, 3)

    n_par = dirs @ ahat.T                              # (R, K)
    m_par = np.sum(m * ahat, axis=1)                   # (K,)
    n_perp = dirs[:, None, :] - n_par[..., None] * ahat[None, :, :]
    m_perp = m - m_par[:, None] * ahat                 # (K, 3)

    a = np.sum(n_perp * n_perp, axis=-1)               # (R, K)
    b = 2.0 * np.sum(n_perp * m_perp[None, :, :], axis=-1)
    c = np.sum(m_perp * m_perp, axis=1) - radius ** 2  # (K,)
    disc = b * b - 4.0 * a * c[None, :]
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_cyl = np.where(ok, (-b - sq) / np.maximum(2.0 * a, 1e-300), np.inf)
    s_axial = m_par[None, :] + t_cyl * n_par
    t_cyl = np.where((t_cyl > 0) & (s_axial >= 0) & (s_axial <= length[None, :]),
                     t_cyl, np.inf)

    def sphere_t(center):
        mm = origin[None, :] - center                  # (K, 3)
        bb = 2.0 * (dirs @ mm.T)                       # (R, K)
        cc = np.sum(mm * mm, axis=1) - radius ** 2
        dd = bb * bb - 4.0 * cc[None, :]
        good = dd >= 0
        sqd = np.sqrt(np.where(good, dd, 0.0))
        t = np.where(good, (-bb - sqd) / 2.0, np.inf)
        return np.where(t > 0, t, np.inf)

    return np.minimum(t_cyl, np.minimum(sphere_t(seg_a), sphere_t(seg_b)))


def raycast_frame(body, joints_rows, root_row_, spec):
    """Simulate one LiDAR sweep against a posed body; (n, 3) global points.

    Deterministic; empty when the subject is out of the field of view.
    """
    if body.skeleton.n_joints != np.asarray(joints_rows).shape[0]:
        raise ShapeError("pose does not match the body skeleton")
    seg_a, seg_b, radius = body.capsule_segments(joints_rows, root_row_)
    origin = np.asarray(spec.position, dtype=np.float64)
    dirs = spec.ray_directions()

    # bounding-sphere cull before exact intersection tests
    center = 0.5 * (seg_a.mean(axis=0) + seg_b.mean(axis=0))
    bound = max(
        np.linalg.norm(seg_a - center, axis=1).max(),
        np.linalg.norm(seg_b - center, axis=1).max(),
    ) + radius.max() + 1e-6
    oc = origin - center
    proj = -(dirs @ oc)
    closest2 = (oc @ oc) - proj ** 2
    live = (closest2 <= bound * bound) & (proj > 0)
    if not np.any(live):
        return np.zeros((0, 3))

    t = _ray_capsule_t(origin, dirs[live], seg_a, seg_b, radius).min(axis=1)
    hit = t <= spec.max_range_m
    return origin[None, :] + t[hit, None] * dirs[live][hit]


def capsule_distance(points, body, joints_rows, root_row_):
    """Signed distance from points to the capsule body surface (min over capsules)."""
    seg_a, seg_b, radius = body.capsule_segments(joints_rows, root_row_)
    pts = np.asarray(points, dtype=np.float64)
    axis = seg_b - seg_a
    len2 = np.maximum(np.sum(axis * axis, axis=1), 1e-18)
    rel = pts[:, None, :] - seg_a[None, :, :]
    s = np.clip(np.sum(rel * axis[None, :, :], axis=-1) / len2, 0.0, 1.0)
    near = seg_a[None, :, :] + s[..., None] * axis[None, :, :]
    d = np.linalg.norm(pts[:, None, :] - near, axis=-1) - radius[None, :]
    return d.min(axis=1)


# ---------------------------------------------------------------------------
# clip-level simulation and augmentation
# ---------------------------------------------------------------------------

def simulate_clip(body, clip, spec, provenance=None):
    """Raycast every third motion frame and pack a SyncedClip."""
    if abs(clip.frame_time - FRAME_TIME) > 1e-12:
        raise RateError("motion clip must run at 60 fps")
    stride = FPS // spec.rate_hz
    if stride != CLOUD_STRIDE:
        raise RateError(f"sensor rate {spec.rate_hz} Hz is not the 3x contract")
    clouds = []
    for f in range(0, clip.n_frames, stride):
        pts = raycast_frame(body, clip.joints[f], clip.roots[f], spec)
        clouds.append((f, pts.astype(np.float32)))
    meta = {"kind": "simulated", "shape": body.shape.tolist(),
            "lidar": json.loads(spec.to_json())}
    meta.update(provenance or {})
    return SyncedClip.from_motion_clip(clip, clouds, meta)


def rotate_augment(synced, body, spec, angle_deg):
    """Rotate the motion about global y and re-simulate the clouds.

    Only 90, 180 and 270 degrees are supported; the fixed sensor then sees a
    different side of the subject, which is why clouds are re-raycast rather
    than rotated.
    """
    if angle_deg not in (90, 180, 270):
        raise AugmentationError(f"unsupported rotation angle {angle_deg}")
    motion = rotate_clip_y(synced.to_motion_clip(), angle_deg * DEG)
    prov = dict(synced.provenance)
    prov["rotated_deg"] = prov.get("rotated_deg", 0) + angle_deg
    return simulate_clip(body, motion, spec, prov)


def mirror_augment(synced):
    """Mirror motion and clouds across the x=0 plane (no re-simulation)."""
    motion = mirror_clip(synced.to_motion_clip())
    clouds = [(idx, mirror_points(pts)) for idx, pts in synced.clouds]
    prov = dict(synced.provenance)
    prov["mirrored"] = not prov.get("mirrored", False)
    return SyncedClip.from_motion_clip(motion, clouds, prov)


# ---------------------------------------------------------------------------
# calibration data synthesis
# ---------------------------------------------------------------------------

APOSE_SHOULDER_Z = (45.0, 65.0)
APOSE_SHOULDER_X = (-30.0, 30.0)
APOSE_HIP_Y = (-30.0, 20.0)
APOSE_HIP_Z = (-20.0, 4.0)
LIDAR_POS_JITTER = 0.10
LIDAR_ROT_JITTER_DEG = 5.0
CALIB_NOISE_MEAN = 0.01
CALIB_NOISE_STD = 0.01


def _perturbed_spec(spec, rng):
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    pos = np.asarray(spec.position) + direction * rng.uniform(0, LIDAR_POS_JITTER)
    return replace(
        spec,
        position=tuple(pos),
        yaw_deg=spec.yaw_deg + rng.uniform(-1, 1) * LIDAR_ROT_JITTER_DEG / np.sqrt(3),
        pitch_deg=spec.pitch_deg + rng.uniform(-1, 1) * LIDAR_ROT_JITTER_DEG / np.sqrt(3),
        roll_deg=spec.roll_deg + rng.uniform(-1, 1) * LIDAR_ROT_JITTER_DEG / np.sqrt(3),
    )


def random_apose(rng, skeleton):
    """A-pose joint rows with per-joint rotations drawn from the synthesis ranges."""
    return apose_joint_rows(
        skeleton,
        shoulder_z=(rng.uniform(*APOSE_SHOULDER_Z), rng.uniform(*APOSE_SHOULDER_Z)),
        shoulder_x=(rng.uniform(*APOSE_SHOULDER_X), rng.uniform(*APOSE_SHOULDER_X)),
        hip_y=(rng.uniform(*APOSE_HIP_Y), rng.uniform(*APOSE_HIP_Y)),
        hip_z=(rng.uniform(*APOSE_HIP_Z), rng.uniform(*APOSE_HIP_Z)),
    )


def calibration_target(body):
    """Ground-truth vector: initial hip height then the 20 joint offsets."""
    return np.concatenate([[body.skeleton.initial_hip_height],
                           body.skeleton.rest_offsets[1:].reshape(-1)])


def synth_apose_sample(rng_seed, base_skeleton, spec, noise=True):
    """One A-pose capture: (raw noisy cloud, target (61,), BodyModel).

    Samples a body shape, perturbs the sensor mount, poses a randomized
    A-pose at the origin and raycasts a single frame.
    """
    rng = np.random.default_rng(rng_seed)
    beta = rng.uniform(-2.0, 2.0, size=N_SHAPE)
    body = build_body(beta, base_skeleton)
    sk = body.skeleton
    joints = random_apose(rng, sk)
    root = standing_root_row(sk)
    pts = raycast_frame(body, joints, root, _perturbed_spec(spec, rng))
    if noise:
        pts = pts + rng.normal(CALIB_NOISE_MEAN, CALIB_NOISE_STD, size=pts.shape)
    return pts, calibration_target(body), body
