"""Skeleton hierarchy, rotation representations, forward kinematics and pose algebra.

Conventions: y is up, units are meters, the ground plane is y=0, and motion
runs at 60 fps. A rotation is encoded as a 6-vector holding the first two
columns of its matrix; decoding is Gram-Schmidt with the first column
prioritized.

Per-frame state is stored as flat channel rows:

  joint row (one per joint, width 15):
      [0:3]  local position        [3:9]   local rotation (6d)
      [9:12] local velocity        [12:15] local angular velocity
  root row (width 17):
      [0:3]  global position       [3:9]   global rotation (6d)
      [9:12] global velocity       [12:15] global angular velocity
      [15:17] foot contact (left, right)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateRotationError,
    InsufficientFramesError,
    InvalidRotationError,
    ShapeError,
    SkeletonSchemaError,
)

FPS = 60
FRAME_TIME = 1.0 / FPS

JOINT_WIDTH = 15
ROOT_WIDTH = 17

# channel slices shared by joint and root rows
POS = slice(0, 3)
ROT = slice(3, 9)
VEL = slice(9, 12)
ANGVEL = slice(12, 15)
CONTACT = slice(15, 17)

SKELETON_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# rotation representations
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r6):
    """Decode 6d rotation(s) to 3x3 matrices via Gram-Schmidt.

    The 6 entries are the first two columns of the matrix; the third column
    is their cross product. Works on any leading batch shape (..., 6).
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ShapeError(f"expected trailing dimension 6, got {r6.shape}")
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < 1e-12):
        raise DegenerateRotationError("first column is (near) zero")
    x = a / na
    b_perp = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb < 1e-12):
        raise DegenerateRotationError("columns are (near) parallel")
    y = b_perp / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)  # columns x, y, z


def matrix_to_rot6d(mat):
    """Encode rotation matrices as 6-vectors (first two columns).

    Raises InvalidRotationError if the input is not orthonormal within 1e-5.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape[-2:] != (3, 3):
        raise ShapeError(f"expected trailing shape (3, 3), got {mat.shape}")
    eye = np.eye(3)
    err = np.abs(np.swapaxes(mat, -1, -2) @ mat - eye).max()
    if err > 1e-5 or np.any(np.linalg.det(mat) < 0):
        raise InvalidRotationError(f"matrix not orthonormal (err={err:.2e})")
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


def axis_angle_to_matrix(axis, angle):
    """Rodrigues formula for a single axis (3,) and scalar angle."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def matrix_log_map(mat):
    """Axis-angle vector(s) of rotation matrices, batched over (..., 3, 3)."""
    mat = np.asarray(mat, dtype=np.float64)
    tr = np.clip((np.trace(mat, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(tr)
    w = np.stack([
        mat[..., 2, 1] - mat[..., 1, 2],
        mat[..., 0, 2] - mat[..., 2, 0],
        mat[..., 1, 0] - mat[..., 0, 1],
    ], axis=-1)
    sin = np.sin(angle)
    small = angle < 1e-7
    # near pi the w-vector vanishes; recover the axis from the symmetric part
    near_pi = angle > np.pi - 1e-4
    scale = np.where(small, 0.5, angle / np.where(sin < 1e-12, 1.0, 2.0 * sin))
    out = w * scale[..., None]
    if np.any(near_pi):
        idx = np.argwhere(near_pi)
        for ix in idx:
            m = mat[tuple(ix)]
            a = np.sqrt(np.maximum(np.diag(m) + 1.0, 0.0) / 2.0)
            a = a / max(np.linalg.norm(a), 1e-12)
            # fix signs from off-diagonals
            if m[0, 1] + m[1, 0] < 0:
                a[1] = -a[1]
            if m[0, 2] + m[2, 0] < 0:
                a[2] = -a[2]
            out[tuple(ix)] = a * angle[tuple(ix)]
    return out


def geodesic_angle(r_a, r_b):
    """Angle in radians between rotation matrices, batched."""
    rel = np.swapaxes(r_a, -1, -2) @ r_b
    tr = np.clip((np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(tr)


# ---------------------------------------------------------------------------
# skeleton
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Skeleton:
    """Joint hierarchy with rest offsets.

    parent_index[0] must be -1 (hips root) and parents precede children.
    mirror_map is the involutive left/right joint permutation.
    """

    joint_names: tuple
    parent_index: tuple
    rest_offsets: np.ndarray          # (n_j, 3) meters, parent frame
    initial_hip_height: float
    mirror_map: tuple

    def __post_init__(self):
        n = len(self.joint_names)
        if len(self.parent_index) != n or len(self.mirror_map) != n:
            raise SkeletonSchemaError("field lengths disagree")
        if self.parent_index[0] != -1:
            raise SkeletonSchemaError("joint 0 must be the root")
        for j in range(1, n):
            p = self.parent_index[j]
            if not 0 <= p < j:
                raise SkeletonSchemaError(f"parent of joint {j} must precede it")
        for j, m in enumerate(self.mirror_map):
            if self.mirror_map[m] != j:
                raise SkeletonSchemaError("mirror_map is not an involution")
        offs = np.asarray(self.rest_offsets, dtype=np.float64)
        if offs.shape != (n, 3):
            raise SkeletonSchemaError(f"rest_offsets shape {offs.shape} != ({n}, 3)")
        norms = np.linalg.norm(offs[1:], axis=1)
        if np.any(norms <= 0):
            raise SkeletonSchemaError("non-root rest offsets must be nonzero")
        object.__setattr__(self, "rest_offsets", offs)

    @property
    def n_joints(self):
        return len(self.joint_names)

    def index_of(self, name):
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise SkeletonSchemaError(f"no joint named {name!r}") from None

    def foot_indices(self):
        """(left, right) foot joint indices, by name."""
        return self.index_of("LeftFoot"), self.index_of("RightFoot")

    def children(self, j):
        return [c for c, p in enumerate(self.parent_index) if p == j]

    def to_json(self):
        doc = {
            "format": "lidarmocap-skeleton",
            "version": SKELETON_FORMAT_VERSION,
            "joint_names": list(self.joint_names),
            "parent_index": list(self.parent_index),
            "rest_offsets_m": self.rest_offsets.tolist(),
            "initial_hip_height_m": self.initial_hip_height,
            "mirror_map": list(self.mirror_map),
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text):
        doc = json.loads(text)
        if doc.get("format") != "lidarmocap-skeleton":
            raise SkeletonSchemaError("not a skeleton document")
        if doc.get("version") != SKELETON_FORMAT_VERSION:
            raise SkeletonSchemaError(f"unsupported skeleton version {doc.get('version')}")
        return Skeleton(
            joint_names=tuple(doc["joint_names"]),
            parent_index=tuple(doc["parent_index"]),
            rest_offsets=np.array(doc["rest_offsets_m"], dtype=np.float64),
            initial_hip_height=float(doc["initial_hip_height_m"]),
            mirror_map=tuple(doc["mirror_map"]),
        )


_DEFAULT_JOINTS = [
    # name, parent, offset
    ("Hips", -1, (0.0, 0.0, 0.0)),
    ("Spine", 0, (0.0, 0.13, 0.0)),
    ("Spine1", 1, (0.0, 0.16, 0.0)),
    ("Neck", 2, (0.0, 0.16, 0.0)),
    ("Head", 3, (0.0, 0.13, 0.0)),
    ("LeftShoulder", 2, (0.07, 0.13, 0.0)),
    ("LeftArm", 5, (0.12, 0.0, 0.0)),
    ("LeftForeArm", 6, (0.27, 0.0, 0.0)),
    ("LeftHand", 7, (0.25, 0.0, 0.0)),
    ("RightShoulder", 2, (-0.07, 0.13, 0.0)),
    ("RightArm", 9, (-0.12, 0.0, 0.0)),
    ("RightForeArm", 10, (-0.27, 0.0, 0.0)),
    ("RightHand", 11, (-0.25, 0.0, 0.0)),
    ("LeftUpLeg", 0, (0.09, -0.06, 0.0)),
    ("LeftLeg", 13, (0.0, -0.42, 0.0)),
    ("LeftFoot", 14, (0.0, -0.40, 0.0)),
    ("LeftToe", 15, (0.0, -0.07, 0.13)),
    ("RightUpLeg", 0, (-0.09, -0.06, 0.0)),
    ("RightLeg", 17, (0.0, -0.42, 0.0)),
    ("RightFoot", 18, (0.0, -0.40, 0.0)),
    ("RightToe", 19, (0.0, -0.07, 0.13)),
]


def _default_mirror_map(names):
    out = []
    for n in names:
        if n.startswith("Left"):
            out.append(names.index("Right" + n[4:]))
        elif n.startswith("Right"):
            out.append(names.index("Left" + n[5:]))
        else:
            out.append(names.index(n))
    return tuple(out)


def default_skeleton():
    """21-joint humanoid (hips + 20 descendants), about 1.65 m tall."""
    names = tuple(j[0] for j in _DEFAULT_JOINTS)
    parents = tuple(j[1] for j in _DEFAULT_JOINTS)
    offsets = np.array([j[2] for j in _DEFAULT_JOINTS], dtype=np.float64)
    # standing hip height: leg chain drop plus ankle clearance (toe drop)
    hip_height = 0.06 + 0.42 + 0.40 + 0.07
    return Skeleton(
        joint_names=names,
        parent_index=parents,
        rest_offsets=offsets,
        initial_hip_height=hip_height,
        mirror_map=_default_mirror_map(list(names)),
    )


# ---------------------------------------------------------------------------
# motion clips
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Single-frame view: joint rows (n_j, 15), root row (17,), 60 fps index."""

    joints: np.ndarray
    root: np.ndarray
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ShapeError("timestamp must be >= 0")


@dataclass
class MotionClip:
    """60 fps motion: joint channels (F, n_j, 15) and root channels (F, 17)."""

    skeleton: Skeleton
    joints: np.ndarray
    roots: np.ndarray
    start_timestamp: int = 0
    frame_time: float = FRAME_TIME

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.roots = np.asarray(self.roots, dtype=np.float64)
        f = self.joints.shape[0]
        n = self.skeleton.n_joints
        if self.joints.shape != (f, n, JOINT_WIDTH):
            raise ShapeError(f"joints shape {self.joints.shape} != ({f}, {n}, {JOINT_WIDTH})")
        if self.roots.shape != (f, ROOT_WIDTH):
            raise ShapeError(f"roots shape {self.roots.shape} != ({f}, {ROOT_WIDTH})")

    @property
    def n_frames(self):
        return self.joints.shape[0]

    @property
    def timestamps(self):
        return np.arange(self.start_timestamp, self.start_timestamp + self.n_frames)

    def pose(self, idx):
        return Pose(self.joints[idx], self.roots[idx], int(self.timestamps[idx]))

    def copy(self):
        return MotionClip(self.skeleton, self.joints.copy(), self.roots.copy(),
                          self.start_timestamp, self.frame_time)

    def slice(self, start, stop):
        return MotionClip(self.skeleton, self.joints[start:stop], self.roots[start:stop],
                          self.start_timestamp + start, self.frame_time)


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def fk(skeleton, joints, root):
    """Global joint transforms from local channels.

    joints: (n_j, 15) or (F, n_j, 15); root: (17,) or (F, 17).
    Returns (positions, rotations) with shapes (..., n_j, 3) and (..., n_j, 3, 3).
    Joint 0 takes its global transform from the root row; other joints compose
    parent transform with (local position, local rotation).
    """
    joints = np.asarray(joints, dtype=np.float64)
    roots = np.asarray(root, dtype=np.float64)
    squeeze = joints.ndim == 2
    if squeeze:
        joints = joints[None]
        roots = roots[None]
    n = skeleton.n_joints
    if joints.shape[1:] != (n, JOINT_WIDTH):
        raise ShapeError(f"joint channels {joints.shape} do not match skeleton ({n} joints)")
    if roots.shape[-1] != ROOT_WIDTH:
        raise ShapeError(f"root channels {roots.shape} have width != {ROOT_WIDTH}")

    f = joints.shape[0]
    pos = np.zeros((f, n, 3))
    rot = np.zeros((f, n, 3, 3))
    pos[:, 0] = roots[:, POS]
    rot[:, 0] = rot6d_to_matrix(roots[:, ROT])
    for j in range(1, n):
        p = skeleton.parent_index[j]
        loc_r = rot6d_to_matrix(joints[:, j, ROT])
        loc_t = joints[:, j, POS]
        pos[:, j] = pos[:, p] + np.einsum("fab,fb->fa", rot[:, p], loc_t)
        rot[:, j] = rot[:, p] @ loc_r
    if squeeze:
        return pos[0], rot[0]
    return pos, rot


def fk_positions(clip):
    """Global joint positions for every frame of a clip, (F, n_j, 3)."""
    pos, _ = fk(clip.skeleton, clip.joints, clip.roots)
    return pos


# ---------------------------------------------------------------------------
# velocities and contacts
# ---------------------------------------------------------------------------

def finite_velocity(clip):
    """Fill velocity channels by backward differences, (v_i = (x_i - x_{i-1})/h).

    Angular velocity is the axis-angle of R_{i-1}^T R_i over h. Frame 0 copies
    frame 1. Returns a new clip.
    """
    if clip.n_frames < 2:
        raise InsufficientFramesError("need at least 2 frames")
    h = clip.frame_time
    out = clip.copy()

    out.joints[1:, :, VEL] = (clip.joints[1:, :, POS] - clip.joints[:-1, :, POS]) / h
    out.roots[1:, VEL] = (clip.roots[1:, POS] - clip.roots[:-1, POS]) / h

    jr = rot6d_to_matrix(clip.joints[:, :, ROT])          # (F, n_j, 3, 3)
    rel = np.swapaxes(jr[:-1], -1, -2) @ jr[1:]
    out.joints[1:, :, ANGVEL] = matrix_log_map(rel) / h

    rr = rot6d_to_matrix(clip.roots[:, ROT])
    rel_root = np.swapaxes(rr[:-1], -1, -2) @ rr[1:]
    out.roots[1:, ANGVEL] = matrix_log_map(rel_root) / h

    out.joints[0, :, VEL] = out.joints[1, :, VEL]
    out.joints[0, :, ANGVEL] = out.joints[1, :, ANGVEL]
    out.roots[0, VEL] = out.roots[1, VEL]
    out.roots[0, ANGVEL] = out.roots[1, ANGVEL]
    return out


def label_foot_contacts(clip, height_thresh=0.08, speed_thresh=0.25):
    """Write contact labels: 1 when a foot is low and slow, else 0.

    Uses the global height and finite-difference speed of the LeftFoot and
    RightFoot joints. Returns a new clip with contact channels filled.
    """
    lf, rf = clip.skeleton.foot_indices()
    pos = fk_positions(clip)                               # (F, n_j, 3)
    out = clip.copy()
    h = clip.frame_time
    for side, j in ((0, lf), (1, rf)):
        p = pos[:, j]
        speed = np.zeros(clip.n_frames)
        speed[1:] = np.linalg.norm(p[1:] - p[:-1], axis=1) / h
        if clip.n_frames > 1:
            speed[0] = speed[1]
        contact = (p[:, 1] < height_thresh) & (speed < speed_thresh)
        out.roots[:, 15 + side] = contact.astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# mirroring
# ---------------------------------------------------------------------------

_MIRROR = np.diag([-1.0, 1.0, 1.0])


# conjugating a rotation by the x-reflection (R -> M R M) negates the first
# row and first column of R; on the 6d encoding that is a pure sign pattern,
# so mirroring is bit-exact and needs no renormalization
_ROT6D_MIRROR_SIGNS = np.array([1.0, -1.0, -1.0, -1.0, 1.0, 1.0])


def mirror_clip(clip):
    """Reflect a clip across the x=0 plane, swapping left/right joints.

    Rotations are conjugated by the reflection, angular velocities map
    through -M, and contact labels swap sides. A bit-exact involution.
    """
    sk = clip.skeleton
    perm = np.array(sk.mirror_map)
    out = clip.copy()

    src_j = clip.joints[:, perm]
    out.joints[:, :, POS] = src_j[:, :, POS] @ _MIRROR.T
    out.joints[:, :, ROT] = src_j[:, :, ROT] * _ROT6D_MIRROR_SIGNS
    out.joints[:, :, VEL] = src_j[:, :, VEL] @ _MIRROR.T
    out.joints[:, :, ANGVEL] = src_j[:, :, ANGVEL] @ (-_MIRROR).T

    out.roots[:, POS] = clip.roots[:, POS] @ _MIRROR.T
    out.roots[:, ROT] = clip.roots[:, ROT] * _ROT6D_MIRROR_SIGNS
    out.roots[:, VEL] = clip.roots[:, VEL] @ _MIRROR.T
    out.roots[:, ANGVEL] = clip.roots[:, ANGVEL] @ (-_MIRROR).T
    out.roots[:, 15] = clip.roots[:, 16]
    out.roots[:, 16] = clip.roots[:, 15]
    return out


def mirror_points(points):
    """Reflect global points across the x=0 plane."""
    out = np.array(points, copy=True)
    out[..., 0] = -out[..., 0]
    return out


def rotate_clip_y(clip, angle):
    """Rotate a clip's root channels about the global y axis through the origin.

    Joint-local channels are untouched. Returns a new clip.
    """
    rot = axis_angle_to_matrix((0.0, 1.0, 0.0), angle)
    out = clip.copy()
    out.roots[:, POS] = clip.roots[:, POS] @ rot.T
    rr = rot6d_to_matrix(clip.roots[:, ROT])
    new = rot @ rr
    out.roots[:, 3:6] = new[..., :, 0]
    out.roots[:, 6:9] = new[..., :, 1]
    out.roots[:, VEL] = clip.roots[:, VEL] @ rot.T
    out.roots[:, ANGVEL] = clip.roots[:, ANGVEL] @ rot.T
    return out
