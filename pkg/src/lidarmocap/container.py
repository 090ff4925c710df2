"""SyncedClip: the dataset record pairing a 60 fps pose stream with its
aligned 20 fps point-cloud stream, and its versioned binary container.

File layout (all integers little-endian):

    magic b"LMSC" | u32 version | u64 manifest length | manifest JSON (utf-8)
    pose blob: n_frames x 332 float32 (root 17 channels, then 21 x 15 joint
    channels, frame-major)
    cloud records: per cloud u32 motion_frame_index, u32 n_points, then
    n_points x 3 float32
    sha256 digest (32 bytes) over everything before it

Pose and cloud arrays are float32 in memory so a write/read round trip is
bit-exact. Truncated or tampered files fail the checksum and are rejected
without returning a partial value.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContainerError, ShapeError
from .skeleton import JOINT_WIDTH, ROOT_WIDTH, MotionClip, Skeleton

MAGIC = b"LMSC"
CONTAINER_VERSION = 1
CLOUD_STRIDE = 3     # 60 fps poses per 20 fps cloud


@dataclass
class SyncedClip:
    """Synchronized 60 fps motion and 20 fps clouds, float32 storage."""

    skeleton: Skeleton
    joints: np.ndarray               # (F, n_j, 15) float32
    roots: np.ndarray                # (F, 17) float32
    clouds: list                     # [(motion_frame_index, (n, 3) float32)]
    provenance: dict = field(default_factory=dict)
    start_timestamp: int = 0

    def __post_init__(self):
        self.joints = np.ascontiguousarray(self.joints, dtype=np.float32)
        self.roots = np.ascontiguousarray(self.roots, dtype=np.float32)
        f = self.joints.shape[0]
        n = self.skeleton.n_joints
        if self.joints.shape != (f, n, JOINT_WIDTH) or self.roots.shape != (f, ROOT_WIDTH):
            raise ShapeError("pose array shapes do not match the skeleton")
        expected = -(-f // CLOUD_STRIDE)         # ceil(F / 3)
        if len(self.clouds) != expected:
            raise ShapeError(f"cloud count {len(self.clouds)} != ceil({f}/3) = {expected}")
        fixed = []
        for k, (idx, pts) in enumerate(self.clouds):
            if idx != k * CLOUD_STRIDE or not 0 <= idx < f:
                raise ShapeError(f"cloud {k} has motion_frame_index {idx}")
            fixed.append((int(idx), np.ascontiguousarray(pts, dtype=np.float32).reshape(-1, 3)))
        self.clouds = fixed

    @property
    def n_frames(self):
        return self.joints.shape[0]

    @property
    def n_clouds(self):
        return len(self.clouds)

    def to_motion_clip(self):
        return MotionClip(self.skeleton, self.joints.astype(np.float64),
                          self.roots.astype(np.float64), self.start_timestamp)

    @staticmethod
    def from_motion_clip(clip, clouds, provenance=None):
        return SyncedClip(
            skeleton=clip.skeleton,
            joints=clip.joints.astype(np.float32),
            roots=clip.roots.astype(np.float32),
            clouds=clouds,
            provenance=dict(provenance or {}),
            start_timestamp=clip.start_timestamp,
        )

    def cloud_at(self, motion_frame_index):
        """Points captured at a 60 fps frame index (must be a stride multiple)."""
        k, r = divmod(motion_frame_index, CLOUD_STRIDE)
        if r != 0 or not 0 <= k < len(self.clouds):
            raise ShapeError(f"no cloud at frame {motion_frame_index}")
        return self.clouds[k][1]


_CHANNEL_LAYOUT = {
    "frame": "root[17] then joints[n_j][15], float32 LE",
    "root": "pos[3] rot6d[6] vel[3] angvel[3] contact[2]",
    "joint": "pos[3] rot6d[6] vel[3] angvel[3]",
}


def write_synced_clip(path, clip):
    manifest = {
        "fps": [60, 20],
        "n_frames": clip.n_frames,
        "n_clouds": clip.n_clouds,
        "n_joints": clip.skeleton.n_joints,
        "start_timestamp": clip.start_timestamp,
        "channel_layout": _CHANNEL_LAYOUT,
        "skeleton": json.loads(clip.skeleton.to_json()),
        "provenance": clip.provenance,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", CONTAINER_VERSION),
             struct.pack("<Q", len(mbytes)), mbytes]
    pose = np.concatenate(
        [clip.roots.reshape(clip.n_frames, -1), clip.joints.reshape(clip.n_frames, -1)],
        axis=1).astype("<f4")
    parts.append(pose.tobytes())
    for idx, pts in clip.clouds:
        parts.append(struct.pack("<II", idx, pts.shape[0]))
        parts.append(pts.astype("<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def read_synced_clip(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 48 or raw[:4] != MAGIC:
        raise ContainerError("not a SyncedClip container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError("checksum failure (truncated or corrupt file)")
    version, = struct.unpack_from("<I", body, 4)
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    mlen, = struct.unpack_from("<Q", body, 8)
    off = 16
    manifest = json.loads(body[off:off + mlen].decode("utf-8"))
    off += mlen
    skeleton = Skeleton.from_json(json.dumps(manifest["skeleton"]))
    f = manifest["n_frames"]
    n_j = manifest["n_joints"]
    width = ROOT_WIDTH + n_j * JOINT_WIDTH
    pose = np.frombuffer(body, dtype="<f4", count=f * width, offset=off).reshape(f, width)
    off += f * width * 4
    roots = pose[:, :ROOT_WIDTH].copy()
    joints = pose[:, ROOT_WIDTH:].reshape(f, n_j, JOINT_WIDTH).copy()
    clouds = []
    for _ in range(manifest["n_clouds"]):
        idx, n = struct.unpack_from("<II", body, off)
        off += 8
        pts = np.frombuffer(body, dtype="<f4", count=n * 3, offset=off).reshape(n, 3).copy()
        off += n * 12
        clouds.append((idx, pts))
    if off != len(body):
        raise ContainerError("trailing bytes after cloud records")
    return SyncedClip(skeleton=skeleton, joints=joints, roots=roots, clouds=clouds,
                      provenance=manifest.get("provenance", {}),
                      start_timestamp=manifest.get("start_timestamp", 0))
