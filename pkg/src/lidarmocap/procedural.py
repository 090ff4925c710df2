"""Procedurally generated 60 fps motion: idle, walk, run, squat, jump and
arm-wave clips on any humanoid skeleton with the default 21-joint topology.

Legs are posed with an analytic two-bone IK against planted foot anchors, so
stance feet stay on the ground plane; everything else is layered sinusoids.
Velocities and foot contacts are derived after posing.
"""

from __future__ import annotations

import numpy as np

from .skeleton import (
    FPS,
    POS,
    ROT,
    MotionClip,
    axis_angle_to_matrix,
    finite_velocity,
    label_foot_contacts,
    matrix_to_rot6d,
)

UP = np.array([0.0, 1.0, 0.0])
IDENTITY_6D = np.array([1.0, 0, 0, 0, 1, 0])


def _unit(v):
    return v / np.linalg.norm(v)


def _frame_cols(x, y, z):
    return np.column_stack([x, y, z])


def rest_joint_rows(sk):
    """(n_j, 15) rows: rest offsets, identity rotations, zero velocities."""
    rows = np.zeros((sk.n_joints, 15))
    rows[:, POS] = sk.rest_offsets
    rows[0, POS] = 0.0
    rows[:, ROT] = IDENTITY_6D
    return rows


def _set_rot(rows, j, mat):
    rows[j, ROT] = matrix_to_rot6d(mat)


def _rx(a):
    return axis_angle_to_matrix([1, 0, 0], a)


def _ry(a):
    return axis_angle_to_matrix([0, 1, 0], a)


def _rz(a):
    return axis_angle_to_matrix([0, 0, 1], a)


def apose_joint_rows(sk, shoulder_z=(55.0, 55.0), shoulder_x=(0.0, 0.0),
                     hip_y=(0.0, 0.0), hip_z=(0.0, 0.0)):
    """A-pose joint rows: arms dropped to the sides, legs near vertical.

    Angles are degrees, (left, right). The z rotations are mirrored across
    sides so equal values give a symmetric pose.
    """
    rows = rest_joint_rows(sk)
    lz, rz_ = np.deg2rad(shoulder_z)
    lx, rx_ = np.deg2rad(shoulder_x)
    _set_rot(rows, sk.index_of("LeftArm"), _rx(lx) @ _rz(-lz))
    _set_rot(rows, sk.index_of("RightArm"), _rx(rx_) @ _rz(rz_))
    hy_l, hy_r = np.deg2rad(hip_y)
    hz_l, hz_r = np.deg2rad(hip_z)
    _set_rot(rows, sk.index_of("LeftUpLeg"), _ry(hy_l) @ _rz(hz_l))
    _set_rot(rows, sk.index_of("RightUpLeg"), _ry(-hy_r) @ _rz(-hz_r))
    return rows


def standing_root_row(sk, pos=None, yaw=0.0):
    root = np.zeros(17)
    root[POS] = (0.0, sk.initial_hip_height, 0.0) if pos is None else pos
    root[ROT] = matrix_to_rot6d(_ry(yaw))
    root[15:17] = 1.0
    return root


# ---------------------------------------------------------------------------
# two-bone leg IK
# ---------------------------------------------------------------------------

def _leg_ik(rows, sk, side, root_pos, root_rot, ankle_target, forward):
    """Write UpLeg/Leg/Foot local rotations so the ankle lands on its target.

    The knee aims along `forward`; the foot stays level facing `forward`.
    Targets beyond 99.5% of the leg length are clamped toward the hip.
    """
    up_j = sk.index_of(f"{side}UpLeg")
    kn_j = sk.index_of(f"{side}Leg")
    ft_j = sk.index_of(f"{side}Foot")
    l1 = np.linalg.norm(sk.rest_offsets[kn_j])
    l2 = np.linalg.norm(sk.rest_offsets[ft_j])

    hip = root_pos + root_rot @ sk.rest_offsets[up_j]
    delta = ankle_target - hip
    d = np.linalg.norm(delta)
    d = np.clip(d, abs(l1 - l2) + 1e-6, 0.995 * (l1 + l2))
    dhat = _unit(delta)

    w = forward - (forward @ dhat) * dhat
    if np.linalg.norm(w) < 1e-8:
        w = UP - (UP @ dhat) * dhat
    w = _unit(w)

    cos_a = np.clip((l1 * l1 + d * d - l2 * l2) / (2 * l1 * d), -1.0, 1.0)
    alpha = np.arccos(cos_a)
    thigh = np.cos(alpha) * dhat + np.sin(alpha) * w
    knee = hip + l1 * thigh
    shin = _unit(hip + d * dhat - knee)

    lateral = _unit(np.cross(w, dhat))
    r_up = _frame_cols(lateral, -thigh, np.cross(lateral, -thigh))
    r_kn = _frame_cols(lateral, -shin, np.cross(lateral, -shin))
    fwd_h = _unit(forward - (forward @ UP) * UP)
    r_ft = _frame_cols(np.cross(UP, fwd_h), UP, fwd_h)

    _set_rot(rows, up_j, root_rot.T @ r_up)
    _set_rot(rows, kn_j, r_up.T @ r_kn)
    _set_rot(rows, ft_j, r_kn.T @ r_ft)


def _arm_pose(rows, sk, side, drop_deg, swing=0.0, raise_fwd=0.0, elbow=0.2):
    """Hanging arm with sagittal swing/raise and a slight elbow bend (radians
    except drop_deg)."""
    sgn = 1.0 if side == "Left" else -1.0
    arm = sk.index_of(f"{side}Arm")
    fore = sk.index_of(f"{side}ForeArm")
    drop = np.deg2rad(drop_deg)
    _set_rot(rows, arm, _rx(swing - raise_fwd) @ _rz(-sgn * drop))
    _set_rot(rows, fore, _rz(-sgn * elbow))


# ---------------------------------------------------------------------------
# gait machinery
# ---------------------------------------------------------------------------

class _Gait:
    """Planted-anchor gait on a circular path: stance feet pinned in the
    world, swing feet interpolated between successive anchors.

    The path is a circle about the origin (radius speed/turn_rate) so clips
    of any duration stay inside the capture zone.
    """

    def __init__(self, sk, speed, heading, cycle_s, duty, lift, turn_rate,
                 phase0=0.0):
        self.sk = sk
        self.speed = speed
        self.cycle = cycle_s
        self.duty = duty
        self.lift = lift
        self.turn_rate = turn_rate
        self.heading0 = heading
        self.phase0 = phase0
        self.radius = speed / turn_rate
        self.offsets = {"Left": 0.0, "Right": 0.5}
        # ankle rest height = toe drop below the ankle
        self.ankle_h = -sk.rest_offsets[sk.index_of("LeftToe")][1]
        self.lateral = {
            "Left": sk.rest_offsets[sk.index_of("LeftUpLeg")][0],
            "Right": sk.rest_offsets[sk.index_of("RightUpLeg")][0],
        }

    def heading(self, t):
        return self.heading0 + self.turn_rate * t

    def frame_axes(self, t):
        """(forward, left) horizontal unit vectors at time t."""
        h = self.heading(t)
        fwd = np.array([np.sin(h), 0.0, np.cos(h)])
        left = np.array([np.cos(h), 0.0, -np.sin(h)])
        return fwd, left

    def body_xz(self, t):
        phi = self.heading(t) - np.pi / 2.0
        return self.radius * np.array([np.sin(phi), 0.0, np.cos(phi)])

    def _anchor(self, side, k):
        t_mid = (k - self.offsets[side] - self.phase0 + self.duty / 2.0) * self.cycle
        _, left = self.frame_axes(t_mid)
        base = self.body_xz(t_mid) + left * self.lateral[side]
        return base + UP * self.ankle_h

    def ankle(self, side, t):
        """Ankle world target and stance flag at time t."""
        u = t / self.cycle + self.offsets[side] + self.phase0
        k = np.floor(u)
        phase = u - k
        if phase < self.duty:
            return self._anchor(side, k), True
        s = (phase - self.duty) / (1.0 - self.duty)
        a0 = self._anchor(side, k)
        a1 = self._anchor(side, k + 1)
        blend = s * s * (3 - 2 * s)
        p = a0 + (a1 - a0) * blend
        return p + UP * self.lift * np.sin(np.pi * s), False

    def hip_height(self, bob_amp, t):
        """Crouched hip height that keeps the most extended stance reachable."""
        sk = self.sk
        l1 = np.linalg.norm(sk.rest_offsets[sk.index_of("LeftLeg")])
        l2 = np.linalg.norm(sk.rest_offsets[sk.index_of("LeftFoot")])
        # fore-aft stance excursion plus slack for path curvature and sway
        reach = self.speed * self.duty * self.cycle / 2.0 + 0.04
        vertical = np.sqrt(max((0.985 * (l1 + l2)) ** 2 - reach ** 2, 0.01))
        pivot_drop = sk.rest_offsets[sk.index_of("LeftUpLeg")][1]
        cap = vertical + self.ankle_h - pivot_drop
        base = min(sk.initial_hip_height - 0.02, cap)
        return base - bob_amp * (1.0 + np.cos(4 * np.pi * t / self.cycle)) / 2.0


def _assemble(sk, frames_joints, frames_roots, contacts=True):
    clip = MotionClip(sk, np.stack(frames_joints), np.stack(frames_roots))
    clip = finite_velocity(clip)
    if contacts:
        clip = label_foot_contacts(clip)
    return clip


def _locomotion(sk, duration_s, seed, speed, heading, cycle_s, duty, lift,
                bob, lean_deg, arm_amp, arm_drop, path_radius):
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * FPS))
    gait = _Gait(sk, speed, heading, cycle_s, duty, lift,
                 turn_rate=speed / path_radius, phase0=rng.uniform(0, 1))
    joints_seq, roots_seq = [], []
    sway = 0.012
    for f in range(n):
        t = f / FPS
        rows = rest_joint_rows(sk)
        fwd, left = gait.frame_axes(t)
        hip_y = gait.hip_height(bob, t)
        pos = gait.body_xz(t) + UP * hip_y + left * sway * np.sin(2 * np.pi * t / cycle_s)
        yaw_wobble = _ry(np.deg2rad(2.5) * np.sin(2 * np.pi * t / cycle_s))
        rot = _ry(gait.heading(t)) @ yaw_wobble
        _set_rot(rows, sk.index_of("Spine"), _rx(np.deg2rad(lean_deg)))
        phase = 2 * np.pi * (t / cycle_s + gait.phase0)
        _arm_pose(rows, sk, "Left", arm_drop, swing=arm_amp * np.sin(phase + np.pi))
        _arm_pose(rows, sk, "Right", arm_drop, swing=arm_amp * np.sin(phase))
        for side in ("Left", "Right"):
            target, _ = gait.ankle(side, t)
            _leg_ik(rows, sk, side, pos, rot, target, fwd)
        root = np.zeros(17)
        root[POS] = pos
        root[ROT] = matrix_to_rot6d(rot)
        joints_seq.append(rows)
        roots_seq.append(root)
    return _assemble(sk, joints_seq, roots_seq)


def generate_walk(sk, duration_s=6.0, seed=0, speed=1.2, heading=0.0):
    return _locomotion(sk, duration_s, seed, speed, heading, cycle_s=0.78,
                       duty=0.62, lift=0.05, bob=0.012, lean_deg=4.0,
                       arm_amp=0.35, arm_drop=68.0, path_radius=1.15)


def generate_run(sk, duration_s=6.0, seed=0, speed=2.4, heading=0.0):
    return _locomotion(sk, duration_s, seed, speed, heading, cycle_s=0.58,
                       duty=0.40, lift=0.09, bob=0.02, lean_deg=9.0,
                       arm_amp=0.7, arm_drop=55.0, path_radius=1.35)


def _standing_frames(sk, duration_s, pose_fn):
    """Run pose_fn(t, rows) per frame on an anchored-feet standing base."""
    n = int(round(duration_s * FPS))
    ankle_h = -sk.rest_offsets[sk.index_of("LeftToe")][1]
    anchors = {
        side: sk.rest_offsets[sk.index_of(f"{side}UpLeg")] * np.array([1.0, 0, 0])
        + UP * ankle_h for side in ("Left", "Right")
    }
    joints_seq, roots_seq = [], []
    fwd = np.array([0.0, 0.0, 1.0])
    for f in range(n):
        t = f / FPS
        rows = rest_joint_rows(sk)
        pos, rot = pose_fn(t, rows)
        for side in ("Left", "Right"):
            _leg_ik(rows, sk, side, pos, rot, anchors[side], fwd)
        root = np.zeros(17)
        root[POS] = pos
        root[ROT] = matrix_to_rot6d(rot)
        joints_seq.append(rows)
        roots_seq.append(root)
    return _assemble(sk, joints_seq, roots_seq)


def generate_idle(sk, duration_s=6.0, seed=0):
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(0, 2 * np.pi)
    h0 = sk.initial_hip_height - 0.015

    def pose(t, rows):
        _arm_pose(rows, sk, "Left", 70.0, swing=0.03 * np.sin(0.9 * t + p0))
        _arm_pose(rows, sk, "Right", 70.0, swing=0.03 * np.sin(0.9 * t + p0 + 1.0))
        _set_rot(rows, sk.index_of("Spine1"),
                 _rx(np.deg2rad(1.5) * np.sin(2 * np.pi * 0.25 * t + p0)))
        pos = np.array([0.008 * np.sin(2 * np.pi * 0.15 * t + p0), h0,
                        0.006 * np.sin(2 * np.pi * 0.11 * t)])
        pos[1] += 0.004 * np.sin(2 * np.pi * 0.25 * t)
        return pos, np.eye(3)

    return _standing_frames(sk, duration_s, pose)


def generate_squat(sk, duration_s=6.0, seed=0, depth=0.32, period_s=2.4):
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(0, 0.3)
    h0 = sk.initial_hip_height - 0.01

    def pose(t, rows):
        u = (1.0 - np.cos(2 * np.pi * (t / period_s + p0))) / 2.0
        _set_rot(rows, sk.index_of("Spine"), _rx(np.deg2rad(14.0) * u))
        _arm_pose(rows, sk, "Left", 65.0, raise_fwd=1.3 * u)
        _arm_pose(rows, sk, "Right", 65.0, raise_fwd=1.3 * u)
        return np.array([0.0, h0 - depth * u, -0.05 * u]), np.eye(3)

    return _standing_frames(sk, duration_s, pose)


def generate_arm_wave(sk, duration_s=6.0, seed=0):
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(0, 2 * np.pi)
    h0 = sk.initial_hip_height - 0.015

    def pose(t, rows):
        wave = np.deg2rad(60.0) * (1 + np.sin(2 * np.pi * 0.5 * t + p0)) / 2.0
        arm = sk.index_of("LeftArm")
        _set_rot(rows, arm, _rz(-np.deg2rad(60.0) + wave * 1.8))
        _set_rot(rows, sk.index_of("LeftForeArm"),
                 _rz(0.35 * np.sin(2 * np.pi * 1.0 * t + p0)))
        _arm_pose(rows, sk, "Right", 70.0)
        pos = np.array([0.006 * np.sin(0.8 * t), h0, 0.0])
        return pos, _ry(np.deg2rad(3.0) * np.sin(0.5 * t))

    return _standing_frames(sk, duration_s, pose)


def generate_jump(sk, duration_s=5.0, seed=0, apex=0.25):
    rng = np.random.default_rng(seed)
    jump_at = rng.uniform(1.0, 1.4)
    g = 9.81
    v0 = np.sqrt(2 * g * apex)
    t_flight = 2 * v0 / g
    crouch_s, launch_s, land_s = 0.35, 0.16, 0.3
    h0 = sk.initial_hip_height - 0.01
    l_total = (np.linalg.norm(sk.rest_offsets[sk.index_of("LeftLeg")])
               + np.linalg.norm(sk.rest_offsets[sk.index_of("LeftFoot")]))
    ankle_h = -sk.rest_offsets[sk.index_of("LeftToe")][1]
    n = int(round(duration_s * FPS))
    anchors = {
        side: sk.rest_offsets[sk.index_of(f"{side}UpLeg")] * np.array([1.0, 0, 0])
        + UP * ankle_h for side in ("Left", "Right")
    }
    t1 = jump_at + crouch_s          # crouch done
    t2 = t1 + launch_s               # takeoff
    t3 = t2 + t_flight               # touchdown
    t4 = t3 + land_s                 # absorbed
    joints_seq, roots_seq = [], []
    fwd = np.array([0.0, 0.0, 1.0])
    for f in range(n):
        t = f / FPS
        rows = rest_joint_rows(sk)
        airborne = False
        if t < jump_at:
            y = h0
        elif t < t1:
            u = (t - jump_at) / crouch_s
            y = h0 - 0.18 * (u * u * (3 - 2 * u))
        elif t < t2:
            u = (t - t1) / launch_s
            y = (h0 - 0.18) + (0.19) * u * u
        elif t < t3:
            tau = t - t2
            y = (h0 + 0.01) + v0 * tau - 0.5 * g * tau * tau
            airborne = True
        elif t < t4:
            u = (t - t3) / land_s
            y = h0 + 0.01 * (1 - u) - 0.13 * np.sin(np.pi * u)
        else:
            y = h0
        pos = np.array([0.0, y, 0.0])
        rot = np.eye(3)
        swing = -0.8 if (t1 <= t < t2) else (0.4 if airborne else 0.0)
        _arm_pose(rows, sk, "Left", 60.0, swing=swing)
        _arm_pose(rows, sk, "Right", 60.0, swing=swing)
        for side in ("Left", "Right"):
            if airborne:
                # blend from the ground anchor to a tucked follow-the-root
                # target; zero blend at takeoff and touchdown keeps feet
                # continuous (early-flight overreach is absorbed by the clamp)
                tau = (t - t2) / t_flight
                blend = np.sin(np.pi * tau)
                follow = pos + np.array([anchors[side][0], -0.8 * l_total, 0.02])
                target = anchors[side] * (1 - blend) + follow * blend
            else:
                target = anchors[side]
            _leg_ik(rows, sk, side, pos, rot, target, fwd)
        root = np.zeros(17)
        root[POS] = pos
        root[ROT] = matrix_to_rot6d(rot)
        joints_seq.append(rows)
        roots_seq.append(root)
    return _assemble(sk, joints_seq, roots_seq)


GENERATORS = {
    "walk": generate_walk,
    "idle": generate_idle,
    "run": generate_run,
    "arm_wave": generate_arm_wave,
    "squat": generate_squat,
    "jump": generate_jump,
}


def generate_procedural_corpus(rng_seed, count, base_skeleton):
    """Seeded mixed-category corpus of 60 fps clips, 5 to 8 s each."""
    rng = np.random.default_rng(rng_seed)
    names = list(GENERATORS)
    clips = []
    for i in range(count):
        name = names[i % len(names)]
        seed = int(rng.integers(0, 2 ** 31))
        duration = float(rng.uniform(5.0, 8.0))
        kwargs = {}
        if name in ("walk", "run"):
            kwargs["heading"] = float(rng.uniform(0, 2 * np.pi))
            base_speed = 1.2 if name == "walk" else 2.4
            kwargs["speed"] = base_speed * float(rng.uniform(0.9, 1.1))
        clip = GENERATORS[name](base_skeleton, duration_s=duration, seed=seed, **kwargs)
        clips.append(clip)
    return clips
