"""Procedural corpus generator checks: speeds, contacts, ground respect."""

import numpy as np

from lidarmocap.skeleton import CONTACT, FRAME_TIME, fk_positions
from lidarmocap.skeleton import default_skeleton, finite_velocity
from lidarmocap.procedural import (
    generate_arm_wave,
    generate_idle,
    generate_jump,
    generate_procedural_corpus,
    generate_run,
    generate_squat,
    generate_walk,
)

SK = default_skeleton()


def mean_root_speed(clip):
    seg = np.linalg.norm(np.diff(clip.roots[:, 0:3], axis=0), axis=1)
    return seg.sum() / ((clip.n_frames - 1) * FRAME_TIME)


def test_idle_root_speed():
    clip = generate_idle(SK, duration_s=5.0, seed=1)
    step = np.linalg.norm(np.diff(clip.roots[:, 0:3], axis=0), axis=1) / FRAME_TIME
    assert step.max() < 0.05


def test_walk_speed_matches_command():
    for seed in (0, 5):
        clip = generate_walk(SK, duration_s=6.0, seed=seed, speed=1.2)
        assert abs(mean_root_speed(clip) - 1.2) / 1.2 < 0.10


def test_run_speed_and_flight():
    clip = generate_run(SK, duration_s=5.0, seed=2, speed=2.4)
    assert abs(mean_root_speed(clip) - 2.4) / 2.4 < 0.10
    c = clip.roots[:, CONTACT]
    airborne = (c.sum(axis=1) == 0).mean()
    assert airborne > 0.05          # running has flight phases


def test_walk_contacts_alternate():
    clip = generate_walk(SK, duration_s=6.0, seed=3)
    c = clip.roots[:, CONTACT]
    assert c[:, 0].mean() >= 0.30 and c[:, 1].mean() >= 0.30
    assert np.any((c[:, 0] == 1) & (c[:, 1] == 0))
    assert np.any((c[:, 1] == 1) & (c[:, 0] == 0))


def test_stance_feet_respect_ground():
    toe_l, toe_r = SK.index_of("LeftToe"), SK.index_of("RightToe")
    for gen in (generate_walk, generate_run, generate_squat, generate_jump):
        clip = gen(SK, duration_s=4.0, seed=4)
        pos = fk_positions(clip)
        c = clip.roots[:, CONTACT]
        for side, toe in ((0, toe_l), (1, toe_r)):
            stance = c[:, side] > 0.5
            heights = pos[stance, toe, 1]
            assert np.abs(heights).max() < 0.02, gen.__name__


def test_jump_apex():
    clip = generate_jump(SK, duration_s=5.0, seed=5)
    standing = clip.roots[0, 1]
    apex_frame = int(np.argmax(clip.roots[:, 1]))
    assert clip.roots[apex_frame, 1] - standing >= 0.15
    np.testing.assert_array_equal(clip.roots[apex_frame, CONTACT], [0.0, 0.0])


def test_clips_stay_in_capture_zone():
    for gen in (generate_walk, generate_run):
        clip = gen(SK, duration_s=8.0, seed=6)
        assert np.linalg.norm(clip.roots[:, [0, 2]], axis=1).max() < 2.0


def test_velocity_channels_consistent():
    clip = generate_walk(SK, duration_s=2.0, seed=7)
    redone = finite_velocity(clip)
    np.testing.assert_allclose(clip.joints, redone.joints, atol=1e-9)
    np.testing.assert_allclose(clip.roots, redone.roots, atol=1e-9)


def test_corpus_determinism_and_coverage():
    clips_a = generate_procedural_corpus(11, 6, SK)
    clips_b = generate_procedural_corpus(11, 6, SK)
    assert len(clips_a) == 6
    for a, b in zip(clips_a, clips_b):
        np.testing.assert_array_equal(a.joints, b.joints)
        np.testing.assert_array_equal(a.roots, b.roots)
    durations = [c.n_frames / 60.0 for c in clips_a]
    assert all(5.0 <= d <= 20.0 for d in durations)
    speeds = [mean_root_speed(c) for c in clips_a]
    assert max(speeds) > 1.0 and min(speeds) < 0.4   # locomotion and in-place
