from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latpush.geometry import Disc, Pose2, disc_polygon_penetration
from latpush.physics import (HandGeometry, NoiseSample, PhysicsParams, observation_index,
                             sample_noise, sample_noise_batch, sense, simulate_batch, step)

HAND = HandGeometry.default()
PARAMS = PhysicsParams()
R = PARAMS.disc_radius


def _penetration(obj, hand_pose=Pose2()):
    rel = np.array([obj.x - hand_pose.x, obj.y - hand_pose.y])
    c, s = math.cos(-hand_pose.theta), math.sin(-hand_pose.theta)
    local = (c * rel[0] - s * rel[1], s * rel[0] + c * rel[1])
    worst = 0.0
    for body in HAND.bodies:
        pen = disc_polygon_penetration(Disc(local, R), body)
        if pen is not None:
            worst = max(worst, pen[0])
    return worst


def test_hand_layout():
    lo, hi = HAND.palm.bounds
    assert lo.tolist() == pytest.approx([-0.02, -0.04]) and hi.tolist() == pytest.approx([0.0, 0.04])
    gap = HAND.finger_left.bounds[0][1] - HAND.finger_right.bounds[1][1]
    assert gap == pytest.approx(0.07)
    assert gap > 2 * R
    for sensor, finger in zip(HAND.sensors, HAND.bodies[1:]):
        s_lo, s_hi = sensor.bounds
        f_lo, f_hi = finger.bounds
        assert s_hi[0] == pytest.approx(f_hi[0])  # sensors sit at the fingertips
        assert f_lo[1] <= s_lo[1] and s_hi[1] <= f_hi[1]


def test_observation_index_packing():
    assert [observation_index(left, right) for right in (0, 1) for left in (0, 1)] == [0, 1, 2, 3]


def test_no_contact_means_no_motion():
    obj = Pose2(0.5, 0.3, 0.2)
    new, rep = step(Pose2(), (0.01, 0.0), obj, NoiseSample(0.5, 0.003), HAND, PARAMS)
    assert new is obj
    assert rep.observation == (0, 0) and not rep.palm


def test_push_with_palm_moves_disc_forward():
    # disc resting against the palm face, centred between the fingers
    obj = Pose2(R, 0.0)
    new, rep = step(Pose2(), (0.01, 0.0), obj, NoiseSample(0.5, 0.0), HAND, PARAMS)
    assert new.x == pytest.approx(R + 0.01, abs=1e-6)
    assert new.y == pytest.approx(0.0, abs=1e-9)
    assert rep.palm


def test_fingertip_contact_is_sensed():
    # disc just ahead of the left fingertip
    obj = Pose2(0.08 + R + 0.0005, 0.0375)
    assert sense(obj, Pose2(), HAND, PARAMS) == (1, 0)
    obj = Pose2(0.08 + R + 0.0005, -0.0375)
    assert sense(obj, Pose2(), HAND, PARAMS) == (0, 1)
    assert sense(Pose2(0.6, 0.0), Pose2(), HAND, PARAMS) == (0, 0)


@settings(max_examples=150, deadline=None)
@given(st.floats(-0.05, 0.25), st.floats(-0.15, 0.15), st.integers(0, 7),
       st.floats(0.2, 0.9), st.floats(-0.01, 0.01), st.floats(-math.pi, math.pi))
def test_step_never_leaves_the_disc_inside_the_hand(x, y, a, mu, offset, theta):
    steps = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))
    hand_pose = Pose2(0.3, -0.1, theta)
    obj0 = Pose2(*hand_pose.transform_point([x, y]))
    if _penetration(obj0, hand_pose) > 0:
        return  # the step assumes a non-penetrating start
    d = hand_pose.rotate_vector(np.array(steps[a]) * 0.01)
    new, _ = step(hand_pose, d, obj0, NoiseSample(mu, offset), HAND, PARAMS)
    moved = Pose2(hand_pose.x + d[0], hand_pose.y + d[1], theta)
    assert _penetration(new, moved) <= 1e-6
    # quasistatic: the disc moves no farther than the hand plus slip
    assert math.hypot(new.x - obj0.x, new.y - obj0.y) <= 0.01 * math.sqrt(2) * (1 + 0.1 / 0.2) + 1e-6


def test_batch_kernel_matches_scalar_step():
    rng = np.random.default_rng(3)
    n = 200
    centers = np.column_stack([rng.uniform(0.0, 0.2, n), rng.uniform(-0.1, 0.1, n)])
    keep = np.array([_penetration(Pose2(*c)) == 0 for c in centers])
    centers = centers[keep]
    mus, offsets = sample_noise_batch(PARAMS, rng, len(centers))
    verts, normals, nverts = HAND.packed
    out, obs, _, status = simulate_batch(centers, 0.01, 0.0, mus, offsets, R, PARAMS.slip_gain,
                                         PARAMS.substep, PARAMS.contact_eps, verts, normals, nverts, 3)
    assert not status.any()
    for c, o, ob, mu, off in zip(centers, out, obs, mus, offsets):
        new, rep = step(Pose2(), (0.01, 0.0), Pose2(*c), NoiseSample(mu, off), HAND, PARAMS)
        # the scalar step reports the disc in the world frame of the starting hand
        assert (new.x, new.y) == pytest.approx((o[0] + 0.01, o[1]), abs=1e-12)
        assert observation_index(rep.left, rep.right) == ob


def test_noise_sampling_is_reproducible_and_clamped():
    a = sample_noise(PARAMS, np.random.default_rng(1))
    b = sample_noise(PARAMS, np.random.default_rng(1))
    assert a == b
    assert NoiseSample(-1.0, 0.0).mu == pytest.approx(0.01)
    mu, _ = sample_noise_batch(PhysicsParams(mu_std=5.0), np.random.default_rng(0), 1000)
    assert mu.min() >= 0.01


def test_params_validation():
    with pytest.raises(ValueError):
        PhysicsParams(mu_mean=0.0)
    with pytest.raises(ValueError):
        PhysicsParams(substep=0.0)
    with pytest.raises(ValueError):
        PhysicsParams(disc_radius=-1.0)
