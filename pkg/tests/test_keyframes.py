import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from entity_slam.geometry import Pose
from entity_slam.keyframes import (
    EntitySnapshot,
    PolicyConfig,
    Reason,
    commit_registration,
    detection_in_map,
    initial_state,
    should_register,
)
from entity_slam.motion import SemanticClass

Tx = Pose.from_translation
I = Pose.identity()
CFG = PolicyConfig(delta_r=0.5, delta_e=0.1, timer_period=20.0)


def det(eid, pose, t=0.0, cls=SemanticClass.OBJECT):
    return EntitySnapshot(eid, cls, pose, 1e-4 * np.eye(6), t)


def mapped_state(eid=7, pose=Tx(2.0), now=0.0, odom=I):
    s = initial_state(odom, CFG)
    return commit_registration(s, odom, [det(eid, pose, now)], {eid: pose}, now)


def test_nothing_happens():
    d = should_register(initial_state(I, CFG), I, I, [], I, 0.0)
    assert not d.register and d.reasons == frozenset()


def test_robot_moved():
    d = should_register(initial_state(I, CFG), Tx(1.0), I, [], I, 1.0)
    assert d.reasons == {Reason.ROBOT_MOVED}


def test_new_entity():
    d = should_register(initial_state(I, CFG), I, I, [det(7, Tx(2.0))], I, 1.0)
    assert d.reasons == {Reason.NEW_ENTITY}


def test_entity_moved_threshold():
    s = mapped_state()
    assert should_register(s, I, I, [det(7, Tx(2.3))], I, 1.0).reasons == {Reason.ENTITY_MOVED}
    assert not should_register(s, I, I, [det(7, Tx(2.05))], I, 1.0).register


def test_timer_expires_only_for_detected_entities():
    s = mapped_state(now=0.0)
    assert not should_register(s, I, I, [], I, 25.0).register
    assert should_register(s, I, I, [det(7, Tx(2.0))], I, 25.0).reasons == {Reason.TIMER_EXPIRED}
    assert not should_register(s, I, I, [det(7, Tx(2.0))], I, 19.9).register


def test_all_reasons_together():
    s = commit_registration(mapped_state(), I, [det(8, Tx(0, 2.0))], {8: Tx(0, 2.0)}, 0.0)
    d = should_register(s, Tx(1.0), I, [det(7, Tx(1.5)), det(8, Tx(-1.0, 2.0)), det(9, Tx(3.0))], I, 30.0)
    assert d.reasons == {Reason.ROBOT_MOVED, Reason.NEW_ENTITY, Reason.ENTITY_MOVED, Reason.TIMER_EXPIRED}


def test_disabled_triggers():
    s = initial_state(I, PolicyConfig(entity_triggers=False))
    assert not should_register(s, I, I, [det(7, Tx(2.0))], I, 0.0).register
    s = mapped_state()
    s = commit_registration(initial_state(I, PolicyConfig(timer=False)), I, [det(7, Tx(2.0))], {7: Tx(2.0)}, 0.0)
    assert not should_register(s, I, I, [det(7, Tx(2.0))], I, 100.0).register


def test_drift_shifted_replay_does_not_trigger():
    # odometry drifted by D; the drift estimate absorbs it, so the map-frame detection is unchanged
    ext = Pose.from_translation(0, 0, 0.3)
    truth_robot = Pose.from_rotvec([0, 0, 0.4], [1.0, 0.5, 0])
    obj = Pose.from_rotvec([0, 0, 1.0], [3.0, 1.0, 0.2])
    pose_sensor = (truth_robot @ ext).inverse() @ obj
    stored = detection_in_map(I, truth_robot, ext, pose_sensor)
    s = commit_registration(initial_state(truth_robot, CFG), truth_robot, [det(7, pose_sensor)], {7: stored}, 0.0)
    D = Pose.from_rotvec([0.01, -0.02, 0.3], [0.7, -0.4, 0.05])
    odom = D @ truth_robot
    drift = D.inverse()
    d = should_register(s, odom, drift, [det(7, pose_sensor)], ext, 1.0)
    assert Reason.ENTITY_MOVED not in d.reasons
    # without the drift correction the same detection looks displaced
    d = should_register(s, odom, I, [det(7, pose_sensor)], ext, 1.0)
    assert Reason.ENTITY_MOVED in d.reasons


def test_commit_updates_state():
    s = mapped_state(now=0.0)
    assert 7 in s.mapped_ids and s.timers[7] == 20.0
    s2 = commit_registration(s, Tx(1.0), [det(8, Tx(1.0))], {8: Tx(1.0)}, 5.0)
    assert s2.timers[7] == 20.0 and s2.timers[8] == 25.0
    s3 = commit_registration(s2, Tx(1.0), [det(7, Tx(2.0))], {7: Tx(2.0)}, 12.0)
    assert s3.timers[7] == 32.0
    assert s3.last_kf_odom.isclose(Tx(1.0))
    assert set(s3.last_mapped_pose) <= s3.mapped_ids


offsets = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), offsets), max_size=6), st.lists(st.tuples(st.integers(1, 6), offsets), max_size=4), st.floats(0, 40))
def test_reasons_only_accumulate(base, extra, now):
    s = commit_registration(initial_state(I, CFG), I, [det(1, Tx(1.0)), det(2, Tx(0, 1.0))], {1: Tx(1.0), 2: Tx(0, 1.0)}, 0.0)
    D = [det(e, Tx(x)) for e, x in base]
    E = D + [det(e, Tx(x)) for e, x in extra]
    a = should_register(s, I, I, D, I, now)
    b = should_register(s, I, I, E, I, now)
    assert a.reasons <= b.reasons
    assert should_register(s, I, I, E, I, now) == b
