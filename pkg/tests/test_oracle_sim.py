import numpy as np
import pytest

from conftest import TOOL_MASS
from oracle_sim import (GRAVITY, OracleConfig, contact_wrench, free_rotation, generate_episode, jittered_start,
                        shape_names, step, step_with_contact, wrench_spline)
from state import Action, InvalidInputError, Pose, State, Twist, quaternion_angle, quaternion_to_matrix


def test_at_rest_stays_at_rest(free_scene):
    cfg = OracleConfig()
    state = State.at_rest(Pose.identity())
    next_state, observation = step(state, Action.zero(), free_scene, cfg)
    assert next_state.pose.allclose(state.pose, atol=1e-15)
    np.testing.assert_allclose(observation.as_array(), np.zeros(6))


def test_constant_force_free_flight(free_scene):
    cfg = OracleConfig()
    force = np.array([1.0, 0.0, 0.0])
    next_state, _ = step(State.at_rest(Pose.identity()), Action(force, np.zeros(3)), free_scene, cfg)
    acceleration = force[0] / TOOL_MASS
    n, h = cfg.substeps, cfg.substep
    assert next_state.twist.linear[0] == pytest.approx(acceleration * cfg.dt, rel=1e-9)
    # semi-implicit Euler: x = a h^2 n (n + 1) / 2
    assert next_state.pose.position[0] == pytest.approx(acceleration * h ** 2 * n * (n + 1) / 2, rel=1e-9)
    assert quaternion_angle(next_state.pose.orientation) == pytest.approx(0.0, abs=1e-12)


def test_resting_contact_reads_weight(floor_scene):
    cfg = OracleConfig(gravity=True)
    weight = TOOL_MASS * GRAVITY
    # tool bottom sunk exactly as far as the spring needs to carry the weight
    pose = Pose(np.array([0.0, 0.0, 0.02 - weight / cfg.stiffness]), np.array([1.0, 0.0, 0.0, 0.0]))
    next_state, observation, touched = step_with_contact(State.at_rest(pose), Action.zero(), floor_scene, cfg)
    assert touched
    np.testing.assert_allclose(observation.force, [0.0, 0.0, weight], rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(observation.torque, np.zeros(3), atol=1e-9)
    np.testing.assert_allclose(next_state.pose.position, pose.position, atol=1e-12)


def test_tool_frame_observation_rotates_with_tool(floor_scene):
    weight = TOOL_MASS * GRAVITY
    pose = Pose(np.array([0.0, 0.0, 0.02 - weight / 1e4]), np.array([0.0, 0.0, 0.0, 1.0]))
    world = step(State.at_rest(pose), Action.zero(), floor_scene, OracleConfig(gravity=True, observation_frame="world"))[1]
    tool = step(State.at_rest(pose), Action.zero(), floor_scene, OracleConfig(gravity=True))[1]
    # half turn about z leaves the vertical reading unchanged
    np.testing.assert_allclose(tool.force, world.force, atol=1e-9)


def test_no_contact_in_free_space(free_scene):
    _, observation, touched = step_with_contact(State.at_rest(Pose.identity()),
                                                Action(np.array([0.0, 0.0, -1.0]), np.zeros(3)), free_scene,
                                                OracleConfig(gravity=True))
    assert not touched
    assert not observation.as_array().any()


def test_generated_episode(free_scene):
    cfg = OracleConfig()
    records = generate_episode(free_scene, cfg, seed=[3, 0], steps=50, episode=4)
    assert len(records) == 47
    assert records[0].step == 3
    assert all(r.episode == 4 for r in records)
    assert not any(r.contact for r in records)
    for older, newer in zip(records, records[1:]):
        np.testing.assert_array_equal(older.next_pose, newer.poses[0])
        np.testing.assert_array_equal(older.poses[0], newer.poses[1])


def test_generated_episode_is_deterministic(free_scene):
    cfg = OracleConfig()
    a = generate_episode(free_scene, cfg, seed=[9, 1], steps=20)
    b = generate_episode(free_scene, cfg, seed=[9, 1], steps=20)
    c = generate_episode(free_scene, cfg, seed=[9, 2], steps=20)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.next_pose, y.next_pose)
        np.testing.assert_array_equal(x.action.as_array(), y.action.as_array())
    assert not np.array_equal(a[-1].next_pose, c[-1].next_pose)


def test_episode_contacts_recorded(floor_scene):
    cfg = OracleConfig(force_scale=0.0, torque_scale=0.0)
    records = generate_episode(floor_scene, cfg, seed=0, steps=5)
    # hovering 4 mm over the plate: face pairs within the radius, but no force
    assert all(r.contacts for r in records)
    assert not any(r.contact for r in records)


def test_short_episode_rejected(free_scene):
    with pytest.raises(InvalidInputError):
        generate_episode(free_scene, OracleConfig(), seed=0, steps=3)


def test_flipped_splines_push_down(rng):
    cfg = OracleConfig(flip_z_probability=1.0)
    spline = wrench_spline(rng, 100, cfg)
    times = np.linspace(0.0, 99 * cfg.dt, cfg.knots)
    assert (spline(times)[:, 2] <= 1e-12).all()


def test_start_jitter(free_scene, rng):
    cfg = OracleConfig(start_jitter=0.001, start_jitter_rot=0.1)
    pose = jittered_start(free_scene, rng, cfg)
    assert np.abs(pose.position - free_scene.start_pose.position).max() <= 0.001
    assert quaternion_angle(pose.orientation) <= 0.1 + 1e-12
    assert jittered_start(free_scene, rng, OracleConfig()).allclose(free_scene.start_pose)


@pytest.mark.parametrize("kwargs", [{"dt": 0.0}, {"substeps": 0}, {"stiffness": -1.0}, {"knots": 1},
                                    {"observation_frame": "sensor"}])
def test_invalid_config_rejected(kwargs):
    with pytest.raises(InvalidInputError):
        OracleConfig(**kwargs)


def test_config_from_flat_keys():
    cfg = OracleConfig.from_config({"oracle.substeps": 5, "graph.history": 2, "seed": 1}, dt=0.01)
    assert (cfg.substeps, cfg.history, cfg.dt) == (5, 2, 0.01)
    assert cfg.substep == pytest.approx(0.002)


def test_shape_names():
    assert shape_names(None) == ["scene"]
    assert shape_names(["hexagon"]) == ["scene", "hexagon"]
    with pytest.raises(InvalidInputError):
        shape_names(["blob"])


def _rotational_energy(state: State, inertia_body: np.ndarray) -> float:
    rotation = quaternion_to_matrix(state.pose.orientation)
    omega = state.twist.angular
    return 0.5 * float(omega @ rotation @ inertia_body @ rotation.T @ omega)


def _angular_momentum(state: State, inertia_body: np.ndarray) -> np.ndarray:
    rotation = quaternion_to_matrix(state.pose.orientation)
    return rotation @ inertia_body @ rotation.T @ state.twist.angular


@pytest.mark.parametrize("omega", [(1.0, 0.5, 2.0), (3.0, 0.2, 5.0), (0.0, 4.0, 0.1)])
def test_free_spin_conserves_energy(free_scene, omega):
    cfg = OracleConfig()
    inertia = free_scene.tool_body.inertia
    state = State(Pose.identity(), Twist(np.zeros(3), np.array(omega)))
    energy, momentum = _rotational_energy(state, inertia), _angular_momentum(state, inertia)
    for _ in range(1000):
        state, _ = step(state, Action.zero(), free_scene, cfg)
    assert abs(_rotational_energy(state, inertia) - energy) / energy < 1e-4
    np.testing.assert_allclose(_angular_momentum(state, inertia), momentum, rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(state.pose.position, np.zeros(3), atol=1e-15)


def test_free_translation_conserves_energy(free_scene):
    cfg = OracleConfig()
    velocity = np.array([0.03, -0.01, 0.02])
    state = State(Pose.identity(), Twist(velocity, np.zeros(3)))
    for _ in range(1000):
        state, _ = step(state, Action.zero(), free_scene, cfg)
    energy = 0.5 * TOOL_MASS * velocity @ velocity
    assert abs(0.5 * TOOL_MASS * state.twist.linear @ state.twist.linear - energy) / energy < 1e-9
    np.testing.assert_allclose(state.pose.position, velocity * 1000 * cfg.dt, rtol=1e-9)


def test_free_rotation_keeps_momentum_magnitude(rng):
    moments = np.array([1e-4, 2e-4, 3.5e-4])
    axes = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    q, momentum = np.array([1.0, 0.0, 0.0, 0.0]), np.array([2e-4, -1e-4, 5e-4])
    rotated_q, rotated = free_rotation(q, momentum, axes, moments, 0.01)
    assert np.linalg.norm(rotated) == pytest.approx(np.linalg.norm(momentum), rel=1e-12)
    # world-frame momentum is unchanged by a torque-free spin
    np.testing.assert_allclose(quaternion_to_matrix(rotated_q) @ rotated, momentum, atol=1e-15)
    assert quaternion_angle(rotated_q) > 0.0


def test_normal_force_is_unilateral(floor_scene, rng):
    cfg = OracleConfig()
    for _ in range(50):
        z = 0.02 + rng.uniform(-2e-4, 1e-3)
        pose = Pose(np.array([0.0, 0.0, z]), np.array([1.0, 0.0, 0.0, 0.0]))
        wrench = contact_wrench(pose, rng.uniform(-1.0, 1.0, 3), rng.uniform(-1.0, 1.0, 3), floor_scene, cfg)
        assert wrench.force[2] >= 0.0
        if z > 0.02:
            assert not wrench.active
            assert not wrench.force.any() and not wrench.torque.any()


def test_separating_contact_pulls_nothing(floor_scene):
    cfg = OracleConfig()
    pose = Pose(np.array([0.0, 0.0, 0.02 - 1e-4]), np.array([1.0, 0.0, 0.0, 0.0]))
    # spring pushes 1 N, damping would pull 50 N while the tool leaves the plate
    wrench = contact_wrench(pose, np.array([0.0, 0.0, 1.0]), np.zeros(3), floor_scene, cfg)
    assert not wrench.active
    np.testing.assert_array_equal(wrench.force, np.zeros(3))
    pressing = contact_wrench(pose, np.zeros(3), np.zeros(3), floor_scene, cfg)
    np.testing.assert_allclose(pressing.force, [0.0, 0.0, cfg.stiffness * 1e-4], rtol=1e-9)


def test_face_pair_contacts_count_each_colliding_pair(floor_scene):
    cfg = OracleConfig(contact_points="face_pair")
    depth = 1e-4
    pose = Pose(np.array([0.0, 0.0, 0.02 - depth]), np.array([1.0, 0.0, 0.0, 0.0]))
    wrench = contact_wrench(pose, np.zeros(3), np.zeros(3), floor_scene, cfg)
    assert wrench.active
    np.testing.assert_allclose(wrench.force[:2], 0.0, atol=1e-12)
    # every tool face touching one of the four bottom corners pairs with the plate top
    pairs = wrench.force[2] / (cfg.stiffness * depth)
    assert pairs == pytest.approx(round(pairs), abs=1e-6)
    assert round(pairs) >= 4
    piece = contact_wrench(pose, np.zeros(3), np.zeros(3), floor_scene, OracleConfig())
    assert wrench.force[2] > piece.force[2]


def test_face_pair_contacts_are_unilateral(floor_scene):
    cfg = OracleConfig(contact_points="face_pair")
    hovering = Pose(np.array([0.0, 0.0, 0.0201]), np.array([1.0, 0.0, 0.0, 0.0]))
    assert not contact_wrench(hovering, np.zeros(3), np.zeros(3), floor_scene, cfg).active
    sinking = Pose(np.array([0.0, 0.0, 0.0199]), np.array([1.0, 0.0, 0.0, 0.0]))
    assert contact_wrench(sinking, np.zeros(3), np.zeros(3), floor_scene, cfg).force[2] > 0.0


def test_unknown_contact_rule_rejected():
    with pytest.raises(InvalidInputError):
        OracleConfig(contact_points="vertex")
