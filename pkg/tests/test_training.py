from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch

from conftest import make_record
from dataset import DatasetHeader
from epd import NORM_GROUPS
from graph_builder import MESH_MESH
from models import LearnedModel
from oracle_sim import OracleConfig, generate_episode, step
from scene import Scene
from state import (Action, InvalidInputError, Pose, State, StateHistory, Twist, quaternion_from_axis_angle,
                   quaternion_multiply, random_quaternion, rotate_vectors)
from tensor_core import ContractError, ShapeError
from training import (LossWeights, RunningStats, SeededBatchSampler, TrainConfig, TrainingSource,
                      augment_rotation, corrupt_positions, fit_norm_stats, loss, make_example, posed_world,
                      train)


@pytest.fixture
def floor_source(floor_scene):
    cfg = OracleConfig(dt=floor_scene.dt, force_scale=0.3)
    records = [r for e in range(3) for r in generate_episode(floor_scene, cfg, seed=[0, e], steps=10, episode=e)]
    header = DatasetHeader(h=3, dt=floor_scene.dt, scene_hash="test")
    return TrainingSource(floor_scene, header, records)


def _tiny_cfg(**overrides):
    values = dict(steps=4, batch_size=2, checkpoint_every=2, validate_every=2, log_every=1,
                  norm_records=20, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def test_rotation_leaves_tool_frame_observation():
    record = make_record()
    q = quaternion_from_axis_angle([1.0, 0.0, 0.0], np.pi / 2)
    tool = augment_rotation(record, rotation=q, observation_frame="tool")
    world = augment_rotation(record, rotation=q, observation_frame="world")
    np.testing.assert_array_equal(tool.observation.as_array(), record.observation.as_array())
    # x-axis quarter turn carries +z onto -y
    np.testing.assert_allclose(world.observation.force, [0.0, -4.9, 0.0], atol=1e-12)
    np.testing.assert_allclose(tool.rotation, q)
    np.testing.assert_allclose(tool.action.force, [0.1, 0.3, 0.2], atol=1e-12)


def test_rotation_preserves_pose_differences():
    record = make_record(velocity=(0.02, -0.01, 0.0))
    rotated = augment_rotation(record, seed=7)
    before = np.diff(record.poses[:, :3], axis=0)
    after = np.diff(rotated.poses[:, :3], axis=0)
    np.testing.assert_allclose(np.linalg.norm(after, axis=1), np.linalg.norm(before, axis=1), atol=1e-12)


def test_corrupt_positions_respects_mask():
    history = np.zeros((4, 200, 3))
    mask = np.arange(200) < 100
    noisy = corrupt_positions(history, 0.01, seed=1, mask=mask)
    assert not noisy[:, 100:].any()
    assert np.std(noisy[:, :100]) == pytest.approx(0.01, rel=0.1)
    assert not corrupt_positions(history, 0.0).any()
    with pytest.raises(InvalidInputError):
        corrupt_positions(history, -1.0)


def test_clean_example_integrates_to_next_positions(floor_source):
    record = floor_source.records[4]
    scene = floor_source.scene
    example = make_example(record, scene)
    p_t, _ = posed_world(scene, record.pose(0), record.rotation)
    p_prev, _ = posed_world(scene, record.pose(1), record.rotation)
    target, _ = posed_world(scene, record.next, record.rotation)
    dynamic = example.graph.dynamic_vertices
    np.testing.assert_allclose((example.acceleration + 2.0 * p_t - p_prev)[dynamic], target[dynamic], atol=1e-12)
    assert not example.acceleration[~dynamic].any()


def test_noisy_example_keeps_static_vertices(floor_source):
    record = floor_source.records[2]
    clean = make_example(record, floor_source.scene)
    noisy = make_example(record, floor_source.scene, sigma=1e-4, seed=[0, 1])
    dynamic = clean.graph.dynamic_vertices
    assert not np.allclose(noisy.acceleration[dynamic], clean.acceleration[dynamic])
    assert not noisy.acceleration[~dynamic].any()
    np.testing.assert_array_equal(noisy.wrench, clean.wrench)


def test_running_stats_match_numpy(rng):
    data = rng.normal(3.0, 2.0, size=(500, 4))
    stats = RunningStats()
    for chunk in np.array_split(data, 7):
        stats.update(chunk)
    stats.update(np.zeros((0, 4)))
    np.testing.assert_allclose(stats.mean, data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(stats.std(), data.std(axis=0), rtol=1e-12)


def test_constant_feature_gets_std_floor():
    stats = RunningStats()
    stats.update(np.ones((5, 2)))
    assert (stats.std() > 0.0).all()


def test_norm_stats_fill_unseen_groups(free_scene):
    records = [replace(make_record(step=s), contacts=()) for s in range(3, 8)]
    examples = [make_example(r, free_scene) for r in records]
    stats = fit_norm_stats(examples, widths={MESH_MESH: 27})
    np.testing.assert_array_equal(stats.std(MESH_MESH), np.ones(27))
    assert stats.mean("mesh").shape == (12,)
    assert set(stats.groups) <= set(NORM_GROUPS)
    with pytest.raises(InvalidInputError):
        fit_norm_stats([])


def test_loss_weights():
    value = loss(torch.zeros(2, 3), torch.zeros(1, 6), torch.ones(2, 3),
                 torch.tensor([[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]]))
    assert float(value) == pytest.approx(1.0 + 0.1 * 1.0 + 0.1 * 4.0)
    heavy = loss(torch.zeros(2, 3), torch.zeros(1, 6), torch.ones(2, 3), torch.zeros(1, 6),
                 LossWeights(position=2.0))
    assert float(heavy) == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        loss(torch.zeros(2, 3), torch.zeros(1, 6), torch.ones(3, 3), torch.zeros(1, 6))
    with pytest.raises(ShapeError):
        loss(torch.zeros(2, 3), torch.zeros(1, 3), torch.ones(2, 3), torch.zeros(1, 3))


def test_train_config_from_flat_keys():
    cfg = TrainConfig.from_config({"train.steps": 10, "train.lambda_force": 0.5, "seed": 3})
    assert cfg.steps == 10
    assert cfg.seed == 3
    assert cfg.weights == LossWeights(position=1.0, force=0.5, torque=0.1)


def test_batch_sampler_is_seeded():
    a = SeededBatchSampler(50, 4, seed=1, start_step=0, total_steps=3)
    b = SeededBatchSampler(50, 4, seed=1, start_step=2, total_steps=3)
    assert len(a) == 3 and len(b) == 1
    assert list(a)[2] == list(b)[0]
    assert a.batch(0) != a.batch(1)
    ordered = SeededBatchSampler(5, 4, seed=1, start_step=0, total_steps=2, shuffle=False)
    assert [i for i, _ in ordered.batch(1)] == [4, 0, 1, 2]


def test_tiny_training_run(tmp_path, floor_source, tiny_epd):
    network, log = train([floor_source], _tiny_cfg(), tmp_path, epd_cfg=tiny_epd, val_sources=[floor_source],
                         header={"dt": floor_source.scene.dt})
    assert log["step"].tolist() == [1, 2, 3, 4]
    assert np.isfinite(log["train_loss"]).all()
    assert log["val_loss"].notna().tolist() == [False, True, False, True]
    assert (tmp_path / "ckpt_00000002.ckpt").exists()
    assert (tmp_path / "ckpt_00000004.ckpt").exists()
    assert len(pd.read_csv(tmp_path / "metrics.csv")) == 4
    # normalization was fitted on the data
    assert not torch.allclose(network.norm_std_acceleration, torch.ones(3))


def test_training_resumes_from_latest_checkpoint(tmp_path, floor_source, tiny_epd):
    train([floor_source], _tiny_cfg(), tmp_path, epd_cfg=tiny_epd)
    _, log = train([floor_source], _tiny_cfg(steps=6), tmp_path, epd_cfg=tiny_epd)
    assert log["step"].tolist() == [5, 6]
    assert len(pd.read_csv(tmp_path / "metrics.csv")) == 6


def test_training_is_deterministic(tmp_path, floor_source, tiny_epd):
    _, first = train([floor_source], _tiny_cfg(), tmp_path / "a", epd_cfg=tiny_epd)
    _, second = train([floor_source], _tiny_cfg(), tmp_path / "b", epd_cfg=tiny_epd)
    np.testing.assert_array_equal(first["train_loss"].to_numpy(), second["train_loss"].to_numpy())


def test_batch_larger_than_dataset_rejected(tmp_path, floor_source, tiny_epd):
    with pytest.raises(ContractError):
        train([floor_source], _tiny_cfg(batch_size=1000), tmp_path, epd_cfg=tiny_epd)


def test_trained_checkpoint_drives_learned_model(tmp_path, floor_source, tiny_epd):
    train([floor_source], _tiny_cfg(), tmp_path, epd_cfg=tiny_epd, header={"dt": floor_source.scene.dt})
    scene = floor_source.scene
    model = LearnedModel.from_checkpoint(tmp_path / "ckpt_00000004.ckpt", scene)
    assert model.network.cfg == tiny_epd
    state, observation = model.step(StateHistory.constant(State.at_rest(scene.start_pose), 3),
                                     Action(np.array([0.0, 0.0, -0.1]), np.zeros(3)))
    assert np.isfinite(state.as_array()).all()
    assert np.isfinite(observation.as_array()).all()


def _rotated_scene(scene, q):
    bodies = tuple(body if body.dynamic
                   else replace(body, pose=Pose(rotate_vectors(q, body.pose.position),
                                                quaternion_multiply(q, body.pose.orientation)))
                   for body in scene.bodies)
    return Scene(bodies=bodies, name=scene.name, tool_tip=scene.tool_tip, dt=scene.dt)


def _pressing_record(scene, cfg):
    """Record of a tool pushed into the plate from 0.1 mm penetration"""
    pose = Pose(np.array([0.001, -0.002, 0.0199]), quaternion_from_axis_angle([0.0, 1.0, 0.0], 0.05))
    state = State(pose, Twist(np.array([0.01, 0.0, -0.02]), np.array([0.0, 0.3, 0.0])))
    action = Action(np.array([0.2, 0.1, -0.5]), np.array([0.0, 0.001, 0.0]))
    next_state, observation = step(state, action, scene, cfg)
    poses = np.stack([pose.as_array()] * 4)
    return replace(make_record(), poses=poses, twist=state.twist.as_array(), action=action,
                   observation=observation, next_pose=next_state.pose.as_array(), contact=True)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rotated_records_replay_in_rotated_scene(floor_scene, seed):
    cfg = OracleConfig(dt=floor_scene.dt, force_scale=0.3)
    records = generate_episode(floor_scene, cfg, seed=[seed, 0], steps=8)[:3] + [_pressing_record(floor_scene, cfg)]
    q = random_quaternion(np.random.default_rng(seed))
    scene = _rotated_scene(floor_scene, q)
    for record in records:
        rotated = augment_rotation(record, rotation=q)
        # static geometry carried by the record rotation sits where the rotated scene puts it
        vertices, _ = posed_world(floor_scene, rotated.pose(0), rotated.rotation)
        np.testing.assert_allclose(vertices, scene.world_vertices(rotated.pose(0)), atol=1e-12)
        next_state, observation = step(rotated.state, rotated.action, scene, cfg)
        assert next_state.pose.allclose(rotated.next, atol=1e-9)
        np.testing.assert_allclose(observation.as_array(), record.observation.as_array(), atol=1e-7)
    assert records[-1].observation.force[2] != 0.0
