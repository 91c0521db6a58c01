import numpy as np
import pytest

from conftest import make_record
from metrics import (EvalConfig, RESULT_COLUMNS, UndefinedRelativeError, episode_runs, evaluate, ft_rmse,
                     rmse_curve, rmse_pos, rmse_rot, rollout_model, sample_windows)
from models import DynamicsModel, OracleModel
from oracle_sim import OracleConfig, generate_episode
from state import Action, Observation, Pose, State, StateHistory, quaternion_from_axis_angle
from tensor_core import ShapeError


def _line(T, speed=0.01):
    return [Pose(np.array([speed * k, 0.0, 0.0]), quaternion_from_axis_angle([0.0, 0.0, 1.0], 0.05 * k))
            for k in range(T + 1)]


def test_frozen_predictor_scores_exactly_one():
    truth = _line(10)
    frozen = [truth[0]] * 11
    assert rmse_pos(frozen, truth, 10, relative=True) == 1.0
    assert rmse_rot(frozen, truth, 10, relative=True) == 1.0


def test_perfect_predictor_scores_zero():
    truth = _line(5)
    assert rmse_pos(truth, truth, 5) == 0.0
    assert rmse_pos(truth, truth, 5, relative=True) == 0.0
    assert rmse_rot(truth, truth, 5) == pytest.approx(0.0, abs=1e-12)


def test_absolute_errors():
    truth = _line(4)
    shifted = [Pose(p.position + [0.0, 0.003, 0.004], p.orientation) for p in truth]
    assert rmse_pos(shifted, truth, 4) == pytest.approx(0.005)
    assert rmse_pos(np.stack([p.position for p in shifted]), np.stack([p.position for p in truth]), 4) \
        == pytest.approx(0.005)


def test_index_zero_is_excluded():
    truth = _line(3)
    pred = [Pose(np.array([1.0, 1.0, 1.0]), truth[0].orientation)] + truth[1:]
    assert rmse_pos(pred, truth, 3) == 0.0


def test_stationary_truth_has_no_relative_error():
    still = [Pose.identity()] * 4
    with pytest.raises(UndefinedRelativeError):
        rmse_pos(_line(3), still, 3, relative=True)
    with pytest.raises(UndefinedRelativeError):
        rmse_rot(_line(3), still, 3, relative=True)


def test_short_trajectories_rejected():
    with pytest.raises(ShapeError):
        rmse_pos(_line(2), _line(2), 3)
    with pytest.raises(ShapeError):
        rmse_rot(_line(2), _line(2), 0)


def test_force_torque_rmse():
    pred = [Observation.zero(), Observation.zero()]
    truth = [Observation(np.array([3.0, 4.0, 0.0]), np.zeros(3)),
             Observation(np.array([0.0, 0.0, 5.0]), np.array([0.0, 0.002, 0.0]))]
    force, torque = ft_rmse(pred, truth)
    assert force == pytest.approx(5.0)
    assert torque == pytest.approx(np.sqrt(0.002 ** 2 / 2))
    with pytest.raises(ShapeError):
        ft_rmse(pred[:1], truth)


def test_rmse_curve_stops_at_shortest_window():
    truth = _line(4)
    pred = [Pose(p.position + [0.001, 0.0, 0.0], p.orientation) for p in truth]
    curve = rmse_curve([pred, pred[:3]], [truth, truth[:3]], 4)
    assert curve["T"].tolist() == [1, 2, 3, 4]
    assert curve["windows"].tolist() == [2, 2, 1, 1]
    np.testing.assert_allclose(curve["pos_median"], 0.001)


class _Exploding(DynamicsModel):
    def __init__(self, scene, after):
        self.scene, self.dt, self.after, self.calls = scene, scene.dt, after, 0

    def step(self, history, action):
        self.calls += 1
        if self.calls > self.after:
            raise FloatingPointError("blew up")
        return history.current, Observation.zero()


def test_rollout_stops_at_failure(free_scene):
    history = StateHistory.constant(State.at_rest(Pose.identity()), 3)
    rollout = rollout_model(_Exploding(free_scene, 2), history, [Action.zero()] * 5)
    assert rollout.truncated
    assert len(rollout.states) == 2
    with pytest.raises(ValueError):
        rollout_model(_Exploding(free_scene, 2), history, [])


def test_windows_stay_inside_runs():
    records = [make_record(episode=e, step=s) for e in range(2) for s in range(3, 10)]
    records += [make_record(episode=2, step=s) for s in (3, 4, 8, 9)]
    assert [len(run) for run in episode_runs(records)] == [7, 7, 2, 2]
    windows = sample_windows(records, 3, 4, seed=5)
    assert len(windows) == 4
    for window in windows:
        assert len({r.episode for r in window}) == 1
        assert [r.step for r in window] == list(range(window[0].step, window[0].step + 3))
    assert [w[0].step for w in windows] == [w[0].step for w in sample_windows(records, 3, 4, seed=5)]
    assert len(sample_windows(records, 3, 100)) == 10
    assert sample_windows(records, 8, 1) == []


def test_oracle_matches_its_own_episodes(free_scene):
    cfg = OracleConfig(dt=free_scene.dt)
    records = [r for e in range(2) for r in generate_episode(free_scene, cfg, seed=[1, e], steps=25, episode=e)]
    table, curve = evaluate(OracleModel(free_scene, cfg), records, free_scene.dt, T=10, windows=3, curve=True)
    assert table["windows"].iloc[0] == 3
    assert table["truncated"].iloc[0] == 0
    for column in RESULT_COLUMNS:
        assert table[column].iloc[0] < 1e-9
    assert len(curve) == 10


def test_evaluate_needs_long_enough_runs(free_scene):
    records = [make_record(step=s) for s in range(3, 6)]
    with pytest.raises(ValueError):
        evaluate(OracleModel(free_scene), records, 0.002, T=10)


def test_eval_config():
    cfg = EvalConfig.from_config({"eval.rollout_len": 7, "seed": 2})
    assert (cfg.rollout_len, cfg.windows, cfg.seed) == (7, 20, 2)
    with pytest.raises(ValueError):
        EvalConfig(rollout_len=0)
    with pytest.raises(ValueError):
        EvalConfig(windows=0)
