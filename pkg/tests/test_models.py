import numpy as np
import pytest
import torch

from epd import EncodeProcessDecode
from models import LearnedModel, OracleModel
from oracle_sim import OracleConfig, step as oracle_step
from state import Action, InvalidInputError, Pose, State, StateHistory, Twist


@pytest.fixture
def learned(floor_scene, tiny_epd):
    torch.manual_seed(0)
    network = EncodeProcessDecode(tiny_epd)
    network.set_normalization({"acceleration": (np.zeros(3), np.full(3, 1e-5))})
    return LearnedModel(network, floor_scene)


def _histories(scene):
    moving = State(scene.start_pose, Twist(np.array([0.01, 0.0, -0.01]), np.zeros(3)))
    lifted = Pose(scene.start_pose.position + np.array([0.0, 0.0, 0.05]), scene.start_pose.orientation)
    return [StateHistory.constant(State.at_rest(scene.start_pose), 3),
            StateHistory((moving, moving, moving)),
            StateHistory.constant(State.at_rest(lifted), 3)]


def test_learned_batch_matches_single_steps(learned, floor_scene):
    histories = _histories(floor_scene)
    actions = [Action(np.array([0.0, 0.0, -0.5]), np.zeros(3)),
               Action(np.array([0.2, 0.0, 0.0]), np.array([0.0, 0.0, 0.001])),
               Action.zero()]
    states, observations = learned.step_batch(histories, actions)
    for history, action, state, observation in zip(histories, actions, states, observations):
        single_state, single_observation = learned.step(history, action)
        assert state.pose.allclose(single_state.pose, atol=1e-6)
        np.testing.assert_allclose(observation.as_array(), single_observation.as_array(), atol=1e-4)


def test_learned_model_stays_near_current_pose(learned, floor_scene):
    state, _ = learned.step(_histories(floor_scene)[0], Action.zero())
    # accelerations are denormalized to tens of micrometres per step
    assert np.linalg.norm(state.pose.position - floor_scene.start_pose.position) < 1e-3


def test_oracle_model_wraps_simulator(free_scene):
    cfg = OracleConfig(dt=free_scene.dt)
    model = OracleModel(free_scene, cfg)
    history = StateHistory.constant(State.at_rest(Pose.identity()), 3)
    action = Action(np.array([0.5, 0.0, 0.0]), np.zeros(3))
    state, observation = model.step(history, action)
    expected, _ = oracle_step(history.current, action, free_scene, cfg)
    assert state.pose.allclose(expected.pose, atol=1e-12)
    states, _ = model.step_batch([history, history], [action, Action.zero()])
    assert states[0].pose.allclose(state.pose, atol=1e-12)
    assert states[1].pose.allclose(history.current.pose, atol=1e-12)
    assert model.dt == free_scene.dt


def test_learned_model_rejects_other_history_length(learned, floor_scene):
    short = StateHistory.constant(State.at_rest(floor_scene.start_pose), 2)
    with pytest.raises(InvalidInputError):
        learned.step(short, Action.zero())
    with pytest.raises(InvalidInputError):
        learned.step_batch([short], [Action.zero()])
