"""
Dynamics models shared by the MPC agent and the evaluation code.

Both models map (state history, action) to (next state, observation);
the learned one runs graph construction, the network and post-processing.
"""

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from epd import EncodeProcessDecode, EpdConfig
from geometry import DEFAULT_COLLISION_RADIUS
from graph_builder import batch_graphs, build_graph
from oracle_sim import OracleConfig, step as oracle_step
from postprocess import next_tool_state
from scene import Scene
from state import Action, InvalidInputError, Observation, State, StateHistory, to_tool_frame
from tensor_core import load_checkpoint, restore_module

logger = logging.getLogger(__name__)


class DynamicsModel(ABC):
    """step(history, action) -> (next state, observation)"""

    scene: Scene
    dt: float

    @abstractmethod
    def step(self, history: StateHistory, action: Action) -> Tuple[State, Observation]:
        ...

    def step_batch(self, histories: Sequence[StateHistory], actions: Sequence[Action]
                   ) -> Tuple[List[State], List[Observation]]:
        results = [self.step(history, action) for history, action in zip(histories, actions)]
        return [s for s, _ in results], [o for _, o in results]


class OracleModel(DynamicsModel):
    """The analytical simulator used as a dynamics model"""

    def __init__(self, scene: Scene, cfg: Optional[OracleConfig] = None):
        self.scene = scene
        self.cfg = cfg or OracleConfig(dt=scene.dt)
        self.dt = self.cfg.dt

    def step(self, history: StateHistory, action: Action) -> Tuple[State, Observation]:
        return oracle_step(history.current, action, self.scene, self.cfg)


class LearnedModel(DynamicsModel):
    """Graph network rollout model"""

    def __init__(self, network: EncodeProcessDecode, scene: Scene, dt: Optional[float] = None,
                 radius: float = DEFAULT_COLLISION_RADIUS, observation_frame: str = "tool"):
        self.network = network.eval()
        self.scene = scene
        self.dt = scene.dt if dt is None else dt
        self.radius = radius
        self.observation_frame = observation_frame
        self.reference = scene.reference_vertices[scene.tool_slice]

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path], scene: Scene, radius: Optional[float] = None
                        ) -> "LearnedModel":
        header, blocks = load_checkpoint(path)
        cfg = EpdConfig(**header.get("epd", {}))
        network = EncodeProcessDecode(cfg)
        restore_module(network, blocks)
        logger.info("Loaded network from %s (step %s)", path, header.get("step"))
        return cls(network, scene, header.get("dt", scene.dt),
                   radius if radius is not None else header.get("radius", DEFAULT_COLLISION_RADIUS),
                   header.get("observation_frame", "tool"))

    def _check_history(self, history: StateHistory):
        if history.h != self.network.cfg.history:
            raise InvalidInputError(f"Network was built for h={self.network.cfg.history}, "
                                    f"got a history of h={history.h}")

    def _finish(self, history: StateHistory, acc: np.ndarray, wrench: np.ndarray) -> Tuple[State, Observation]:
        poses = history.pose_frames(self.dt)
        tool = self.scene.tool_slice
        p_t = self.scene.world_vertices(poses[0])[tool]
        p_prev = self.scene.world_vertices(poses[1])[tool]
        next_pose, twist = next_tool_state(acc[tool], p_t, p_prev, self.reference, poses[0], self.dt)
        observation = Observation.from_array(wrench)
        if self.observation_frame == "tool":
            observation = to_tool_frame(observation, next_pose)
        return State(next_pose, twist), observation

    def step(self, history: StateHistory, action: Action) -> Tuple[State, Observation]:
        self._check_history(history)
        graph = build_graph(history, action, self.scene, self.radius, dt=self.dt)
        acc, wrench = self.network.predict(graph)
        return self._finish(history, acc, wrench[0])

    def step_batch(self, histories: Sequence[StateHistory], actions: Sequence[Action]
                   ) -> Tuple[List[State], List[Observation]]:
        for history in histories:
            self._check_history(history)
        graphs = [build_graph(h, a, self.scene, self.radius, dt=self.dt) for h, a in zip(histories, actions)]
        acc, wrench = self.network.predict(batch_graphs(graphs))
        n = self.scene.vertex_count
        states, observations = [], []
        for k, history in enumerate(histories):
            state, observation = self._finish(history, acc[k * n:(k + 1) * n], wrench[k])
            states.append(state)
            observations.append(observation)
        return states, observations
