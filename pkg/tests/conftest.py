"""Shared fixtures: small scenes, seeded generators and a tiny network configuration"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dataset import Record
from epd import EpdConfig
from geometry import BodySpec, box_mesh
from scene import Scene, box_inertia
from state import Action, Observation, Pose

SCENES_DIR = Path(__file__).resolve().parent.parent / "scenes"

TOOL_SIZE = (0.02, 0.02, 0.04)
TOOL_MASS = 0.5


def make_tool(size=TOOL_SIZE, mass=TOOL_MASS) -> BodySpec:
    return BodySpec(meshes=(box_mesh(size),), mass=mass, friction=0.5, dynamic=True,
                    inertia=box_inertia(mass, size), name="tool")


def make_floor(size=(0.2, 0.2, 0.02)) -> BodySpec:
    return BodySpec(meshes=(box_mesh(size, center=(0.0, 0.0, -0.5 * size[2])),), mass=10.0, friction=0.5,
                    dynamic=False, name="floor")


def shift_scene(scene: Scene, offset) -> Scene:
    """Same scene with static bodies and start pose moved by a world translation"""
    offset = np.asarray(offset, dtype=np.float64)
    bodies = tuple(body if body.dynamic
                   else replace(body, pose=Pose(body.pose.position + offset, body.pose.orientation))
                   for body in scene.bodies)
    start = Pose(scene.start_pose.position + offset, scene.start_pose.orientation)
    return Scene(bodies=bodies, name=scene.name, tool_tip=scene.tool_tip, start_pose=start, dt=scene.dt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def free_scene() -> Scene:
    """Unit tool alone in free space"""
    return Scene(bodies=(make_tool(),), name="free", tool_tip=[0.0, 0.0, -0.02])


@pytest.fixture
def floor_scene() -> Scene:
    """Tool hovering 4 mm above a static plate (inside the collision radius)"""
    return Scene(bodies=(make_tool(), make_floor()), name="floor", tool_tip=[0.0, 0.0, -0.02],
                 start_pose=Pose(np.array([0.0, 0.0, 0.024]), np.array([1.0, 0.0, 0.0, 0.0])))


@pytest.fixture
def scenes_dir() -> Path:
    return SCENES_DIR


@pytest.fixture
def tiny_epd() -> EpdConfig:
    return EpdConfig(latent=16, hidden=16, layers=2, history=3)


def make_record(episode: int = 0, step: int = 0, h: int = 3, velocity=(0.01, 0.0, 0.0), dt: float = 0.002,
                start=(0.0, 0.0, 0.0)) -> Record:
    """Tool translating at constant velocity, identity orientation"""
    velocity = np.asarray(velocity, dtype=np.float64)
    origin = np.asarray(start, dtype=np.float64) + velocity * dt * step
    poses = np.stack([np.concatenate([origin - velocity * dt * k, [1.0, 0.0, 0.0, 0.0]]) for k in range(h + 1)])
    return Record(
        episode=episode,
        step=step,
        poses=poses,
        twist=np.concatenate([velocity, np.zeros(3)]),
        action=Action(np.array([0.1, 0.2, -0.3]), np.array([0.001, 0.0, -0.002])),
        observation=Observation(np.array([0.0, 0.0, 4.9]), np.zeros(3)),
        next_pose=np.concatenate([origin + velocity * dt, [1.0, 0.0, 0.0, 0.0]]),
        contact=step % 2 == 0,
        contacts=((0, 12), (1, 13)) if step % 2 == 0 else (),
    )


@pytest.fixture
def record_factory():
    return make_record
