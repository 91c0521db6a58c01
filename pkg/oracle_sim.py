"""
Oracle Simulator Module
Ground-truth rigid-body simulation of the tool:
- Free 6-DoF tool body under the applied wrench (semi-implicit Euler sub-steps,
  split free-body rotation)
- Penalty contact (spring-damper normal force, Coulomb-capped friction)
  against the static convex pieces of the scene
- Force-torque observation of the tool
- Random-spline wrench episodes for dataset generation
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline

from dataset import Record
from geometry import (TOOL_SHAPES, aabb_overlap, convex_penetration, detect_collisions, nearest_face_planes,
                      transform_points)
from scene import Scene
from state import (Action, DEFAULT_DT, DEFAULT_HISTORY, InvalidInputError, Observation, Pose, State, Twist,
                   quaternion_from_rotvec, quaternion_multiply, quaternion_normalize, quaternion_to_matrix,
                   random_quaternion, rotate_vectors, to_tool_frame)
from tensor_core import NonFiniteError

logger = logging.getLogger(__name__)

GRAVITY = 9.81
OBSERVATION_FRAMES = ("tool", "world")
CONTACT_POINT_RULES = ("piece", "face_pair")


@dataclass
class OracleConfig:
    dt: float = DEFAULT_DT
    substeps: int = 25
    stiffness: float = 1e4              # N/m
    damping: float = 50.0               # N s/m
    tangential_damping: float = 500.0   # N s/m, slope of the regularized friction law
    friction_scale: float = 1.0
    gravity: bool = False
    observation_frame: str = "tool"
    contact_points: str = "piece"
    # episode generation
    knots: int = 8
    force_scale: float = 1.0            # N, spline knot range per component
    torque_scale: float = 0.002         # N m
    flip_z_probability: float = 0.5
    start_jitter: float = 0.0           # m
    start_jitter_rot: float = 0.0       # rad
    history: int = DEFAULT_HISTORY

    def __post_init__(self):
        if not self.dt > 0.0:
            raise InvalidInputError(f"Oracle dt must be positive, got {self.dt}")
        if self.stiffness < 0.0:
            raise InvalidInputError(f"Contact stiffness must be non-negative, got {self.stiffness}")
        if self.substeps < 1:
            raise InvalidInputError(f"Need at least one sub-step, got {self.substeps}")
        if self.knots < 2:
            raise InvalidInputError(f"Wrench splines need at least two knots, got {self.knots}")
        if self.observation_frame not in OBSERVATION_FRAMES:
            raise InvalidInputError(f"Observation frame must be one of {OBSERVATION_FRAMES}")
        if self.contact_points not in CONTACT_POINT_RULES:
            raise InvalidInputError(f"Contact points must be one of {CONTACT_POINT_RULES}")

    @classmethod
    def from_config(cls, cfg: Dict, dt: float = DEFAULT_DT) -> "OracleConfig":
        """Oracle parameters from the flat configuration; the time step belongs to the scene"""
        keys = {
            "substeps": "oracle.substeps", "stiffness": "oracle.stiffness",
            "damping": "oracle.damping", "tangential_damping": "oracle.tangential_damping",
            "friction_scale": "oracle.friction_scale", "gravity": "oracle.gravity",
            "observation_frame": "oracle.observation_frame", "contact_points": "oracle.contact_points",
            "knots": "oracle.knots",
            "force_scale": "oracle.force_scale", "torque_scale": "oracle.torque_scale",
            "flip_z_probability": "oracle.flip_z_probability", "start_jitter": "oracle.start_jitter",
            "start_jitter_rot": "oracle.start_jitter_rot", "history": "graph.history",
        }
        return cls(dt=dt, **{name: cfg[key] for name, key in keys.items() if key in cfg})

    @property
    def substep(self) -> float:
        return self.dt / self.substeps


# ----------------------------------------------------------------------
# Contact
# ----------------------------------------------------------------------

@dataclass(eq=False)
class ContactModel:
    """Convex pieces of the tool (body frame) and of the static bodies (world frame)"""
    tool_pieces: List[Tuple[np.ndarray, np.ndarray]]
    static_pieces: List[Tuple[np.ndarray, np.ndarray, float]]  # vertices, faces, friction
    tool_friction: float


@lru_cache(maxsize=16)
def contact_model(scene: Scene) -> ContactModel:
    tool = scene.tool_body
    static = []
    for b, body in enumerate(scene.bodies):
        if b == scene.tool:
            continue
        for mesh in body.meshes:
            static.append((transform_points(body.pose, mesh.vertices), mesh.faces, body.friction))
    return ContactModel([(m.vertices, m.faces) for m in tool.meshes], static, tool.friction)


@dataclass
class ContactWrench:
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))  # about the tool CoM
    active: bool = False


def _penetration(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray
                 ) -> Optional[Tuple[float, np.ndarray, np.ndarray]]:
    """(max depth, depth-weighted point, depth-weighted normal) or None"""
    depth, normal = convex_penetration(points, vertices, faces)
    inside = depth > 0.0
    if not np.any(inside):
        return None
    weights = depth[inside]
    point = weights @ points[inside] / weights.sum()
    n = weights @ normal[inside]
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    return float(depth.max()), point, n / norm


Contact = Tuple[float, np.ndarray, np.ndarray]  # depth, world point, normal pushing the tool


def _piece_contacts(tool_world: np.ndarray, tool_faces: np.ndarray, static_vertices: np.ndarray,
                    static_faces: np.ndarray) -> List[Contact]:
    contacts = []
    hit = _penetration(tool_world, static_vertices, static_faces)
    if hit is not None:
        contacts.append(hit)
    hit = _penetration(static_vertices, tool_world, tool_faces)
    if hit is not None:
        depth, point, normal = hit
        contacts.append((depth, point, -normal))
    return contacts


def _deepest_per_face_pair(points: np.ndarray, point_faces: np.ndarray, vertices: np.ndarray,
                           faces: np.ndarray) -> List[Contact]:
    """Deepest penetrating point for each (face of the points, nearest face of the piece) pair"""
    depth, nearest, normals = nearest_face_planes(points, vertices, faces)
    deepest: Dict[Tuple[int, int], int] = {}
    for f, face in enumerate(point_faces):
        for v in face:
            if depth[v] <= 0.0:
                continue
            key = (f, int(nearest[v]))
            if key not in deepest or depth[v] > depth[deepest[key]]:
                deepest[key] = int(v)
    return [(float(depth[v]), points[v], normals[g]) for (_, g), v in sorted(deepest.items())]


def _face_pair_contacts(tool_world: np.ndarray, tool_faces: np.ndarray, static_vertices: np.ndarray,
                        static_faces: np.ndarray) -> List[Contact]:
    contacts = _deepest_per_face_pair(tool_world, tool_faces, static_vertices, static_faces)
    for depth, point, normal in _deepest_per_face_pair(static_vertices, static_faces, tool_world, tool_faces):
        contacts.append((depth, point, -normal))
    return contacts


def contact_wrench(pose: Pose, v_com: np.ndarray, omega: np.ndarray, scene: Scene,
                   cfg: OracleConfig) -> ContactWrench:
    """
    Penalty wrench the environment exerts on the tool

    With contact_points "piece" each (tool piece, static piece) pair contributes
    at most one contact per penetration direction: depth is the deepest
    penetrating vertex, applied at the depth-weighted centroid of all
    penetrating vertices. With "face_pair" every colliding face pair
    contributes its deepest penetrating vertex.
    """
    model = contact_model(scene)
    com = transform_points(pose, scene.tool_body.com)
    out = ContactWrench()
    for tool_local, tool_faces in model.tool_pieces:
        tool_world = transform_points(pose, tool_local)
        for static_vertices, static_faces, friction in model.static_pieces:
            if not aabb_overlap(tool_world, static_vertices):
                continue
            mu = cfg.friction_scale * np.sqrt(model.tool_friction * friction)
            if cfg.contact_points == "face_pair":
                contacts = _face_pair_contacts(tool_world, tool_faces, static_vertices, static_faces)
            else:
                contacts = _piece_contacts(tool_world, tool_faces, static_vertices, static_faces)
            for depth, point, normal in contacts:
                lever = point - com
                v_point = v_com + np.cross(omega, lever)
                v_n = float(v_point @ normal)
                f_n = max(0.0, cfg.stiffness * depth - cfg.damping * v_n)
                v_t = v_point - v_n * normal
                speed = np.linalg.norm(v_t)
                f_t = np.zeros(3)
                if speed > 1e-12 and f_n > 0.0:
                    f_t = -min(mu * f_n, cfg.tangential_damping * speed) * v_t / speed
                force = f_n * normal + f_t
                out.force = out.force + force
                out.torque = out.torque + np.cross(lever, force)
                out.active = out.active or f_n > 0.0
    return out


# ----------------------------------------------------------------------
# Stepping
# ----------------------------------------------------------------------

def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Oracle {what} became non-finite: {values}")


# symmetric split of the free-body rotation: (principal axis, fraction of the sub-step)
_ROTATION_SPLIT = ((0, 0.5), (1, 0.5), (2, 1.0), (1, 0.5), (0, 0.5))


def free_rotation(q: np.ndarray, momentum_body: np.ndarray, axes: np.ndarray, moments: np.ndarray,
                  h: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Torque-free rotation over h, split into exact spins about the principal axes

    Every spin is a rotation, so |L| is kept exactly and the kinetic energy
    error stays bounded at O(h^2) without drifting.

    Args:
        q: orientation (body to world)
        momentum_body: angular momentum in the body frame
        axes: principal axes as columns, in the body frame
        moments: principal moments of inertia
    """
    for i, fraction in _ROTATION_SPLIT:
        axis = axes[:, i]
        angle = float(axis @ momentum_body) / moments[i] * h * fraction
        q = quaternion_multiply(q, quaternion_from_rotvec(axis * angle))
        momentum_body = rotate_vectors(quaternion_from_rotvec(-axis * angle), momentum_body)
    return quaternion_normalize(q), momentum_body


def step_with_contact(state: State, action: Action, scene: Scene, cfg: OracleConfig
                      ) -> Tuple[State, Observation, bool]:
    """step() plus a flag telling whether any contact force acted"""
    _check_finite(state.as_array(), "input state")
    tool = scene.tool_body
    mass, inertia_body, com_body = tool.mass, tool.inertia, tool.com
    moments, axes = np.linalg.eigh(inertia_body)
    h = cfg.substep
    gravity = np.array([0.0, 0.0, -GRAVITY * mass]) if cfg.gravity else np.zeros(3)

    q = state.pose.orientation
    rotation = quaternion_to_matrix(q)
    com = state.pose.position + rotation @ com_body
    omega = state.twist.angular.copy()
    v_com = state.twist.linear + np.cross(omega, rotation @ com_body)
    momentum = inertia_body @ (rotation.T @ omega)   # body frame

    sensed_force, sensed_torque, touched = np.zeros(3), np.zeros(3), False
    for _ in range(cfg.substeps):
        pose = Pose(com - rotation @ com_body, q)
        contact = contact_wrench(pose, v_com, omega, scene, cfg)
        sensed_force += contact.force
        sensed_torque += contact.torque
        touched = touched or contact.active

        v_com = v_com + (action.force + contact.force + gravity) / mass * h
        momentum = momentum + rotation.T @ (action.torque + contact.torque) * h
        com = com + v_com * h
        q, momentum = free_rotation(q, momentum, axes, moments, h)
        rotation = quaternion_to_matrix(q)
        omega = rotation @ np.linalg.solve(inertia_body, momentum)

    position = com - rotation @ com_body
    linear = v_com - np.cross(omega, rotation @ com_body)
    _check_finite(np.concatenate([position, q, linear, omega]), "state")
    next_state = State(Pose(position, q), Twist(linear, omega))

    observation = Observation(sensed_force / cfg.substeps, sensed_torque / cfg.substeps)
    if cfg.observation_frame == "tool":
        observation = to_tool_frame(observation, next_state.pose)
    return next_state, observation, touched


def step(state: State, action: Action, scene: Scene, cfg: OracleConfig) -> Tuple[State, Observation]:
    """
    Advance the tool by one control step

    The observation is the sub-step mean of the contact wrench acting on the
    tool (about its CoM), in `cfg.observation_frame`; a body resting on a
    plane under gravity reads (0, 0, +mg).
    """
    next_state, observation, _ = step_with_contact(state, action, scene, cfg)
    return next_state, observation


# ----------------------------------------------------------------------
# Episodes
# ----------------------------------------------------------------------

def wrench_spline(rng: np.random.Generator, steps: int, cfg: OracleConfig) -> CubicSpline:
    """Cubic spline through `cfg.knots` random wrench knots over the episode"""
    times = np.linspace(0.0, max(steps - 1, 1) * cfg.dt, cfg.knots)
    scale = np.array([cfg.force_scale] * 3 + [cfg.torque_scale] * 3)
    values = rng.uniform(-1.0, 1.0, size=(cfg.knots, 6)) * scale
    if rng.random() < cfg.flip_z_probability:
        values[:, 2] = -np.abs(values[:, 2])
    return CubicSpline(times, values, axis=0)


def jittered_start(scene: Scene, rng: np.random.Generator, cfg: OracleConfig) -> Pose:
    position = scene.start_pose.position + rng.uniform(-cfg.start_jitter, cfg.start_jitter, size=3)
    orientation = scene.start_pose.orientation
    if cfg.start_jitter_rot > 0.0:
        axis = random_quaternion(rng)[1:]
        axis = axis / max(np.linalg.norm(axis), 1e-12)
        angle = rng.uniform(0.0, cfg.start_jitter_rot)
        orientation = quaternion_multiply(quaternion_from_rotvec(axis * angle), orientation)
    return Pose(position, quaternion_normalize(orientation))


def tool_shape_scene(scene: Scene, shape: Optional[str]) -> Scene:
    return scene if shape in (None, "scene") else scene.with_tool_shape(shape)


def generate_episode(scene: Scene, cfg: OracleConfig, seed: Union[int, Sequence[int]], steps: int,
                     episode: int = 0, tool_shape: Optional[str] = None, shape_id: int = 0,
                     radius: Optional[float] = None) -> List[Record]:
    """
    Simulate one random-spline episode and cut it into training records

    Args:
        scene: scene with a dynamic tool
        cfg: oracle configuration (dt, contact and episode parameters)
        seed: seed (or seed sequence) of this episode
        steps: number of control steps; yields steps - h records
        episode: episode id stored in the records
        tool_shape: optional prism shape replacing the tool mesh
        shape_id: tool shape index stored in the records
        radius: collision radius for precomputed face pairs (default geometry radius)
    """
    h = cfg.history
    if steps < h + 1:
        raise InvalidInputError(f"Episodes need at least h+1={h + 1} steps, got {steps}")
    scene = tool_shape_scene(scene, tool_shape)
    rng = np.random.default_rng(seed)
    spline = wrench_spline(rng, steps, cfg)
    state = State.at_rest(jittered_start(scene, rng, cfg))

    states, actions, observations, touched = [state], [], [], []
    for k in range(steps):
        action = Action.from_array(spline(k * cfg.dt))
        state, observation, active = step_with_contact(state, action, scene, cfg)
        states.append(state)
        actions.append(action)
        observations.append(observation)
        touched.append(active)

    collision_kwargs = {} if radius is None else {"radius": radius}
    records = []
    for t in range(h, steps):
        pose_t = states[t].pose
        contacts = detect_collisions(scene.posed_bodies(pose_t), **collision_kwargs)
        records.append(Record(
            episode=episode,
            step=t,
            poses=np.stack([states[t - k].pose.as_array() for k in range(h + 1)]),
            twist=states[t].twist.as_array(),
            action=actions[t],
            observation=observations[t],
            next_pose=states[t + 1].pose.as_array(),
            contact=touched[t],
            tool_shape=shape_id,
            contacts=tuple(pair.key for pair in contacts),
        ))
    logger.debug("Episode %d: %d records, %d with contact", episode, len(records), sum(r.contact for r in records))
    return records


def shape_names(shapes: Optional[Sequence[str]]) -> List[str]:
    """Header list of tool shapes; index 0 is always the scene's own tool"""
    names = ["scene"]
    for shape in shapes or ():
        if shape not in TOOL_SHAPES:
            raise InvalidInputError(f"Unknown tool shape '{shape}', expected one of {sorted(TOOL_SHAPES)}")
        names.append(shape)
    return names
