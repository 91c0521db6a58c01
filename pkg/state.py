"""
State Module
Maximal-coordinate tool state and the wrench types shared by every module:
- Pose / Twist / State value types (world frame)
- Action and Observation wrenches
- StateHistory windows, newest frame first
- Quaternion math (Hamilton convention, scalar-first storage)
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

QUAT_TOLERANCE = 1e-6
DEFAULT_HISTORY = 3
DEFAULT_DT = 0.002  # 500 Hz control rate

IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])


class InvalidPoseError(ValueError):
    """Raised for poses whose orientation is not a unit quaternion"""


class InvalidInputError(ValueError):
    """Raised for zero or non-finite quaternions and vectors"""


def as_vector(values, size: int, name: str = "vector") -> np.ndarray:
    """Convert to a finite float64 vector of the given size"""
    array = np.asarray(values, dtype=np.float64).reshape(-1)
    if array.shape[0] != size:
        raise InvalidInputError(f"{name} must have {size} components, got {array.shape[0]}")
    if not np.all(np.isfinite(array)):
        raise InvalidInputError(f"{name} has non-finite components: {array}")
    return array


# ----------------------------------------------------------------------
# Quaternion helpers
# ----------------------------------------------------------------------

def quaternion_normalize(q) -> np.ndarray:
    q = as_vector(q, 4, "quaternion")
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise InvalidInputError("Zero quaternion has no rotation")
    return q / norm


def canonicalize(q) -> np.ndarray:
    """Flip sign so that w >= 0; R(q) == R(-q)"""
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0.0 else q.copy()


def quaternion_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b"""
    w1, x1, y1, z1 = as_vector(a, 4, "quaternion")
    w2, x2, y2, z2 = as_vector(b, 4, "quaternion")
    if not (np.any(a) and np.any(b)):
        raise InvalidInputError("Zero quaternion has no rotation")
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quaternion_inverse(q) -> np.ndarray:
    q = as_vector(q, 4, "quaternion")
    norm_sq = float(np.dot(q, q))
    if norm_sq < 1e-24:
        raise InvalidInputError("Zero quaternion has no inverse")
    return np.array([q[0], -q[1], -q[2], -q[3]]) / norm_sq


def quaternion_to_axis_angle(q) -> Tuple[np.ndarray, float]:
    """
    Axis-angle of a rotation quaternion

    Returns:
        (unit axis, angle in [0, pi]); the axis is x for the identity
    """
    q = canonicalize(quaternion_normalize(q))
    vec_norm = float(np.linalg.norm(q[1:]))
    angle = 2.0 * np.arctan2(vec_norm, q[0])
    if vec_norm < 1e-15:
        return np.array([1.0, 0.0, 0.0]), 0.0
    return q[1:] / vec_norm, float(angle)


def quaternion_to_rotvec(q) -> np.ndarray:
    axis, angle = quaternion_to_axis_angle(q)
    return axis * angle


def quaternion_angle(q) -> float:
    return quaternion_to_axis_angle(q)[1]


def quaternion_from_rotvec(rotvec) -> np.ndarray:
    """Quaternion exponential of a rotation vector"""
    rotvec = as_vector(rotvec, 3, "rotation vector")
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-15:
        return IDENTITY_QUATERNION.copy()
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * rotvec / angle])


def quaternion_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = as_vector(axis, 3, "axis")
    return quaternion_from_rotvec(axis / np.linalg.norm(axis) * angle)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = quaternion_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(matrix) -> np.ndarray:
    """Rotation matrix to canonical scalar-first quaternion"""
    x, y, z, w = Rotation.from_matrix(np.asarray(matrix, dtype=np.float64)).as_quat()
    return canonicalize(np.array([w, x, y, z]))


def rotate_vectors(q, vectors) -> np.ndarray:
    """Rotate one (3,) or many (N, 3) vectors by q"""
    vectors = np.asarray(vectors, dtype=np.float64)
    return vectors @ quaternion_to_matrix(q).T


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized 4-D Gaussian sample"""
    while True:
        q = rng.standard_normal(4)
        norm = np.linalg.norm(q)
        if norm > 1e-9:
            return canonicalize(q / norm)


# ----------------------------------------------------------------------
# Value types
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    position: np.ndarray
    orientation: np.ndarray  # (w, x, y, z)

    def __post_init__(self):
        position = as_vector(self.position, 3, "position")
        orientation = np.asarray(self.orientation, dtype=np.float64).reshape(-1)
        if orientation.shape[0] != 4 or not np.all(np.isfinite(orientation)):
            raise InvalidPoseError(f"Orientation must be a finite 4-vector, got {orientation}")
        norm = float(np.linalg.norm(orientation))
        if abs(norm - 1.0) > QUAT_TOLERANCE:
            raise InvalidPoseError(f"Orientation quaternion norm {norm:.9f} is not 1 within {QUAT_TOLERANCE}")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "orientation", canonicalize(orientation / norm))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), IDENTITY_QUATERNION.copy())

    @classmethod
    def from_array(cls, values) -> "Pose":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != 7:
            raise InvalidPoseError(f"Pose array must have 7 components, got {values.shape[0]}")
        return cls(values[:3], values[3:])

    @classmethod
    def from_matrix(cls, rotation, translation) -> "Pose":
        return cls(translation, matrix_to_quaternion(rotation))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def rotation_matrix(self) -> np.ndarray:
        return quaternion_to_matrix(self.orientation)

    def inverse(self) -> "Pose":
        q_inv = quaternion_inverse(self.orientation)
        return Pose(-rotate_vectors(q_inv, self.position), q_inv)

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply other first)"""
        return Pose(
            self.position + rotate_vectors(self.orientation, other.position),
            quaternion_normalize(quaternion_multiply(self.orientation, other.orientation)),
        )

    def apply(self, points) -> np.ndarray:
        return rotate_vectors(self.orientation, points) + self.position

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        relative = quaternion_multiply(quaternion_inverse(self.orientation), other.orientation)
        return (np.allclose(self.position, other.position, atol=atol)
                and quaternion_angle(relative) <= atol)

    def __repr__(self):
        return f"Pose(position={self.position.tolist()}, orientation={self.orientation.tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", as_vector(self.linear, 3, "linear velocity"))
        object.__setattr__(self, "angular", as_vector(self.angular, 3, "angular velocity"))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_array(cls, values) -> "Twist":
        values = as_vector(values, 6, "twist")
        return cls(values[:3], values[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


@dataclass(frozen=True, eq=False)
class State:
    pose: Pose
    twist: Twist

    @classmethod
    def at_rest(cls, pose: Pose) -> "State":
        return cls(pose, Twist.zero())

    @classmethod
    def from_array(cls, values) -> "State":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(Pose.from_array(values[:7]), Twist.from_array(values[7:13]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.pose.as_array(), self.twist.as_array()])


@dataclass(frozen=True, eq=False)
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", as_vector(self.force, 3, "force"))
        object.__setattr__(self, "torque", as_vector(self.torque, 3, "torque"))

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_array(cls, values):
        values = as_vector(values, 6, "wrench")
        return cls(values[:3], values[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    def rotated(self, q):
        return type(self)(rotate_vectors(q, self.force), rotate_vectors(q, self.torque))


class Action(Wrench):
    """Applied wrench on the tool, world frame"""


class Observation(Wrench):
    """Force-torque reading of the tool"""


def to_tool_frame(wrench: Wrench, pose: Pose) -> Wrench:
    return wrench.rotated(quaternion_inverse(pose.orientation))


def to_world_frame(wrench: Wrench, pose: Pose) -> Wrench:
    return wrench.rotated(pose.orientation)


def integrate_pose(pose: Pose, twist: Twist, dt: float) -> Pose:
    """Advance a pose by a world-frame twist over dt (quaternion exponential)"""
    dq = quaternion_from_rotvec(twist.angular * dt)
    return Pose(pose.position + twist.linear * dt,
                quaternion_normalize(quaternion_multiply(dq, pose.orientation)))


@dataclass(frozen=True, eq=False)
class StateHistory:
    """
    Window of the last h tool states, newest first

    `preceding` is the pose one step before the oldest frame; it supplies
    the h-th position difference. When absent it is recovered by stepping
    the oldest state backwards along its twist. `length` declares h; the
    window must hold exactly that many frames.
    """
    frames: Tuple[State, ...]
    preceding: Optional[Pose] = None
    length: Optional[int] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        length = len(frames) if self.length is None else int(self.length)
        if length < 1:
            raise InvalidInputError(f"State history needs at least one frame, got h={length}")
        if len(frames) != length:
            raise InvalidInputError(f"State history declares h={length} but holds {len(frames)} frames")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "length", length)

    @property
    def h(self) -> int:
        return self.length

    @property
    def current(self) -> State:
        return self.frames[0]

    @classmethod
    def constant(cls, state: State, h: int = DEFAULT_HISTORY) -> "StateHistory":
        """History of a body that has been sitting in `state` (at rest)"""
        if h < 1:
            raise InvalidInputError(f"State history needs at least one frame, got h={h}")
        rest = State.at_rest(state.pose)
        return cls(tuple([state] + [rest] * (h - 1)), state.pose, h)

    def pose_frames(self, dt: float = DEFAULT_DT) -> List[Pose]:
        """The h+1 poses (newest first) needed for h position differences"""
        poses = [frame.pose for frame in self.frames]
        if self.preceding is not None:
            return poses + [self.preceding]
        oldest = self.frames[-1]
        reverse = Twist(-oldest.twist.linear, -oldest.twist.angular)
        return poses + [integrate_pose(oldest.pose, reverse, dt)]

    def push(self, state: State) -> "StateHistory":
        """Slide the window forward; the dropped frame becomes `preceding`"""
        return StateHistory((state,) + self.frames[:-1], self.frames[-1].pose, self.length)


def history_from_poses(poses: Sequence[Pose], dt: float, h: Optional[int] = None) -> StateHistory:
    """
    Build a history from h+1 poses (newest first), recovering each twist by
    finite differences against the next older pose
    """
    if len(poses) < 2:
        raise InvalidInputError("Need at least two poses to recover velocities")
    if h is not None and len(poses) != h + 1:
        raise InvalidInputError(f"A history of h={h} needs {h + 1} poses, got {len(poses)}")
    states = []
    for newer, older in zip(poses[:-1], poses[1:]):
        linear = (newer.position - older.position) / dt
        relative = quaternion_multiply(newer.orientation, quaternion_inverse(older.orientation))
        states.append(State(newer, Twist(linear, quaternion_to_rotvec(relative) / dt)))
    return StateHistory(tuple(states), poses[-1], len(states))
