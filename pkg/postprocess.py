"""
Post-processing of network outputs into the next tool state:
integration of vertex accelerations, rigid pose recovery by point
alignment, and velocity reconstruction from consecutive poses.
"""

import logging
from typing import Tuple

import numpy as np

from geometry import GeometryError
from state import Pose, Twist, quaternion_inverse, quaternion_multiply, quaternion_to_rotvec
from tensor_core import ContractError, ShapeError

logger = logging.getLogger(__name__)

COLLINEAR_TOLERANCE = 1e-12


def integrate_vertices(acc, p_t, p_prev) -> np.ndarray:
    """p_{t+1} = a + 2 p_t - p_{t-1}, accelerations in position-delta units"""
    acc, p_t, p_prev = (np.asarray(x, dtype=np.float64) for x in (acc, p_t, p_prev))
    if not acc.shape == p_t.shape == p_prev.shape:
        raise ShapeError(f"Vertex counts differ: acc {acc.shape}, p_t {p_t.shape}, p_prev {p_prev.shape}")
    return acc + 2.0 * p_t - p_prev


def align_pose(predicted, reference) -> Pose:
    """
    Rigid transform taking body-frame `reference` points onto `predicted`

    Least-squares rotation and translation (no scaling); reflections are
    rejected by flipping the weakest singular direction.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape or predicted.ndim != 2 or predicted.shape[1] != 3:
        raise ShapeError(f"Point sets must both be (N, 3), got {predicted.shape} and {reference.shape}")
    if predicted.shape[0] < 3:
        raise GeometryError(f"Alignment needs at least 3 points, got {predicted.shape[0]}")

    ref_center = reference.mean(axis=0)
    pred_center = predicted.mean(axis=0)
    ref_c = reference - ref_center
    pred_c = predicted - pred_center
    spread = np.linalg.svd(ref_c, compute_uv=False)
    if spread.size < 2 or spread[1] <= COLLINEAR_TOLERANCE * max(spread[0], 1.0):
        raise GeometryError("Alignment points are collinear")

    u, _, vt = np.linalg.svd(pred_c.T @ ref_c)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0.0:
        d = 1.0
    rotation = u @ np.diag([1.0, 1.0, d]) @ vt
    translation = pred_center - rotation @ ref_center
    return Pose.from_matrix(rotation, translation)


def reconstruct_velocity(next_pose: Pose, pose: Pose, dt: float) -> Twist:
    """World-frame twist carrying `pose` to `next_pose` over dt"""
    if not dt > 0.0:
        raise ContractError(f"Time step must be positive, got {dt}")
    linear = (next_pose.position - pose.position) / dt
    relative = quaternion_multiply(next_pose.orientation, quaternion_inverse(pose.orientation))
    return Twist(linear, quaternion_to_rotvec(relative) / dt)


def next_tool_state(acc: np.ndarray, p_t: np.ndarray, p_prev: np.ndarray, reference: np.ndarray,
                    pose: Pose, dt: float) -> Tuple[Pose, Twist]:
    """Integrate tool vertex accelerations and recover the next pose and twist"""
    predicted = integrate_vertices(acc, p_t, p_prev)
    next_pose = align_pose(predicted, reference)
    return next_pose, reconstruct_velocity(next_pose, pose, dt)
