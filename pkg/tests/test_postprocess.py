import numpy as np
import pytest

from geometry import GeometryError, box_mesh
from postprocess import align_pose, integrate_vertices, next_tool_state, reconstruct_velocity
from state import Pose, Twist, integrate_pose, quaternion_from_rotvec, random_quaternion
from tensor_core import ContractError, ShapeError


def test_integrate_vertices():
    p_prev = np.zeros((2, 3))
    p_t = np.full((2, 3), 0.1)
    acc = np.full((2, 3), 0.01)
    np.testing.assert_allclose(integrate_vertices(acc, p_t, p_prev), np.full((2, 3), 0.21))
    with pytest.raises(ShapeError):
        integrate_vertices(np.zeros((3, 3)), p_t, p_prev)


def test_align_pose_recovers_random_transforms(rng):
    reference = box_mesh([0.02, 0.03, 0.04]).vertices
    worst = 0.0
    for _ in range(1000):
        pose = Pose(rng.uniform(-1.0, 1.0, size=3), random_quaternion(rng))
        recovered = align_pose(pose.apply(reference), reference)
        worst = max(worst, np.abs(recovered.apply(reference) - pose.apply(reference)).max())
    assert worst < 1e-9


def test_align_pose_never_reflects():
    reference = box_mesh([0.02, 0.03, 0.04]).vertices
    mirrored = reference * np.array([1.0, 1.0, -1.0])
    pose = align_pose(mirrored, reference)
    assert np.linalg.det(pose.rotation_matrix()) == pytest.approx(1.0)


def test_align_pose_rejects_degenerate_points():
    line = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(GeometryError):
        align_pose(line, line)
    with pytest.raises(GeometryError):
        align_pose(line[:2], line[:2])
    with pytest.raises(ShapeError):
        align_pose(line, line[:, :2])


def test_reconstruct_velocity():
    twist = Twist(np.array([0.1, -0.2, 0.0]), np.array([0.0, 0.5, 1.0]))
    pose = Pose(np.array([0.0, 0.0, 0.1]), quaternion_from_rotvec([0.2, 0.0, 0.0]))
    dt = 0.002
    recovered = reconstruct_velocity(integrate_pose(pose, twist, dt), pose, dt)
    np.testing.assert_allclose(recovered.linear, twist.linear, atol=1e-9)
    np.testing.assert_allclose(recovered.angular, twist.angular, atol=1e-9)
    with pytest.raises(ContractError):
        reconstruct_velocity(pose, pose, 0.0)


def test_next_tool_state_when_stationary():
    reference = box_mesh([0.02, 0.02, 0.04]).vertices
    pose = Pose(np.array([0.01, 0.0, 0.05]), quaternion_from_rotvec([0.0, 0.0, 0.3]))
    points = pose.apply(reference)
    next_pose, twist = next_tool_state(np.zeros_like(points), points, points, reference, pose, 0.002)
    assert next_pose.allclose(pose, atol=1e-9)
    np.testing.assert_allclose(twist.as_array(), np.zeros(6), atol=1e-6)
