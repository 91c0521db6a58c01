"""
Scene Module
Loads scene description files and keeps the global vertex/face tables
shared by the oracle, the graph builder, the dataset and the MPC agent:
- Scene description (JSON) parsing with mesh files or primitives
- Global, stable vertex and face numbering across all bodies
- Posing helpers for the tool body
- Scene hashing for dataset headers
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from geometry import (BodySpec, GeometryError, TOOL_SHAPES, TriMesh, box_mesh, prism_mesh, read_mesh,
                      transform_points)
from state import DEFAULT_DT, Pose

logger = logging.getLogger(__name__)


def box_inertia(mass: float, extents) -> np.ndarray:
    """Diagonal inertia of a solid box with the given side lengths"""
    x, y, z = np.asarray(extents, dtype=np.float64)
    return np.diag([mass * (y * y + z * z) / 12.0, mass * (x * x + z * z) / 12.0, mass * (x * x + y * y) / 12.0])


@dataclass(eq=False)
class Scene:
    """A tool body plus static environment bodies"""
    bodies: Tuple[BodySpec, ...]
    name: str = "scene"
    tool_tip: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start_pose: Pose = field(default_factory=Pose.identity)
    target: Optional[Pose] = None
    insertion_axis: Optional[np.ndarray] = None
    insertion_depth: float = 0.0
    dt: float = DEFAULT_DT
    source: Optional[str] = None

    def __post_init__(self):
        self.bodies = tuple(self.bodies)
        self.tool_tip = np.asarray(self.tool_tip, dtype=np.float64).reshape(3)
        dynamic = [i for i, body in enumerate(self.bodies) if body.dynamic]
        if len(dynamic) > 1:
            names = ", ".join(self.bodies[i].name for i in dynamic)
            raise GeometryError(f"Only the tool may be dynamic; found dynamic bodies: {names}")
        self.tool: Optional[int] = dynamic[0] if dynamic else None

        # Global tables: vertices and faces numbered in body order, then mesh order
        ref, vertex_body, faces, face_body, slices = [], [], [], [], []
        offset = 0
        for b, body in enumerate(self.bodies):
            verts = body.vertices()
            ref.append(verts)
            vertex_body.append(np.full(verts.shape[0], b, dtype=np.int64))
            body_faces = body.faces() + offset
            faces.append(body_faces)
            face_body.append(np.full(body_faces.shape[0], b, dtype=np.int64))
            slices.append(slice(offset, offset + verts.shape[0]))
            offset += verts.shape[0]
        self.reference_vertices = np.concatenate(ref, axis=0) if ref else np.zeros((0, 3))
        self.vertex_body = np.concatenate(vertex_body) if vertex_body else np.zeros(0, dtype=np.int64)
        self.faces = np.concatenate(faces, axis=0) if faces else np.zeros((0, 3), dtype=np.int64)
        self.face_body = np.concatenate(face_body) if face_body else np.zeros(0, dtype=np.int64)
        self.body_slices: List[slice] = slices

        self._static_world = self.reference_vertices.copy()
        for b, body in enumerate(self.bodies):
            if not body.dynamic:
                self._static_world[slices[b]] = transform_points(body.pose, self.reference_vertices[slices[b]])

    # ------------------------------------------------------------------

    @property
    def vertex_count(self) -> int:
        return self.reference_vertices.shape[0]

    @property
    def tool_body(self) -> BodySpec:
        if self.tool is None:
            raise GeometryError(f"Scene '{self.name}' has no dynamic tool body")
        return self.bodies[self.tool]

    @property
    def tool_slice(self) -> slice:
        return self.body_slices[self.tool]

    def body_pose(self, b: int, tool_pose: Pose) -> Pose:
        return tool_pose if b == self.tool else self.bodies[b].pose

    def world_vertices(self, tool_pose: Pose) -> np.ndarray:
        """World positions of every mesh vertex for the given tool pose"""
        world = self._static_world.copy()
        if self.tool is not None:
            world[self.tool_slice] = transform_points(tool_pose, self.reference_vertices[self.tool_slice])
        return world

    def com_positions(self, tool_pose: Pose) -> np.ndarray:
        """World CoM of every body (one row per body)"""
        return np.stack([transform_points(self.body_pose(b, tool_pose), body.com)
                         for b, body in enumerate(self.bodies)], axis=0)

    def posed_bodies(self, tool_pose: Pose) -> List[Tuple[BodySpec, Pose]]:
        return [(body, self.body_pose(b, tool_pose)) for b, body in enumerate(self.bodies)]

    def tip_position(self, tool_pose: Pose) -> np.ndarray:
        return transform_points(tool_pose, self.tool_tip)

    def with_tool_shape(self, shape: str) -> "Scene":
        """Same scene with the tool mesh replaced by a prism of another shape"""
        if shape not in TOOL_SHAPES:
            raise GeometryError(f"Unknown tool shape '{shape}', expected one of {sorted(TOOL_SHAPES)}")
        tool = self.tool_body
        lo, hi = tool.vertices().min(axis=0), tool.vertices().max(axis=0)
        radius = 0.5 * float(max(hi[0] - lo[0], hi[1] - lo[1]))
        if shape == "square":
            # keep the square's side equal to the original footprint
            radius *= np.sqrt(2.0)
        mesh = prism_mesh(TOOL_SHAPES[shape], radius, float(hi[2] - lo[2]), center=0.5 * (lo + hi))
        bodies = list(self.bodies)
        bodies[self.tool] = replace(tool, meshes=(mesh,))
        return replace(self, bodies=tuple(bodies), name=f"{self.name}:{shape}")

    def to_dict(self) -> Dict:
        """Canonical content used for hashing"""
        return {
            "name": self.name,
            "dt": self.dt,
            "tool_tip": self.tool_tip.tolist(),
            "bodies": [{
                "name": body.name,
                "dynamic": body.dynamic,
                "mass": body.mass,
                "friction": body.friction,
                "com": body.com.tolist(),
                "inertia": body.inertia.tolist(),
                "pose": body.pose.as_array().tolist(),
                "meshes": [{"vertices": m.vertices.tolist(), "faces": m.faces.tolist()} for m in body.meshes],
            } for body in self.bodies],
        }


def scene_hash(scene: Scene) -> str:
    payload = json.dumps(scene.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


# ----------------------------------------------------------------------
# Scene files
# ----------------------------------------------------------------------

def _parse_pose(spec: Optional[Dict], default: Optional[Pose] = None) -> Optional[Pose]:
    if spec is None:
        return default
    return Pose(spec.get("position", [0.0, 0.0, 0.0]), spec.get("orientation", [1.0, 0.0, 0.0, 0.0]))


def _parse_mesh(spec: Dict, base_dir: Path) -> TriMesh:
    if "path" in spec:
        return read_mesh(base_dir / spec["path"]).oriented_outward()
    primitive = spec.get("primitive")
    center = spec.get("center", [0.0, 0.0, 0.0])
    if primitive == "box":
        return box_mesh(spec["size"], center=center)
    if primitive == "prism":
        return prism_mesh(int(spec["sides"]), float(spec["radius"]), float(spec["height"]), center=center)
    raise GeometryError(f"Mesh entry needs 'path' or a known 'primitive', got {spec}")


def _parse_body(spec: Dict, base_dir: Path) -> BodySpec:
    meshes = tuple(_parse_mesh(m, base_dir) for m in spec.get("meshes", []))
    mass = float(spec.get("mass", 1.0))
    if "inertia" in spec:
        inertia = np.diag(np.asarray(spec["inertia"], dtype=np.float64))
    else:
        verts = np.concatenate([m.vertices for m in meshes], axis=0) if meshes else np.ones((2, 3))
        inertia = box_inertia(mass, verts.max(axis=0) - verts.min(axis=0))
    return BodySpec(
        meshes=meshes,
        mass=mass,
        friction=float(spec.get("friction", 0.5)),
        dynamic=bool(spec.get("dynamic", False)),
        com=spec.get("com", [0.0, 0.0, 0.0]),
        inertia=inertia,
        name=spec.get("name", "body"),
        pose=_parse_pose(spec.get("pose"), Pose.identity()),
    )


def load_scene(path: Union[str, Path]) -> Scene:
    """
    Load a scene description file

    Args:
        path: JSON file listing bodies (name, dynamic, mass, friction,
              inertia diagonal, com, pose, meshes) plus tool tip, start
              pose and optional target

    Returns:
        Scene with global vertex/face tables built
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scene file not found: {path}")
    with open(path, "r") as f:
        try:
            spec = json.load(f)
        except json.JSONDecodeError as e:
            raise GeometryError(f"{path}: invalid scene file: {e}")

    bodies = tuple(_parse_body(b, path.parent) for b in spec.get("bodies", []))
    if not bodies:
        raise GeometryError(f"{path}: scene lists no bodies")
    axis = spec.get("insertion_axis")
    scene = Scene(
        bodies=bodies,
        name=spec.get("name", path.stem),
        tool_tip=spec.get("tool_tip", [0.0, 0.0, 0.0]),
        start_pose=_parse_pose(spec.get("start_pose"), Pose.identity()),
        target=_parse_pose(spec.get("target")),
        insertion_axis=None if axis is None else np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis),
        insertion_depth=float(spec.get("insertion_depth", 0.0)),
        dt=float(spec.get("dt", DEFAULT_DT)),
        source=str(path),
    )
    logger.info("Loaded scene '%s': %d bodies, %d vertices, %d faces",
                scene.name, len(scene.bodies), scene.vertex_count, scene.faces.shape[0])
    return scene
