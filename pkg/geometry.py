"""
Geometry Module
Triangle meshes, rigid posing and face-pair proximity queries including:
- TriMesh / BodySpec / ContactPair types
- Mesh text files (`v x y z` / `f i j k`, zero-based, metres)
- Convex box and prism primitives
- Exact triangle-triangle closest points
- Collision detection over posed scenes with an AABB prefilter
- Convex penetration queries for the penalty-contact oracle
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import ConvexHull

from state import Pose

logger = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
DEFAULT_COLLISION_RADIUS = 0.01


class GeometryError(ValueError):
    """Raised for degenerate or malformed geometry"""


# ----------------------------------------------------------------------
# Types
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3) body frame, metres
    faces: np.ndarray     # (F, 3) zero-based vertex indices

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.shape[0] == 0:
            raise GeometryError("Mesh needs at least one face")
        if faces.min() < 0 or faces.max() >= vertices.shape[0]:
            raise GeometryError(f"Face index out of range for {vertices.shape[0]} vertices")
        if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
            raise GeometryError("Every face needs three distinct vertex indices")
        tris = vertices[faces]
        areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
        if np.any(areas <= MIN_FACE_AREA):
            bad = int(np.argmin(areas))
            raise GeometryError(f"Face {bad} is degenerate (area {areas[bad]:.3e} m^2)")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    def signed_volume(self) -> float:
        tris = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tris[:, 0], np.cross(tris[:, 1], tris[:, 2])).sum() / 6.0)

    def oriented_outward(self) -> "TriMesh":
        """Flip the winding of a closed mesh whose normals point inwards"""
        if self.signed_volume() < 0.0:
            return TriMesh(self.vertices, self.faces[:, ::-1].copy())
        return self


@dataclass(frozen=True, eq=False)
class BodySpec:
    meshes: Tuple[TriMesh, ...]
    mass: float
    friction: float
    dynamic: bool
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inertia: np.ndarray = field(default_factory=lambda: np.eye(3) * 1e-4)
    name: str = "body"
    pose: Pose = field(default_factory=Pose.identity)  # fixed world pose of static bodies

    def __post_init__(self):
        meshes = tuple(self.meshes)
        if not meshes:
            raise GeometryError(f"Body '{self.name}' has no meshes")
        if not self.mass > 0.0:
            raise GeometryError(f"Body '{self.name}' mass must be positive, got {self.mass}")
        if self.friction < 0.0:
            raise GeometryError(f"Body '{self.name}' friction must be non-negative, got {self.friction}")
        inertia = np.asarray(self.inertia, dtype=np.float64).reshape(3, 3)
        if not np.allclose(inertia, inertia.T, atol=1e-12) or np.any(np.linalg.eigvalsh(inertia) <= 0.0):
            raise GeometryError(f"Body '{self.name}' inertia must be symmetric positive-definite")
        object.__setattr__(self, "meshes", meshes)
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "com", np.asarray(self.com, dtype=np.float64).reshape(3))
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "friction", float(self.friction))
        object.__setattr__(self, "dynamic", bool(self.dynamic))

    @property
    def vertex_count(self) -> int:
        return sum(mesh.vertex_count for mesh in self.meshes)

    @property
    def face_count(self) -> int:
        return sum(mesh.face_count for mesh in self.meshes)

    def vertices(self) -> np.ndarray:
        """All mesh vertices of the body, body frame, in mesh order"""
        return np.concatenate([mesh.vertices for mesh in self.meshes], axis=0)

    def faces(self) -> np.ndarray:
        """All faces with indices into `vertices()`"""
        out, offset = [], 0
        for mesh in self.meshes:
            out.append(mesh.faces + offset)
            offset += mesh.vertex_count
        return np.concatenate(out, axis=0)

    def attributes(self) -> np.ndarray:
        """Static node attributes [mass, friction, dynamic flag]"""
        return np.array([self.mass, self.friction, 1.0 if self.dynamic else 0.0])


@dataclass(frozen=True, eq=False)
class ContactPair:
    sender_face: int
    receiver_face: int
    sender_body: int
    receiver_body: int
    sender_vertices: Tuple[int, int, int]    # global vertex ids, winding order
    receiver_vertices: Tuple[int, int, int]
    p_s: np.ndarray
    p_r: np.ndarray
    n_s: np.ndarray
    n_r: np.ndarray
    distance: float

    @property
    def key(self) -> Tuple[int, int]:
        return (self.sender_face, self.receiver_face)


# ----------------------------------------------------------------------
# Mesh files and primitives
# ----------------------------------------------------------------------

def read_mesh(path: Union[str, Path]) -> TriMesh:
    """Read a `v x y z` / `f i j k` text mesh (zero-based indices)"""
    vertices, faces = [], []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(x) for x in parts[1:4]])
                else:
                    raise GeometryError(f"{path}:{line_no}: unknown record '{parts[0]}'")
            except ValueError as e:
                raise GeometryError(f"{path}:{line_no}: {e}")
    if not vertices:
        raise GeometryError(f"{path}: no vertices")
    return TriMesh(np.array(vertices), np.array(faces))


def convex_hull_mesh(points) -> TriMesh:
    """Triangulated convex hull with outward-facing winding"""
    points = np.asarray(points, dtype=np.float64)
    hull = ConvexHull(points)
    centroid = points[hull.vertices].mean(axis=0)
    used = np.unique(hull.simplices)
    remap = {int(old): new for new, old in enumerate(used)}
    faces = []
    for simplex in hull.simplices:
        a, b, c = points[simplex]
        if np.dot(np.cross(b - a, c - a), (a + b + c) / 3.0 - centroid) < 0.0:
            simplex = simplex[[0, 2, 1]]
        faces.append([remap[int(i)] for i in simplex])
    return TriMesh(points[used], np.array(faces))


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriMesh:
    half = 0.5 * np.asarray(size, dtype=np.float64)
    corners = np.array([[x, y, z] for z in (-1, 1) for y in (-1, 1) for x in (-1, 1)], dtype=np.float64)
    return convex_hull_mesh(corners * half + np.asarray(center, dtype=np.float64))


def prism_mesh(sides: int, radius: float, height: float, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Regular prism along z (triangle, square, hexagon tools)"""
    if sides < 3:
        raise GeometryError(f"Prism needs at least 3 sides, got {sides}")
    angles = 2.0 * np.pi * np.arange(sides) / sides + np.pi / sides
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    bottom = np.column_stack([ring, np.full(sides, -0.5 * height)])
    top = np.column_stack([ring, np.full(sides, 0.5 * height)])
    return convex_hull_mesh(np.vstack([bottom, top]) + np.asarray(center, dtype=np.float64))


TOOL_SHAPES = {"triangle": 3, "square": 4, "hexagon": 6}


# ----------------------------------------------------------------------
# Posing and normals
# ----------------------------------------------------------------------

def transform_points(pose: Union[Pose, Sequence[float]], points) -> np.ndarray:
    """Pose body-frame points into the world frame: R(q) p + t"""
    if not isinstance(pose, Pose):
        pose = Pose.from_array(pose)
    return pose.apply(np.asarray(points, dtype=np.float64))


def face_normal(tri) -> np.ndarray:
    """Unit normal following the right-hand rule over the face winding"""
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    norm = np.linalg.norm(n)
    if 0.5 * norm <= MIN_FACE_AREA:
        raise GeometryError(f"Degenerate triangle (area {0.5 * norm:.3e} m^2)")
    return n / norm


# ----------------------------------------------------------------------
# Closest points
# ----------------------------------------------------------------------

def closest_point_on_triangle(p, a, b, c) -> np.ndarray:
    """Closest point to p on triangle abc (Voronoi-region walk)"""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.dot(ab, ap), np.dot(ac, ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy()

    bp = p - b
    d3, d4 = np.dot(ab, bp), np.dot(ac, bp)
    if d3 >= 0.0 and d4 <= d3:
        return b.copy()

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + (d1 / (d1 - d3)) * ab

    cp = p - c
    d5, d6 = np.dot(ab, cp), np.dot(ac, cp)
    if d6 >= 0.0 and d5 <= d6:
        return c.copy()

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + (d2 / (d2 - d6)) * ac

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b)

    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


def closest_points_segments(p1, q1, p2, q2) -> Tuple[np.ndarray, np.ndarray]:
    """Closest points between segments p1q1 and p2q2"""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = np.dot(d1, d1), np.dot(d2, d2), np.dot(d2, r)
    c = np.dot(d1, r)
    b = np.dot(d1, d2)
    denom = a * e - b * b

    # parallel segments fall back to s = 0 and are clamped below
    s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-18 * a * e else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t = 1.0
        s = np.clip((b - c) / a, 0.0, 1.0)
    return p1 + d1 * s, p2 + d2 * t


def segment_triangle_intersection(p, q, a, b, c) -> Optional[np.ndarray]:
    """Point where segment pq pierces triangle abc, if any (non-coplanar case)"""
    n = np.cross(b - a, c - a)
    dp, dq = np.dot(n, p - a), np.dot(n, q - a)
    if dp * dq > 0.0 or dp == dq:
        return None
    x = p + (dp / (dp - dq)) * (q - p)
    scale = np.dot(n, n)
    for u, v in ((a, b), (b, c), (c, a)):
        if np.dot(np.cross(v - u, x - u), n) < -1e-12 * scale:
            return None
    return x


def closest_point_triangles(tri_a, tri_b) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Exact closest points between two triangles

    Candidates are enumerated in a fixed order: the 9 edge-edge pairs,
    the vertices of the first triangle against the second, the vertices
    of the second against the first, then the piercing edges in the same
    order. The first candidate achieving the minimum wins ties. The
    triangles are taken in lexicographic order of their coordinates, so
    swapping the arguments swaps the witnesses.

    Returns:
        (p_a on tri_a, p_b on tri_b, distance)
    """
    A = np.asarray(tri_a, dtype=np.float64).reshape(3, 3)
    B = np.asarray(tri_b, dtype=np.float64).reshape(3, 3)
    face_normal(A)
    face_normal(B)
    if tuple(B.ravel()) < tuple(A.ravel()):
        p_b, p_a, distance = _closest_point_triangles(B, A)
        return p_a, p_b, distance
    return _closest_point_triangles(A, B)


def _closest_point_triangles(A: np.ndarray, B: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    best: Optional[Tuple[np.ndarray, np.ndarray, float]] = None

    def consider(pa, pb):
        nonlocal best
        d = float(np.linalg.norm(pb - pa))
        if best is None or d < best[2]:
            best = (pa, pb, d)

    edges = ((0, 1), (1, 2), (2, 0))
    for i, j in edges:
        for k, m in edges:
            consider(*closest_points_segments(A[i], A[j], B[k], B[m]))
    for v in A:
        consider(v.copy(), closest_point_on_triangle(v, B[0], B[1], B[2]))
    for v in B:
        consider(closest_point_on_triangle(v, A[0], A[1], A[2]), v.copy())
    if best[2] > 0.0:
        for i, j in edges:
            x = segment_triangle_intersection(A[i], A[j], B[0], B[1], B[2])
            if x is not None:
                consider(x, x.copy())
        for i, j in edges:
            x = segment_triangle_intersection(B[i], B[j], A[0], A[1], A[2])
            if x is not None:
                consider(x.copy(), x)
    return best


# ----------------------------------------------------------------------
# Collision detection
# ----------------------------------------------------------------------

def _face_aabbs(tris: np.ndarray, margin: float) -> Tuple[np.ndarray, np.ndarray]:
    return tris.min(axis=1) - margin, tris.max(axis=1) + margin


def detect_collisions(scene: Sequence[Tuple[BodySpec, Pose]], radius: float = DEFAULT_COLLISION_RADIUS,
                      prefilter: bool = True) -> List[ContactPair]:
    """
    Inter-body face pairs whose closest-point distance is within `radius`

    Faces and vertices are numbered globally in body order, then mesh order.
    The body with the lower index is the sender. Results are sorted by
    (sender body, receiver body, sender face, receiver face).
    """
    if radius <= 0.0:
        raise GeometryError(f"Collision radius must be positive, got {radius}")
    if not scene:
        return []

    world_tris, face_ids, vertex_ids = [], [], []
    face_offset = vertex_offset = 0
    for body, pose in scene:
        faces = body.faces()
        world = transform_points(pose, body.vertices())
        world_tris.append(world[faces])
        face_ids.append(face_offset + np.arange(faces.shape[0]))
        vertex_ids.append(faces + vertex_offset)
        face_offset += faces.shape[0]
        vertex_offset += body.vertex_count

    pairs: List[ContactPair] = []
    for s in range(len(scene)):
        for r in range(s + 1, len(scene)):
            tris_s, tris_r = world_tris[s], world_tris[r]
            if prefilter:
                lo_s, hi_s = _face_aabbs(tris_s, 0.5 * radius)
                lo_r, hi_r = _face_aabbs(tris_r, 0.5 * radius)
                overlap = np.all((lo_s[:, None, :] <= hi_r[None, :, :]) &
                                 (lo_r[None, :, :] <= hi_s[:, None, :]), axis=2)
                candidates = np.argwhere(overlap)
            else:
                candidates = np.argwhere(np.ones((tris_s.shape[0], tris_r.shape[0]), dtype=bool))
            for i, j in candidates:
                p_s, p_r, distance = closest_point_triangles(tris_s[i], tris_r[j])
                if distance <= radius:
                    pairs.append(ContactPair(
                        sender_face=int(face_ids[s][i]),
                        receiver_face=int(face_ids[r][j]),
                        sender_body=s,
                        receiver_body=r,
                        sender_vertices=tuple(int(v) for v in vertex_ids[s][i]),
                        receiver_vertices=tuple(int(v) for v in vertex_ids[r][j]),
                        p_s=p_s,
                        p_r=p_r,
                        n_s=face_normal(tris_s[i]),
                        n_r=face_normal(tris_r[j]),
                        distance=distance,
                    ))
    return pairs


def contact_pair_from_faces(world_vertices: np.ndarray, faces: np.ndarray, face_body: np.ndarray,
                            sender_face: int, receiver_face: int) -> ContactPair:
    """Recompute the closest-point geometry of a known face pair"""
    tri_s = world_vertices[faces[sender_face]]
    tri_r = world_vertices[faces[receiver_face]]
    p_s, p_r, distance = closest_point_triangles(tri_s, tri_r)
    return ContactPair(
        sender_face=int(sender_face),
        receiver_face=int(receiver_face),
        sender_body=int(face_body[sender_face]),
        receiver_body=int(face_body[receiver_face]),
        sender_vertices=tuple(int(v) for v in faces[sender_face]),
        receiver_vertices=tuple(int(v) for v in faces[receiver_face]),
        p_s=p_s,
        p_r=p_r,
        n_s=face_normal(tri_s),
        n_r=face_normal(tri_r),
        distance=distance,
    )


# ----------------------------------------------------------------------
# Convex penetration (oracle contact)
# ----------------------------------------------------------------------

def aabb_overlap(points_a: np.ndarray, points_b: np.ndarray, margin: float = 0.0) -> bool:
    lo_a, hi_a = points_a.min(axis=0) - margin, points_a.max(axis=0) + margin
    lo_b, hi_b = points_b.min(axis=0), points_b.max(axis=0)
    return bool(np.all(lo_a <= hi_b) and np.all(lo_b <= hi_a))


def convex_penetration(points: np.ndarray, world_vertices: np.ndarray, faces: np.ndarray
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Penetration depth of points inside a closed, outward-wound convex mesh

    Returns:
        depth (N,) positive inside, <= 0 outside; normal (N, 3) outward
        normal of the face plane the point is closest to
    """
    depth, nearest, normals = nearest_face_planes(points, world_vertices, faces)
    return depth, normals[nearest]


def nearest_face_planes(points: np.ndarray, world_vertices: np.ndarray, faces: np.ndarray
                        ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(depth (N,), index of the nearest face plane (N,), unit face normals (F, 3))"""
    tris = world_vertices[faces]
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("fj,fj->f", normals, tris[:, 0])
    signed = points @ normals.T - offsets[None, :]      # (N, F), > 0 outside a plane
    nearest = np.argmax(signed, axis=1)
    depth = -signed[np.arange(points.shape[0]), nearest]
    return depth, nearest, normals
