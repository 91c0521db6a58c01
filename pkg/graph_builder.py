"""
Graph Builder Module
Builds the heterogeneous input graph from a state history, the applied
wrench and the scene:
- Mesh, object and world node features
- Object-mesh, world-mesh and mesh-mesh (face contact) edge features
- Whole-graph assembly and batching of several graphs

World nodes come in pairs per body: node 2b applies force, node 2b + 1
applies torque. Their one-hot features are two-dimensional; the two
types only need to be distinct.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch_geometric.data import Batch, HeteroData
from torch_geometric.data.storage import EdgeStorage, NodeStorage

from geometry import ContactPair, DEFAULT_COLLISION_RADIUS, contact_pair_from_faces, detect_collisions
from scene import Scene
from state import Action, DEFAULT_DT, StateHistory

logger = logging.getLogger(__name__)

MESH_MESH = "mesh_mesh"
MESH_MESH_REVERSE = "mesh_mesh_reverse"
OBJECT_MESH = "object_mesh"
MESH_OBJECT = "mesh_object"
WORLD_MESH_FORCE = "world_mesh_force"
WORLD_MESH_TORQUE = "world_mesh_torque"
MESH_WORLD_FORCE = "mesh_world_force"
MESH_WORLD_TORQUE = "mesh_world_torque"

# Both mesh-mesh halves belong to the same M<->M relation type
RELATIONS = (MESH_MESH, MESH_MESH_REVERSE, OBJECT_MESH, MESH_OBJECT,
             WORLD_MESH_FORCE, WORLD_MESH_TORQUE, MESH_WORLD_FORCE, MESH_WORLD_TORQUE)

EDGE_WIDTHS = {
    MESH_MESH: 27,
    MESH_MESH_REVERSE: 27,
    OBJECT_MESH: 4,
    MESH_OBJECT: 4,
    WORLD_MESH_FORCE: 4,
    WORLD_MESH_TORQUE: 8,
    MESH_WORLD_FORCE: 4,
    MESH_WORLD_TORQUE: 8,
}

# (sender node type, receiver node type)
RELATION_ENDPOINTS = {
    MESH_MESH: ("mesh", "mesh"),
    MESH_MESH_REVERSE: ("mesh", "mesh"),
    OBJECT_MESH: ("object", "mesh"),
    MESH_OBJECT: ("mesh", "object"),
    WORLD_MESH_FORCE: ("world", "mesh"),
    WORLD_MESH_TORQUE: ("world", "mesh"),
    MESH_WORLD_FORCE: ("mesh", "world"),
    MESH_WORLD_TORQUE: ("mesh", "world"),
}

# PyG edge types: (sender node type, relation, receiver node type)
EDGE_TYPES = {name: (sender, name, receiver) for name, (sender, receiver) in RELATION_ENDPOINTS.items()}

WORLD_NODE_WIDTH = 2


def node_width(h: int) -> int:
    return 3 * h + 3


class GraphError(ValueError):
    """Raised for malformed graph inputs or invalid scenes"""


class WorldKind(Enum):
    FORCE = "force"
    TORQUE = "torque"


class Direction(Enum):
    TO_MESH = "to_mesh"      # world -> mesh, object -> mesh
    FROM_MESH = "from_mesh"  # mesh -> world, mesh -> object


@dataclass(eq=False)
class EdgeSet:
    senders: np.ndarray    # (E,) or (E, 3) for mesh-mesh
    receivers: np.ndarray  # (E,) or (E, 3) for mesh-mesh
    features: np.ndarray   # (E, d)

    @property
    def count(self) -> int:
        return self.features.shape[0]


class ContactGraphData(HeteroData):
    """
    PyG container of one scene graph

    Edge stores keep `senders` / `receivers` columns instead of an
    `edge_index`, because a face contact connects two vertex triples.
    Batching offsets both by the node count of their endpoint type.
    """

    def __inc__(self, key: str, value: Any, store: Optional[Union[NodeStorage, EdgeStorage]] = None,
                *args, **kwargs) -> Any:
        if isinstance(store, EdgeStorage) and key in ("senders", "receivers"):
            sender_type, _, receiver_type = store._key
            return self[sender_type if key == "senders" else receiver_type].num_nodes
        return super().__inc__(key, value, store, *args, **kwargs)


@dataclass(eq=False)
class HeteroGraph:
    """Input graph of one scene as built from the geometry (numpy)"""
    mesh_nodes: np.ndarray
    object_nodes: np.ndarray
    world_nodes: np.ndarray
    edges: Dict[str, EdgeSet]
    dynamic_vertices: np.ndarray   # (N_M,) bool
    tool_vertices: np.ndarray      # (N_M,) bool
    contact_pairs: int = 0

    @property
    def node_counts(self) -> Dict[str, int]:
        return {"mesh": self.mesh_nodes.shape[0], "object": self.object_nodes.shape[0],
                "world": self.world_nodes.shape[0]}

    def validate(self):
        counts = self.node_counts
        for name, edge_set in self.edges.items():
            if edge_set.features.shape[1] != EDGE_WIDTHS[name]:
                raise GraphError(f"{name} features have width {edge_set.features.shape[1]}, "
                                 f"expected {EDGE_WIDTHS[name]}")
            sender_type, receiver_type = RELATION_ENDPOINTS[name]
            for indices, node_type in ((edge_set.senders, sender_type), (edge_set.receivers, receiver_type)):
                if indices.size and (indices.min() < 0 or indices.max() >= counts[node_type]):
                    raise GraphError(f"{name} references a {node_type} node outside 0..{counts[node_type] - 1}")
        if self.world_nodes.shape[0] != 2 * self.object_nodes.shape[0]:
            raise GraphError("Each body needs exactly one force and one torque world node")

    def to_text(self) -> str:
        """Structured debug dump"""
        return json.dumps({
            "nodes": {"mesh": self.mesh_nodes.tolist(), "object": self.object_nodes.tolist(),
                      "world": self.world_nodes.tolist()},
            "edges": {name: {"senders": e.senders.tolist(), "receivers": e.receivers.tolist(),
                             "features": e.features.tolist()} for name, e in self.edges.items()},
        }, indent=1)

    def to_data(self, dtype: torch.dtype = torch.float32) -> ContactGraphData:
        data = ContactGraphData()
        for node_type, x in (("mesh", self.mesh_nodes), ("object", self.object_nodes), ("world", self.world_nodes)):
            data[node_type].x = torch.as_tensor(np.asarray(x), dtype=dtype)
        data["mesh"].dynamic = torch.as_tensor(self.dynamic_vertices, dtype=torch.bool)
        data["mesh"].tool = torch.as_tensor(self.tool_vertices, dtype=torch.bool)
        for name, edge_set in self.edges.items():
            store = data[EDGE_TYPES[name]]
            store.senders = torch.as_tensor(np.asarray(edge_set.senders), dtype=torch.long)
            store.receivers = torch.as_tensor(np.asarray(edge_set.receivers), dtype=torch.long)
            store.edge_attr = torch.as_tensor(np.asarray(edge_set.features), dtype=dtype)
        return data


# ----------------------------------------------------------------------
# Node features
# ----------------------------------------------------------------------

def mesh_node_features(vertex_history, attrs, h: Optional[int] = None) -> np.ndarray:
    """
    Velocity-history node features

    Args:
        vertex_history: (h+1, N, 3) or (h+1, 3) positions, newest first
        attrs: BodySpec, a (3,) [m, mu, b] vector or (N, 3) per-vertex rows
        h: expected window length (checked when given)

    Returns:
        (N, 3h+3) rows [p_t - p_{t-1}, ..., p_{t-h+1} - p_{t-h}, m, mu, b]
    """
    history = np.asarray(vertex_history, dtype=np.float64)
    single = history.ndim == 2
    if single:
        history = history[:, None, :]
    if history.ndim != 3 or history.shape[2] != 3 or history.shape[0] < 2:
        raise GraphError(f"Vertex history must be (h+1, N, 3), got {np.shape(vertex_history)}")
    if h is not None and history.shape[0] != h + 1:
        raise GraphError(f"Expected {h + 1} position frames, got {history.shape[0]}")
    if hasattr(attrs, "attributes"):
        attrs = attrs.attributes()
    attrs = np.broadcast_to(np.asarray(attrs, dtype=np.float64), (history.shape[1], 3))
    diffs = history[:-1] - history[1:]                        # (h, N, 3)
    features = np.concatenate([diffs.transpose(1, 0, 2).reshape(history.shape[1], -1), attrs], axis=1)
    return features[0] if single else features


def object_node_features(com_history, attrs, h: Optional[int] = None) -> np.ndarray:
    """Same layout as mesh nodes, computed on body CoM positions"""
    return mesh_node_features(com_history, attrs, h)


def world_node_features(kind: WorldKind) -> np.ndarray:
    return np.array([1.0, 0.0]) if WorldKind(kind) is WorldKind.FORCE else np.array([0.0, 1.0])


# ----------------------------------------------------------------------
# Edge features
# ----------------------------------------------------------------------

def _with_norm(vectors: np.ndarray) -> np.ndarray:
    return np.concatenate([vectors, np.linalg.norm(vectors, axis=-1, keepdims=True)], axis=-1)


def world_mesh_edge_features(action: Action, vertex, com, body_dynamic: bool,
                             kind: WorldKind, direction: Direction) -> np.ndarray:
    """
    Action-conditional world-mesh edge features

    Force edges carry [f, |f|]; torque edges [tau, |tau|, p - c, |p - c|].
    The mesh->world direction negates the vector parts. Static bodies get
    all-zero features. Accepts a single vertex (3,) or many (N, 3).
    """
    vertex = np.asarray(vertex, dtype=np.float64)
    single = vertex.ndim == 1
    vertices = vertex.reshape(-1, 3)
    n = vertices.shape[0]
    kind = WorldKind(kind)
    width = 4 if kind is WorldKind.FORCE else 8
    if not body_dynamic:
        features = np.zeros((n, width))
        return features[0] if single else features

    sign = 1.0 if Direction(direction) is Direction.TO_MESH else -1.0
    if kind is WorldKind.FORCE:
        features = np.tile(_with_norm(sign * action.force), (n, 1))
    else:
        offset = vertices - np.asarray(com, dtype=np.float64)
        features = np.concatenate([np.tile(_with_norm(sign * action.torque), (n, 1)),
                                   _with_norm(sign * offset)], axis=1)
    return features[0] if single else features


def object_mesh_edge_features(com, vertex, direction: Direction,
                              vertex_body: Optional[int] = None, object_body: Optional[int] = None) -> np.ndarray:
    """[p - c, |p - c|] for object->mesh; the vector part is negated for mesh->object"""
    if vertex_body is not None and object_body is not None and vertex_body != object_body:
        raise GraphError(f"Vertex of body {vertex_body} cannot connect to object node {object_body}")
    offset = np.asarray(vertex, dtype=np.float64) - np.asarray(com, dtype=np.float64)
    if Direction(direction) is Direction.FROM_MESH:
        offset = -offset
    return _with_norm(offset)


def rank_face_vertices(face_vertices: Sequence[int], positions: np.ndarray, closest: np.ndarray) -> np.ndarray:
    """Face vertices ordered by distance to the closest point, ties by vertex index"""
    ids = np.asarray(face_vertices, dtype=np.int64)
    distances = np.linalg.norm(positions[ids] - closest, axis=1)
    return ids[np.lexsort((ids, distances))]


def mesh_mesh_edge_features(pair: ContactPair, positions: np.ndarray, reverse: bool = False
                            ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Face-contact edge between the vertices of two proximal faces

    Args:
        pair: contact from detect_collisions
        positions: (N, 3) world positions of all mesh vertices
        reverse: build the receiver->sender direction of the same pair

    Returns:
        (ordered sender triplet, ordered receiver triplet, 27-vector
        [d_rs, d_s1..3, d_r1..3, n_s, n_r])
    """
    s_vertices, r_vertices = pair.sender_vertices, pair.receiver_vertices
    p_s, p_r, n_s, n_r = pair.p_s, pair.p_r, pair.n_s, pair.n_r
    if reverse:
        s_vertices, r_vertices = r_vertices, s_vertices
        p_s, p_r, n_s, n_r = p_r, p_s, n_r, n_s
    senders = rank_face_vertices(s_vertices, positions, p_s)
    receivers = rank_face_vertices(r_vertices, positions, p_r)
    features = np.concatenate([
        p_r - p_s,
        (positions[senders] - p_s).reshape(-1),
        (positions[receivers] - p_r).reshape(-1),
        n_s,
        n_r,
    ])
    return senders, receivers, features


# ----------------------------------------------------------------------
# Assembly
# ----------------------------------------------------------------------

def _empty_edges(name: str) -> EdgeSet:
    shape = (0, 3) if name in (MESH_MESH, MESH_MESH_REVERSE) else (0,)
    return EdgeSet(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64),
                   np.zeros((0, EDGE_WIDTHS[name])))


def tool_position_history(history: StateHistory, scene: Scene, dt: Optional[float] = None
                          ) -> Tuple[np.ndarray, np.ndarray]:
    """(h+1, N_M, 3) vertex and (h+1, B, 3) CoM world positions, newest first"""
    poses = history.pose_frames(dt if dt is not None else scene.dt)
    vertices = np.stack([scene.world_vertices(pose) for pose in poses], axis=0)
    coms = np.stack([scene.com_positions(pose) for pose in poses], axis=0)
    return vertices, coms


def assemble_graph(vertex_history: np.ndarray, com_history: np.ndarray, action: Action, scene: Scene,
                   contacts: Sequence[ContactPair]) -> HeteroGraph:
    """
    Build the graph from precomputed (possibly noisy or rotated) positions

    Args:
        vertex_history: (h+1, N_M, 3) world vertex positions, newest first
        com_history: (h+1, B, 3) world CoM positions, newest first
        action: applied wrench (world frame, same frame as the positions)
        scene: scene description
        contacts: face pairs at the newest frame
    """
    if scene.tool is None:
        raise GraphError(f"Scene '{scene.name}' has no dynamic tool body")
    h = vertex_history.shape[0] - 1
    n_mesh = scene.vertex_count
    n_bodies = len(scene.bodies)
    if vertex_history.shape[1] != n_mesh:
        raise GraphError(f"Vertex history has {vertex_history.shape[1]} vertices, scene has {n_mesh}")

    attrs = np.stack([body.attributes() for body in scene.bodies], axis=0)
    mesh_nodes = mesh_node_features(vertex_history, attrs[scene.vertex_body], h)
    object_nodes = object_node_features(com_history, attrs, h)
    world_nodes = np.tile(np.stack([world_node_features(WorldKind.FORCE),
                                    world_node_features(WorldKind.TORQUE)]), (n_bodies, 1))

    positions = vertex_history[0]
    coms = com_history[0]
    vertex_ids = np.arange(n_mesh)
    body_of = scene.vertex_body

    edges: Dict[str, EdgeSet] = {}
    offsets = positions - coms[body_of]
    edges[OBJECT_MESH] = EdgeSet(body_of.copy(), vertex_ids.copy(), _with_norm(offsets))
    edges[MESH_OBJECT] = EdgeSet(vertex_ids.copy(), body_of.copy(), _with_norm(-offsets))

    blocks = {name: [] for name in (WORLD_MESH_FORCE, WORLD_MESH_TORQUE, MESH_WORLD_FORCE, MESH_WORLD_TORQUE)}
    for b, body in enumerate(scene.bodies):
        verts = positions[scene.body_slices[b]]
        for name, kind, direction in (
                (WORLD_MESH_FORCE, WorldKind.FORCE, Direction.TO_MESH),
                (WORLD_MESH_TORQUE, WorldKind.TORQUE, Direction.TO_MESH),
                (MESH_WORLD_FORCE, WorldKind.FORCE, Direction.FROM_MESH),
                (MESH_WORLD_TORQUE, WorldKind.TORQUE, Direction.FROM_MESH)):
            blocks[name].append(world_mesh_edge_features(action, verts, coms[b], body.dynamic, kind, direction))
    world_of = {WorldKind.FORCE: 2 * body_of, WorldKind.TORQUE: 2 * body_of + 1}
    edges[WORLD_MESH_FORCE] = EdgeSet(world_of[WorldKind.FORCE], vertex_ids.copy(),
                                      np.concatenate(blocks[WORLD_MESH_FORCE], axis=0))
    edges[WORLD_MESH_TORQUE] = EdgeSet(world_of[WorldKind.TORQUE], vertex_ids.copy(),
                                       np.concatenate(blocks[WORLD_MESH_TORQUE], axis=0))
    edges[MESH_WORLD_FORCE] = EdgeSet(vertex_ids.copy(), world_of[WorldKind.FORCE].copy(),
                                      np.concatenate(blocks[MESH_WORLD_FORCE], axis=0))
    edges[MESH_WORLD_TORQUE] = EdgeSet(vertex_ids.copy(), world_of[WorldKind.TORQUE].copy(),
                                       np.concatenate(blocks[MESH_WORLD_TORQUE], axis=0))

    for name, reverse in ((MESH_MESH, False), (MESH_MESH_REVERSE, True)):
        if not contacts:
            edges[name] = _empty_edges(name)
            continue
        built = [mesh_mesh_edge_features(pair, positions, reverse=reverse) for pair in contacts]
        edges[name] = EdgeSet(np.stack([s for s, _, _ in built]), np.stack([r for _, r, _ in built]),
                              np.stack([f for _, _, f in built]))

    dynamic = np.array([scene.bodies[b].dynamic for b in body_of], dtype=bool)
    graph = HeteroGraph(
        mesh_nodes=mesh_nodes,
        object_nodes=object_nodes,
        world_nodes=world_nodes,
        edges={name: edges[name] for name in RELATIONS},
        dynamic_vertices=dynamic,
        tool_vertices=body_of == scene.tool,
        contact_pairs=len(contacts),
    )
    graph.validate()
    return graph


def recompute_contacts(positions: np.ndarray, scene: Scene, face_pairs: Sequence[Tuple[int, int]]
                       ) -> List[ContactPair]:
    """Closest-point geometry of precomputed face pairs at new positions"""
    return [contact_pair_from_faces(positions, scene.faces, scene.face_body, s, r) for s, r in face_pairs]


def build_graph(history: StateHistory, action: Action, scene: Scene,
                radius: float = DEFAULT_COLLISION_RADIUS,
                contacts: Optional[Sequence[ContactPair]] = None,
                dt: Optional[float] = None) -> HeteroGraph:
    """
    Construct the input graph for one prediction step

    Args:
        history: tool state window (newest first)
        action: applied wrench, world frame
        scene: scene with one dynamic tool body
        radius: collision sphere radius for face-pair detection
        contacts: precomputed contacts at the newest frame (detected when None)
        dt: time step used to recover a missing preceding frame
    """
    if scene.tool is None:
        raise GraphError(f"Scene '{scene.name}' has no dynamic tool body")
    vertex_history, com_history = tool_position_history(history, scene, dt)
    if contacts is None:
        contacts = detect_collisions(scene.posed_bodies(history.current.pose), radius)
    return assemble_graph(vertex_history, com_history, action, scene, contacts)


# ----------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------

def batch_graphs(graphs: Sequence[HeteroGraph], dtype: torch.dtype = torch.float32) -> Batch:
    """
    One PyG batch of several scene graphs

    Node stores are concatenated per type and get a `batch` vector; edge
    sender and receiver indices are offset per endpoint type.
    """
    if not graphs:
        raise GraphError("Cannot batch an empty list of graphs")
    return Batch.from_data_list([graph.to_data(dtype) for graph in graphs])
