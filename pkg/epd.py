"""
Encode-Process-Decode Network
Learned dynamics over the heterogeneous contact graph:
- Per-type encoders for nodes and edge relations
- Unshared message-passing layers with residual updates, including the
  six-node face-contact update split into three receiver messages
- Decoders for mesh-vertex accelerations and the tool reaction wrench

Inputs are normalized with statistics stored as module buffers, so the
normalization travels with every checkpoint.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch_geometric.data import Batch
from torch_geometric.utils import scatter

from graph_builder import (EDGE_TYPES, EDGE_WIDTHS, MESH_MESH, MESH_MESH_REVERSE, MESH_OBJECT, MESH_WORLD_FORCE,
                           MESH_WORLD_TORQUE, OBJECT_MESH, RELATIONS, WORLD_MESH_FORCE, WORLD_MESH_TORQUE,
                           WORLD_NODE_WIDTH, HeteroGraph, batch_graphs, node_width)
from tensor_core import ContractError, HIDDEN_WIDTH, Mlp, ShapeError

logger = logging.getLogger(__name__)

# Relations with their own encoder and processors; the reverse mesh-mesh
# half shares the mesh-mesh blocks
ENCODED_RELATIONS = (MESH_MESH, OBJECT_MESH, MESH_OBJECT, WORLD_MESH_FORCE, WORLD_MESH_TORQUE,
                     MESH_WORLD_FORCE, MESH_WORLD_TORQUE)
STANDARD_RELATIONS = (OBJECT_MESH, MESH_OBJECT, WORLD_MESH_FORCE, WORLD_MESH_TORQUE,
                      MESH_WORLD_FORCE, MESH_WORLD_TORQUE)

# Aggregation slots of each node update, in concatenation order
MESH_SLOTS = (MESH_MESH, OBJECT_MESH, WORLD_MESH_FORCE, WORLD_MESH_TORQUE)
OBJECT_SLOTS = (MESH_OBJECT,)
WORLD_SLOTS = (MESH_WORLD_FORCE, MESH_WORLD_TORQUE)

# Normalization groups: inputs per node type and relation, then targets
INPUT_GROUPS = ("mesh", "object") + ENCODED_RELATIONS
TARGET_GROUPS = ("acceleration", "force", "torque")
NORM_GROUPS = INPUT_GROUPS + TARGET_GROUPS

NODE_TYPES = ("mesh", "object", "world")

NODE_ENDPOINTS = {
    OBJECT_MESH: ("object", "mesh"),
    MESH_OBJECT: ("mesh", "object"),
    WORLD_MESH_FORCE: ("world", "mesh"),
    WORLD_MESH_TORQUE: ("world", "mesh"),
    MESH_WORLD_FORCE: ("mesh", "world"),
    MESH_WORLD_TORQUE: ("mesh", "world"),
}


@dataclass
class EpdConfig:
    latent: int = 128
    hidden: int = HIDDEN_WIDTH
    layers: int = 10
    history: int = 3

    @classmethod
    def from_config(cls, cfg: Dict) -> "EpdConfig":
        return cls(
            latent=int(cfg.get("epd.latent", cls.latent)),
            hidden=int(cfg.get("epd.hidden", cls.hidden)),
            layers=int(cfg.get("epd.layers", cls.layers)),
            history=int(cfg.get("graph.history", cls.history)),
        )

    def group_width(self, group: str) -> int:
        if group in ("mesh", "object"):
            return node_width(self.history)
        if group in TARGET_GROUPS:
            return 3
        return EDGE_WIDTHS[group]


@dataclass
class LatentGraph:
    nodes: Dict[str, torch.Tensor]
    edges: Dict[str, torch.Tensor]


def _aggregate(messages: torch.Tensor, receivers: torch.Tensor, count: int) -> torch.Tensor:
    """Sum of incoming messages per receiver; zero for nodes without edges"""
    return scatter(messages, receivers, dim=0, dim_size=count, reduce="sum")


class ProcessorLayer(nn.Module):
    """One message-passing step with its own (unshared) MLPs"""

    def __init__(self, cfg: EpdConfig):
        super().__init__()
        d, hidden = cfg.latent, cfg.hidden
        self.latent = d
        self.edge_mlps = nn.ModuleDict({name: Mlp(3 * d, d, hidden) for name in STANDARD_RELATIONS})
        self.mesh_mesh_mlp = Mlp(7 * d, 3 * d, hidden)
        self.node_mlps = nn.ModuleDict({
            "mesh": Mlp((1 + len(MESH_SLOTS)) * d, d, hidden),
            "object": Mlp((1 + len(OBJECT_SLOTS)) * d, d, hidden),
            "world": Mlp((1 + len(WORLD_SLOTS)) * d, d, hidden),
        })

    def mesh_mesh_messages(self, latent_edges: torch.Tensor, mesh: torch.Tensor,
                           senders: torch.Tensor, receivers: torch.Tensor) -> torch.Tensor:
        """(E, 3, d) messages for the three receiver vertices of each face contact"""
        e = latent_edges.shape[0]
        inputs = torch.cat([latent_edges, mesh[senders].reshape(e, -1), mesh[receivers].reshape(e, -1)], dim=-1)
        return self.mesh_mesh_mlp(inputs).reshape(e, 3, self.latent)

    def forward(self, latent: LatentGraph, graph: Batch) -> LatentGraph:
        nodes = latent.nodes
        counts = {name: tensor.shape[0] for name, tensor in nodes.items()}
        new_edges: Dict[str, torch.Tensor] = {}
        sums: Dict[str, torch.Tensor] = {}

        for name in STANDARD_RELATIONS:
            sender_type, receiver_type = NODE_ENDPOINTS[name]
            s, r = graph[EDGE_TYPES[name]].senders, graph[EDGE_TYPES[name]].receivers
            e = latent.edges[name]
            message = self.edge_mlps[name](torch.cat([e, nodes[sender_type][s], nodes[receiver_type][r]], dim=-1))
            new_edges[name] = e + message
            sums[name] = _aggregate(message, r, counts[receiver_type])

        contact_sum = nodes["mesh"].new_zeros((counts["mesh"], self.latent))
        for name in (MESH_MESH, MESH_MESH_REVERSE):
            e = latent.edges[name]
            if e.shape[0] == 0:
                new_edges[name] = e
                continue
            store = graph[EDGE_TYPES[name]]
            messages = self.mesh_mesh_messages(e, nodes["mesh"], store.senders, store.receivers)
            new_edges[name] = e + messages.mean(dim=1)
            contact_sum = contact_sum + _aggregate(messages.reshape(-1, self.latent), store.receivers.reshape(-1),
                                                   counts["mesh"])
        sums[MESH_MESH] = contact_sum

        new_nodes = {}
        for node_type, slots in (("mesh", MESH_SLOTS), ("object", OBJECT_SLOTS), ("world", WORLD_SLOTS)):
            inputs = torch.cat([nodes[node_type]] + [sums[slot] for slot in slots], dim=-1)
            new_nodes[node_type] = nodes[node_type] + self.node_mlps[node_type](inputs)
        return LatentGraph(new_nodes, new_edges)


class EncodeProcessDecode(nn.Module):
    """Encoders, `layers` processor steps and the two decoders"""

    def __init__(self, cfg: Optional[EpdConfig] = None):
        super().__init__()
        self.cfg = cfg or EpdConfig()
        d, hidden = self.cfg.latent, self.cfg.hidden
        width = node_width(self.cfg.history)
        self.node_encoders = nn.ModuleDict({
            "mesh": Mlp(width, d, hidden),
            "object": Mlp(width, d, hidden),
            "world": Mlp(WORLD_NODE_WIDTH, d, hidden),
        })
        self.edge_encoders = nn.ModuleDict({name: Mlp(EDGE_WIDTHS[name], d, hidden) for name in ENCODED_RELATIONS})
        self.layers = nn.ModuleList([ProcessorLayer(self.cfg) for _ in range(self.cfg.layers)])
        self.acceleration_decoder = Mlp(d, 3, hidden, layer_norm=False)
        # one decoder for both force and torque mesh->world edges
        self.wrench_decoder = Mlp(d, 3, hidden, layer_norm=False)

        for group in NORM_GROUPS:
            w = self.cfg.group_width(group)
            self.register_buffer(f"norm_mean_{group}", torch.zeros(w))
            self.register_buffer(f"norm_std_{group}", torch.ones(w))

    # ------------------------------------------------------------------
    # Normalization
    # ------------------------------------------------------------------

    def set_normalization(self, stats: Dict[str, Tuple[np.ndarray, np.ndarray]]):
        """Copy (mean, std) per group into the module buffers"""
        for group, (mean, std) in stats.items():
            if group not in NORM_GROUPS:
                continue
            getattr(self, f"norm_mean_{group}").copy_(torch.as_tensor(np.asarray(mean), dtype=torch.float32))
            getattr(self, f"norm_std_{group}").copy_(torch.as_tensor(np.asarray(std), dtype=torch.float32))

    def normalization(self, group: str) -> Tuple[torch.Tensor, torch.Tensor]:
        return getattr(self, f"norm_mean_{group}"), getattr(self, f"norm_std_{group}")

    def normalize(self, x: torch.Tensor, group: str) -> torch.Tensor:
        mean, std = self.normalization(group)
        return (x - mean.to(x.dtype)) / std.to(x.dtype)

    def denormalize(self, x: torch.Tensor, group: str) -> torch.Tensor:
        mean, std = self.normalization(group)
        return x * std.to(x.dtype) + mean.to(x.dtype)

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def encode(self, graph: Batch) -> LatentGraph:
        for node_type in NODE_TYPES:
            x, expected = graph[node_type].x, self.node_encoders[node_type].in_width
            if x.shape[-1] != expected:
                raise ShapeError(f"{node_type} node features have width {x.shape[-1]}, expected {expected}")
        nodes = {
            "mesh": self.node_encoders["mesh"](self.normalize(graph["mesh"].x, "mesh")),
            "object": self.node_encoders["object"](self.normalize(graph["object"].x, "object")),
            "world": self.node_encoders["world"](graph["world"].x),
        }
        edges = {}
        for name in RELATIONS:
            group = MESH_MESH if name == MESH_MESH_REVERSE else name
            edges[name] = self.edge_encoders[group](self.normalize(graph[EDGE_TYPES[name]].edge_attr, group))
        return LatentGraph(nodes, edges)

    def process_layer(self, latent: LatentGraph, graph: Batch, layer: int) -> LatentGraph:
        if not 0 <= layer < len(self.layers):
            raise ContractError(f"Layer {layer} outside 0..{len(self.layers) - 1}")
        return self.layers[layer](latent, graph)

    def decode(self, latent: LatentGraph, graph: Batch) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Normalized outputs

        Returns:
            accelerations (N_M, 3), zero rows for static vertices;
            wrench (G, 6) mean of decoded tool mesh->world edges per graph
        """
        mesh = latent.nodes["mesh"]
        dynamic = torch.nonzero(graph["mesh"].dynamic, as_tuple=False).reshape(-1)
        accelerations = mesh.new_zeros((mesh.shape[0], 3))
        if dynamic.numel():
            accelerations = accelerations.index_copy(0, dynamic, self.acceleration_decoder(mesh[dynamic]))

        parts = []
        for name in (MESH_WORLD_FORCE, MESH_WORLD_TORQUE):
            senders = graph[EDGE_TYPES[name]].senders
            tool_edges = torch.nonzero(graph["mesh"].tool[senders], as_tuple=False).reshape(-1)
            if tool_edges.numel() == 0:
                raise ContractError("Graph has no tool vertices to decode a wrench from")
            graph_of_edge = graph["mesh"].batch[senders[tool_edges]]
            decoded = self.wrench_decoder(latent.edges[name][tool_edges])
            total = _aggregate(decoded, graph_of_edge, graph.num_graphs)
            count = _aggregate(torch.ones_like(decoded[:, :1]), graph_of_edge, graph.num_graphs)
            parts.append(total / count.clamp_min(1.0))
        return accelerations, torch.cat(parts, dim=-1)

    def forward(self, graph: Batch) -> Tuple[torch.Tensor, torch.Tensor]:
        latent = self.encode(graph)
        for layer in range(len(self.layers)):
            latent = self.process_layer(latent, graph, layer)
        return self.decode(latent, graph)

    # ------------------------------------------------------------------

    @torch.no_grad()
    def predict(self, graph: Union[HeteroGraph, Batch]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Physical-unit outputs for a single graph or a batch from `batch_graphs`

        Returns:
            accelerations (N_M, 3) in position-delta units and wrench (G, 6)
        """
        if isinstance(graph, HeteroGraph):
            graph = batch_graphs([graph], dtype=self.norm_mean_mesh.dtype)
        accelerations, wrench = self.forward(graph)
        accelerations = self.denormalize(accelerations, "acceleration") * graph["mesh"].dynamic[:, None]
        force = self.denormalize(wrench[:, :3], "force")
        torque = self.denormalize(wrench[:, 3:], "torque")
        return (accelerations.double().numpy(),
                torch.cat([force, torque], dim=-1).double().numpy())
