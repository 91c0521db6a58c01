"""
Training Module
Fits the encode-process-decode network to oracle transitions:
- Rotation augmentation and position noise
- Streaming normalization statistics
- Weighted position / force / torque loss in normalized units
- Seeded minibatch loop with Adam, validation, checkpoints and a metrics log
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset, Sampler
from torch_geometric.data import Batch

from checkpoint_manager import CheckpointManager
from dataset import DatasetHeader, Record
from epd import EncodeProcessDecode, EpdConfig, NORM_GROUPS
from graph_builder import (MESH_MESH, MESH_MESH_REVERSE, HeteroGraph, assemble_graph, batch_graphs,
                           recompute_contacts)
from oracle_sim import tool_shape_scene
from scene import Scene
from state import (IDENTITY_QUATERNION, InvalidInputError, Pose, quaternion_multiply, random_quaternion,
                   rotate_vectors, to_world_frame)
from tensor_core import (ContractError, NonFiniteError, ShapeError, adam_step, backward, lr_schedule,
                         load_checkpoint, make_optimizer, restore_module, restore_optimizer, set_deterministic)

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


# ----------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------

def _rotate_pose_array(q: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return Pose(rotate_vectors(q, pose[:3]), quaternion_multiply(q, pose[3:])).as_array()


def augment_rotation(record: Record, seed=None, rotation: Optional[np.ndarray] = None,
                     observation_frame: str = "tool") -> Record:
    """
    Rotate a record about the world origin

    The rotation (uniform on SO(3) unless given) is applied to every pose,
    the twist, the action and, when stored in the world frame, the
    observation. Static geometry follows through the record's accumulated
    `rotation`. A tool-frame observation is unchanged by a world rotation.
    """
    q = random_quaternion(np.random.default_rng(seed)) if rotation is None else np.asarray(rotation, dtype=np.float64)
    observation = record.observation.rotated(q) if observation_frame == "world" else record.observation
    return replace(
        record,
        poses=np.stack([_rotate_pose_array(q, p) for p in record.poses]),
        twist=np.concatenate([rotate_vectors(q, record.twist[:3]), rotate_vectors(q, record.twist[3:])]),
        action=record.action.rotated(q),
        observation=observation,
        next_pose=_rotate_pose_array(q, record.next_pose),
        rotation=quaternion_multiply(q, record.rotation),
    )


def corrupt_positions(vertex_history: np.ndarray, sigma: float, seed=None,
                      mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Add iid Gaussian noise to input-frame vertex positions

    Args:
        vertex_history: (h+1, N, 3) positions
        sigma: noise standard deviation (m)
        seed: noise seed
        mask: optional (N,) bool selecting the vertices to corrupt
    """
    if sigma < 0.0:
        raise InvalidInputError(f"Noise sigma must be non-negative, got {sigma}")
    history = np.array(vertex_history, dtype=np.float64, copy=True)
    if sigma == 0.0:
        return history
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=history.shape)
    if mask is not None:
        noise[:, ~np.asarray(mask, dtype=bool)] = 0.0
    return history + noise


# ----------------------------------------------------------------------
# Examples
# ----------------------------------------------------------------------

@dataclass(eq=False)
class Example:
    """Input graph plus physical-unit targets (world frame)"""
    graph: HeteroGraph
    acceleration: np.ndarray   # (N_M, 3); rows of static vertices are zero
    wrench: np.ndarray         # (6,)


def posed_world(scene: Scene, pose: Pose, rotation: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vertex and CoM world positions with static geometry rotated by `rotation`"""
    vertices = scene.world_vertices(pose)
    coms = scene.com_positions(pose)
    if not np.allclose(rotation, IDENTITY_QUATERNION):
        static_vertices = scene.vertex_body != scene.tool
        vertices[static_vertices] = rotate_vectors(rotation, vertices[static_vertices])
        static_bodies = np.arange(len(scene.bodies)) != scene.tool
        coms[static_bodies] = rotate_vectors(rotation, coms[static_bodies])
    return vertices, coms


def make_example(record: Record, scene: Scene, observation_frame: str = "tool", sigma: float = 0.0,
                 seed=None) -> Example:
    """
    Build the graph and targets of one record

    Contacts come from the record's precomputed face pairs, re-evaluated
    on the clean positions. Noise only touches dynamic input vertices; the
    acceleration target is taken against the noisy inputs so that the
    integrated position still lands on the clean next position.
    """
    frames = [posed_world(scene, pose, record.rotation) for pose in record.pose_frames()]
    clean = np.stack([v for v, _ in frames])
    coms = np.stack([c for _, c in frames])
    target_positions, _ = posed_world(scene, record.next, record.rotation)

    contacts = recompute_contacts(clean[0], scene, record.contacts)
    dynamic = scene.vertex_body == scene.tool
    noisy = corrupt_positions(clean, sigma, seed, mask=dynamic)
    graph = assemble_graph(noisy, coms, record.action, scene, contacts)

    acceleration = np.zeros_like(target_positions)
    acceleration[dynamic] = target_positions[dynamic] - 2.0 * noisy[0][dynamic] + noisy[1][dynamic]
    observation = record.observation
    if observation_frame == "tool":
        observation = to_world_frame(observation, record.next)
    return Example(graph, acceleration, observation.as_array())


@dataclass
class TrainingSource:
    """Records of one dataset together with its scene"""
    scene: Scene
    header: DatasetHeader
    records: List[Record]
    _shaped: Dict[int, Scene] = field(default_factory=dict, repr=False)

    def scene_for(self, record: Record) -> Scene:
        if record.tool_shape not in self._shaped:
            shapes = self.header.tool_shapes
            name = shapes[record.tool_shape] if record.tool_shape < len(shapes) else "scene"
            self._shaped[record.tool_shape] = tool_shape_scene(self.scene, name)
        return self._shaped[record.tool_shape]


# ----------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-dimension streaming mean/variance (parallel Welford merge)"""
    count: int = 0
    mean: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None

    def update(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
        n = batch.shape[0]
        if n == 0:
            return
        batch_mean = batch.mean(axis=0)
        batch_m2 = ((batch - batch_mean) ** 2).sum(axis=0)
        if self.count == 0:
            self.count, self.mean, self.m2 = n, batch_mean, batch_m2
            return
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + batch_m2 + delta ** 2 * self.count * n / total
        self.count = total

    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.m2 / self.count), STD_FLOOR)


@dataclass
class NormStats:
    """Mean and standard deviation per feature group"""
    groups: Dict[str, Tuple[np.ndarray, np.ndarray]]

    def mean(self, group: str) -> np.ndarray:
        return self.groups[group][0]

    def std(self, group: str) -> np.ndarray:
        return self.groups[group][1]


def normalize(x, stats: NormStats, group: str) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean(group)) / stats.std(group)


def denormalize(x, stats: NormStats, group: str) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * stats.std(group) + stats.mean(group)


def fit_norm_stats(examples, widths: Optional[Dict[str, int]] = None) -> NormStats:
    """
    Streaming statistics over an iterable of Examples

    Groups: node features per type, features per encoded relation (both
    mesh-mesh halves pooled), dynamic-vertex accelerations, force, torque.
    Groups that never receive a row get mean 0 and std 1.
    """
    running = {group: RunningStats() for group in NORM_GROUPS}
    seen = 0
    for example in examples:
        seen += 1
        graph = example.graph
        running["mesh"].update(graph.mesh_nodes)
        running["object"].update(graph.object_nodes)
        for name, edge_set in graph.edges.items():
            running[MESH_MESH if name == MESH_MESH_REVERSE else name].update(edge_set.features)
        running["acceleration"].update(example.acceleration[graph.dynamic_vertices])
        running["force"].update(example.wrench[:3])
        running["torque"].update(example.wrench[3:])
    if seen == 0:
        raise InvalidInputError("Cannot fit normalization statistics on an empty dataset")

    groups = {}
    for group, stats in running.items():
        if stats.count:
            groups[group] = (stats.mean, stats.std())
        elif widths is not None and group in widths:
            groups[group] = (np.zeros(widths[group]), np.ones(widths[group]))
    return NormStats(groups)


# ----------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------

@dataclass
class LossWeights:
    position: float = 1.0
    force: float = 0.1
    torque: float = 0.1


def loss(pred_positions, pred_wrench, target_positions, target_wrench,
         weights: Optional[LossWeights] = None) -> torch.Tensor:
    """
    Weighted sum of position, force and torque mean squared errors

    All arguments are normalized quantities; wrenches are (..., 6).
    """
    weights = weights or LossWeights()
    tensors = [torch.as_tensor(x) for x in (pred_positions, pred_wrench, target_positions, target_wrench)]
    pred_positions, pred_wrench, target_positions, target_wrench = tensors
    if pred_positions.shape != target_positions.shape:
        raise ShapeError(f"Position shapes differ: {tuple(pred_positions.shape)} vs {tuple(target_positions.shape)}")
    if pred_wrench.shape != target_wrench.shape or pred_wrench.shape[-1] != 6:
        raise ShapeError(f"Wrench shapes differ: {tuple(pred_wrench.shape)} vs {tuple(target_wrench.shape)}")
    position_term = ((pred_positions - target_positions) ** 2).mean() if pred_positions.numel() else pred_wrench.sum() * 0.0
    force_term = ((pred_wrench[..., :3] - target_wrench[..., :3]) ** 2).mean()
    torque_term = ((pred_wrench[..., 3:] - target_wrench[..., 3:]) ** 2).mean()
    return weights.position * position_term + weights.force * force_term + weights.torque * torque_term


# ----------------------------------------------------------------------
# Data loading
# ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 128
    noise: float = 1e-4
    rotate: bool = True
    shuffle: bool = True
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    validation_fraction: float = 0.05
    validate_every: int = 500
    checkpoint_every: int = 1000
    log_every: int = 100
    max_checkpoints: int = 5
    norm_records: int = 2000
    workers: int = 0
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: Dict) -> "TrainConfig":
        keys = {
            "steps": "train.steps", "batch_size": "train.batch_size", "noise": "train.noise",
            "rotate": "train.rotate", "shuffle": "train.shuffle", "lr_start": "train.lr_start",
            "lr_end": "train.lr_end", "validation_fraction": "train.validation_fraction",
            "validate_every": "train.validate_every", "checkpoint_every": "train.checkpoint_every",
            "log_every": "train.log_every", "max_checkpoints": "train.max_checkpoints",
            "norm_records": "train.norm_records", "workers": "train.workers",
            "seed": "seed",
        }
        values = {name: cfg[key] for name, key in keys.items() if key in cfg}
        values["weights"] = LossWeights(
            position=cfg.get("train.lambda_pos", 1.0),
            force=cfg.get("train.lambda_force", 0.1),
            torque=cfg.get("train.lambda_torque", 0.1),
        )
        return cls(**values)


class TransitionDataset(Dataset):
    """
    Examples addressed by (record index, seed key)

    A seed key of None yields the clean example; otherwise the key seeds the
    rotation and the position noise of that draw.
    """

    def __init__(self, sources: Sequence[TrainingSource], cfg: TrainConfig, augment: bool = True):
        self.sources = list(sources)
        self.cfg = cfg
        self.augment = augment
        self.index = [(s, k) for s, source in enumerate(self.sources) for k in range(len(source.records))]

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, key) -> Example:
        position, seed_key = key if isinstance(key, tuple) else (key, None)
        s, k = self.index[position]
        source = self.sources[s]
        record = source.records[k]
        frame = source.header.observation_frame
        sigma = 0.0
        if self.augment and seed_key is not None:
            if self.cfg.rotate:
                record = augment_rotation(record, [*seed_key, 0], observation_frame=frame)
            sigma = self.cfg.noise
        noise_seed = None if seed_key is None else [*seed_key, 1]
        return make_example(record, source.scene_for(record), frame, sigma, noise_seed)


class SeededBatchSampler(Sampler):
    """Batch of (record index, seed key) per optimization step, seeded by [seed, step]"""

    def __init__(self, size: int, batch_size: int, seed: int, start_step: int, total_steps: int,
                 shuffle: bool = True):
        self.size, self.batch_size, self.seed = size, batch_size, seed
        self.start_step, self.total_steps, self.shuffle = start_step, total_steps, shuffle

    def batch(self, step: int) -> List[Tuple[int, Tuple[int, int, int]]]:
        if self.shuffle:
            rng = np.random.default_rng([self.seed, step])
            indices = rng.choice(self.size, size=self.batch_size, replace=self.size < self.batch_size)
        else:
            indices = (np.arange(self.batch_size) + step * self.batch_size) % self.size
        return [(int(i), (self.seed, step, slot)) for slot, i in enumerate(indices)]

    def __iter__(self) -> Iterator:
        for step in range(self.start_step, self.total_steps):
            yield self.batch(step)

    def __len__(self) -> int:
        return max(0, self.total_steps - self.start_step)


@dataclass(eq=False)
class TrainingBatch:
    graph: Batch
    acceleration: torch.Tensor   # (N_dynamic, 3)
    wrench: torch.Tensor         # (G, 6)
    dynamic: torch.Tensor        # (N_M,) bool


def collate_examples(examples: Sequence[Example]) -> TrainingBatch:
    graph = batch_graphs([e.graph for e in examples])
    dynamic = graph["mesh"].dynamic
    acceleration = torch.as_tensor(np.concatenate([e.acceleration for e in examples]), dtype=torch.float32)
    return TrainingBatch(
        graph=graph,
        acceleration=acceleration[dynamic],
        wrench=torch.as_tensor(np.stack([e.wrench for e in examples]), dtype=torch.float32),
        dynamic=dynamic,
    )


def batch_loss(network: EncodeProcessDecode, batch: TrainingBatch, weights: LossWeights) -> torch.Tensor:
    accelerations, wrench = network(batch.graph)
    target_wrench = torch.cat([network.normalize(batch.wrench[:, :3], "force"),
                               network.normalize(batch.wrench[:, 3:], "torque")], dim=-1)
    return loss(accelerations[batch.dynamic], wrench,
                network.normalize(batch.acceleration, "acceleration"), target_wrench, weights)


# ----------------------------------------------------------------------
# Loop
# ----------------------------------------------------------------------

def validation_loss(network: EncodeProcessDecode, dataset: TransitionDataset, cfg: TrainConfig) -> Optional[float]:
    """Mean loss over clean (unaugmented) validation examples"""
    if len(dataset) == 0:
        return None
    network.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset), cfg.batch_size):
            examples = [dataset[i] for i in range(start, min(start + cfg.batch_size, len(dataset)))]
            value = batch_loss(network, collate_examples(examples), cfg.weights)
            total += float(value) * len(examples)
            count += len(examples)
    network.train()
    return total / count


def append_metrics(path: Path, rows: List[Dict]):
    if not rows:
        return
    frame = pd.DataFrame(rows, columns=["step", "train_loss", "val_loss", "lr"])
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)


def train(train_sources: Sequence[TrainingSource], cfg: TrainConfig, out_dir: Union[str, Path],
          epd_cfg: Optional[EpdConfig] = None, network: Optional[EncodeProcessDecode] = None,
          val_sources: Sequence[TrainingSource] = (), header: Optional[Dict] = None,
          resume: bool = True) -> Tuple[EncodeProcessDecode, pd.DataFrame]:
    """
    Train (or fine-tune) the network

    Args:
        train_sources: training records with their scenes
        cfg: training configuration
        out_dir: directory for checkpoints and metrics.csv
        epd_cfg: network shape for a fresh network
        network: start from this network and keep its normalization
        val_sources: held-out records for validation
        header: extra checkpoint header fields (dataset and scene info)
        resume: continue from the latest valid checkpoint in out_dir

    Returns:
        (network, metrics log of this run)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_deterministic(cfg.seed)
    train_set = TransitionDataset(train_sources, cfg, augment=True)
    val_set = TransitionDataset(val_sources, cfg, augment=False)
    if len(train_set) < max(1, cfg.batch_size):
        raise ContractError(f"Dataset has {len(train_set)} records, fewer than batch size {cfg.batch_size}")

    manager = CheckpointManager(out_dir, cfg.max_checkpoints)
    fresh = network is None
    network = network or EncodeProcessDecode(epd_cfg or EpdConfig())
    optimizer = make_optimizer(network, cfg.lr_start)
    start_step = 0

    latest = manager.latest() if resume else None
    if latest is not None:
        ckpt_header, blocks = load_checkpoint(latest)
        restore_module(network, blocks)
        restore_optimizer(optimizer, network, blocks, ckpt_header.get("adam_step", 0))
        start_step = int(ckpt_header["step"])
        logger.info("Resuming from %s at step %d", latest.name, start_step)
    elif fresh:
        rng = np.random.default_rng([cfg.seed, 1 << 20])
        picks = rng.permutation(len(train_set))[:cfg.norm_records]
        stats = fit_norm_stats((train_set[(int(i), (cfg.seed, -1, int(i)))] for i in picks),
                               widths={g: network.cfg.group_width(g) for g in NORM_GROUPS})
        network.set_normalization(stats.groups)
        logger.info("Fitted normalization statistics on %d records", len(picks))

    header = dict(header or {})
    header["epd"] = {"latent": network.cfg.latent, "hidden": network.cfg.hidden,
                     "layers": network.cfg.layers, "history": network.cfg.history}
    header["train_seed"] = cfg.seed

    sampler = SeededBatchSampler(len(train_set), cfg.batch_size, cfg.seed, start_step, cfg.steps, cfg.shuffle)
    loader = DataLoader(train_set, batch_sampler=sampler, collate_fn=collate_examples, num_workers=cfg.workers)
    metrics_path = out_dir / "metrics.csv"
    rows: List[Dict] = []
    pending: List[Dict] = []
    network.train()

    step = start_step
    for step, batch in enumerate(loader, start=start_step):
        lr = lr_schedule(step, cfg.steps, cfg.lr_start, cfg.lr_end)
        value = batch_loss(network, batch, cfg.weights)
        try:
            backward(value, network.named_parameters())
            adam_step(optimizer, network, lr)
        except NonFiniteError:
            append_metrics(metrics_path, pending)
            logger.error("Training diverged at step %d; last checkpoint kept", step)
            raise

        row = {"step": step + 1, "train_loss": float(value), "val_loss": np.nan, "lr": lr}
        if (step + 1) % cfg.log_every == 0:
            logger.info("step %d  loss %.6f  lr %.3e", step + 1, row["train_loss"], lr)
        if cfg.validate_every and (step + 1) % cfg.validate_every == 0:
            val = validation_loss(network, val_set, cfg)
            if val is not None:
                row["val_loss"] = val
                logger.info("step %d  validation loss %.6f", step + 1, val)
        rows.append(row)
        pending.append(row)
        if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.steps:
            append_metrics(metrics_path, pending)
            pending = []
            manager.save(network, step + 1, header, optimizer,
                         {"train_loss": row["train_loss"], "val_loss": None if np.isnan(row["val_loss"]) else row["val_loss"]})

    append_metrics(metrics_path, pending)
    network.eval()
    return network, pd.DataFrame(rows, columns=["step", "train_loss", "val_loss", "lr"])
