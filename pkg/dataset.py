"""
Dataset Module
Transition records and their on-disk format:
- Record: h+1 pose frames, current twist, action, observation, next pose
- Binary dataset files (JSON header line, f32 record blocks, int32 contact triplets)
- Episode-level train/validation split
- StateHistory reconstruction from a record
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from state import (Action, IDENTITY_QUATERNION, Observation, Pose, State, StateHistory, Twist,
                   history_from_poses)

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
DEFAULT_VALIDATION_FRACTION = 0.05

ContactList = Tuple[Tuple[int, int], ...]


class DatasetError(ValueError):
    """Raised for unreadable or inconsistent dataset files"""


@dataclass(eq=False)
class Record:
    """One transition of the tool; poses are world frame, newest first"""
    episode: int
    step: int
    poses: np.ndarray          # (h+1, 7)
    twist: np.ndarray          # (6,) twist at the newest frame
    action: Action
    observation: Observation
    next_pose: np.ndarray      # (7,)
    contact: bool = False
    tool_shape: int = 0        # index into the header's tool_shapes
    contacts: ContactList = ()
    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUATERNION.copy())  # augmentation only

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 7)
        self.twist = np.asarray(self.twist, dtype=np.float64).reshape(6)
        self.next_pose = np.asarray(self.next_pose, dtype=np.float64).reshape(7)
        self.contacts = tuple((int(s), int(r)) for s, r in self.contacts)
        for pose in self.poses:
            Pose.from_array(pose)
        Pose.from_array(self.next_pose)

    @property
    def h(self) -> int:
        return self.poses.shape[0] - 1

    def pose(self, k: int = 0) -> Pose:
        return Pose.from_array(self.poses[k])

    def pose_frames(self) -> List[Pose]:
        return [Pose.from_array(p) for p in self.poses]

    @property
    def next(self) -> Pose:
        return Pose.from_array(self.next_pose)

    @property
    def state(self) -> State:
        return State(self.pose(0), Twist.from_array(self.twist))


@dataclass
class DatasetHeader:
    h: int
    dt: float
    scene_hash: str
    scene_path: str = ""
    record_count: int = 0
    observation_frame: str = "tool"
    contact_count: int = 0
    tool_shapes: List[str] = field(default_factory=lambda: ["scene"])
    format_version: int = DATASET_FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DatasetHeader":
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"Dataset header is not valid JSON: {e}")
        known = {name for name in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise DatasetError(f"Unknown dataset header fields: {sorted(unknown)}")
        return cls(**data)


# largest id an f32 record field holds exactly
MAX_EXACT_ID = 2 ** 24


def record_width(h: int) -> int:
    """Floats per record block"""
    return 3 + 7 * (h + 1) + 6 + 6 + 6 + 7 + 1


def _pack(record: Record) -> np.ndarray:
    return np.concatenate([
        [record.episode, record.step, record.tool_shape],
        record.poses.reshape(-1),
        record.twist,
        record.action.as_array(),
        record.observation.as_array(),
        record.next_pose,
        [1.0 if record.contact else 0.0],
    ])


def _unpack(row: np.ndarray, h: int) -> Record:
    row = row.astype(np.float64)
    i = 3
    poses = row[i:i + 7 * (h + 1)].reshape(h + 1, 7)
    i += 7 * (h + 1)
    twist, action, observation = row[i:i + 6], row[i + 6:i + 12], row[i + 12:i + 18]
    i += 18
    return Record(
        episode=int(row[0]),
        step=int(row[1]),
        tool_shape=int(row[2]),
        poses=poses,
        twist=twist,
        action=Action.from_array(action),
        observation=Observation.from_array(observation),
        next_pose=row[i:i + 7],
        contact=bool(row[i + 7] > 0.5),
    )


def write_dataset(path: Union[str, Path], header: DatasetHeader, records: Sequence[Record],
                  contacts: Optional[Sequence[ContactList]] = None) -> Path:
    """
    Write records as one JSON header line, f32 record blocks, then int32
    (record index, sender face, receiver face) contact triplets

    Args:
        contacts: precomputed face pairs aligned with `records`; taken from
                  the records themselves when omitted
    """
    path = Path(path)
    if contacts is None:
        contacts = [record.contacts for record in records]
    if len(contacts) != len(records):
        raise DatasetError(f"{len(contacts)} contact lists for {len(records)} records")
    for record in records:
        if record.h != header.h:
            raise DatasetError(f"Record of episode {record.episode} step {record.step} has h={record.h}, "
                               f"header declares h={header.h}")
        for name in ("episode", "step", "tool_shape"):
            value = getattr(record, name)
            if not 0 <= value <= MAX_EXACT_ID:
                raise DatasetError(f"Record {name} {value} is outside [0, {MAX_EXACT_ID}], "
                                   f"f32 storage would round it")

    triplets = [(k, s, r) for k, pairs in enumerate(contacts) for s, r in pairs]
    header = replace(header, record_count=len(records), contact_count=len(triplets))
    blocks = np.stack([_pack(r) for r in records]) if records else np.zeros((0, record_width(header.h)))

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write((header.to_json() + "\n").encode("utf-8"))
        f.write(np.ascontiguousarray(blocks, dtype="<f4").tobytes())
        f.write(np.asarray(triplets, dtype="<i4").reshape(-1, 3).tobytes())
    logger.info("Wrote %d records (%d contact pairs) to %s", len(records), len(triplets), path)
    return path


def read_dataset(path: Union[str, Path]) -> Tuple[DatasetHeader, List[Record], List[ContactList]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    with open(path, "rb") as f:
        header = DatasetHeader.from_json(f.readline().decode("utf-8"))
        payload = f.read()
    if header.format_version != DATASET_FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {header.format_version}")

    width = record_width(header.h)
    record_bytes = 4 * width * header.record_count
    contact_bytes = 4 * 3 * header.contact_count
    if len(payload) != record_bytes + contact_bytes:
        raise DatasetError(f"{path}: expected {record_bytes + contact_bytes} payload bytes, found {len(payload)}")

    rows = np.frombuffer(payload, dtype="<f4", count=width * header.record_count).reshape(-1, width)
    triplets = np.frombuffer(payload, dtype="<i4", count=3 * header.contact_count,
                             offset=record_bytes).reshape(-1, 3)
    grouped: Dict[int, List[Tuple[int, int]]] = {}
    for k, s, r in triplets:
        if not 0 <= k < header.record_count:
            raise DatasetError(f"{path}: contact triplet references record {k}")
        grouped.setdefault(int(k), []).append((int(s), int(r)))

    records, contacts = [], []
    for k, row in enumerate(rows):
        pairs = tuple(grouped.get(k, ()))
        record = _unpack(row, header.h)
        record.contacts = pairs
        records.append(record)
        contacts.append(pairs)
    logger.info("Read %d records from %s", len(records), path)
    return header, records, contacts


def split_by_episode(records: Sequence[Record], fraction: float = DEFAULT_VALIDATION_FRACTION,
                     seed: int = 0) -> Tuple[List[Record], List[Record]]:
    """Hold out whole episodes so overlapping windows never straddle the split"""
    episodes = sorted({record.episode for record in records})
    if len(episodes) < 2 or fraction <= 0.0:
        return list(records), []
    rng = np.random.default_rng(seed)
    n_val = min(len(episodes) - 1, max(1, int(round(fraction * len(episodes)))))
    held_out = set(rng.permutation(episodes)[:n_val].tolist())
    train = [r for r in records if r.episode not in held_out]
    val = [r for r in records if r.episode in held_out]
    return train, val


def record_history(record: Record, dt: float) -> StateHistory:
    """History of the record's h newest frames; the newest keeps the recorded twist"""
    history = history_from_poses(record.pose_frames(), dt, record.h)
    frames = (record.state,) + history.frames[1:]
    return StateHistory(frames, history.preceding, record.h)
