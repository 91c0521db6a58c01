"""
Checkpoint Manager Module
Handles training checkpoints including:
- Numbered checkpoint files in one directory
- Save log with sha256 digests and metrics
- Checkpoint verification before resume
- Retention (max_checkpoints) and latest-valid lookup
"""

import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
from torch import nn

from tensor_core import ContractError, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = ".ckpt"


def file_digest(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class CheckpointManager:
    """Manages the checkpoints of one training run"""

    def __init__(self, checkpoint_dir: Union[str, Path], max_checkpoints: int = 5):
        """
        Initialize checkpoint manager

        Args:
            checkpoint_dir: Directory holding checkpoints and the save log
            max_checkpoints: Number of newest checkpoints kept by prune()
        """
        self.checkpoint_dir = Path(checkpoint_dir)
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        self.log_file = self.checkpoint_dir / "checkpoint_log.json"
        self.max_checkpoints = max(1, int(max_checkpoints))

    def _read_log(self) -> List[Dict]:
        if not self.log_file.exists():
            return []
        try:
            with open(self.log_file, "r") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Unreadable checkpoint log %s: %s", self.log_file, e)
            return []

    def _log_save(self, path: Path, step: int, metrics: Optional[Dict]):
        log = [entry for entry in self._read_log() if entry.get("file") != path.name]
        log.append({
            "timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "file": path.name,
            "step": int(step),
            "sha256": file_digest(path),
            "size": path.stat().st_size,
            "metrics": metrics or {},
        })
        with open(self.log_file, "w") as f:
            json.dump(log[-1000:], f, indent=2)

    def path_for(self, step: int) -> Path:
        return self.checkpoint_dir / f"ckpt_{step:08d}{CHECKPOINT_SUFFIX}"

    def save(self, network: nn.Module, step: int, header: Optional[Dict] = None,
             optimizer: Optional[torch.optim.Optimizer] = None, metrics: Optional[Dict] = None) -> Path:
        """
        Write a checkpoint for `step`, log it and apply retention

        Returns:
            Path of the written checkpoint
        """
        header = dict(header or {})
        header["step"] = int(step)
        path = save_checkpoint(self.path_for(step), network, header, optimizer)
        self._log_save(path, step, metrics)
        logger.info("Saved checkpoint %s", path.name)
        self.prune()
        return path

    def verify(self, path: Union[str, Path]) -> Tuple[bool, str]:
        """
        Verify checkpoint integrity

        Returns:
            Tuple of (is_valid, message)
        """
        path = Path(path)
        if not path.exists():
            return False, "Checkpoint file not found"
        logged = {entry["file"]: entry for entry in self._read_log()}
        entry = logged.get(path.name)
        if entry is not None and entry.get("sha256") != file_digest(path):
            return False, "Checksum does not match the save log"
        try:
            load_checkpoint(path)
        except (ContractError, ValueError, KeyError) as e:
            return False, f"Unreadable checkpoint: {e}"
        return True, "Checkpoint verified"

    def list_checkpoints(self) -> List[Dict]:
        """Checkpoints on disk, newest step first"""
        checkpoints = []
        for path in sorted(self.checkpoint_dir.glob(f"ckpt_*{CHECKPOINT_SUFFIX}"), reverse=True):
            try:
                step = int(path.stem.split("_")[1])
            except (IndexError, ValueError):
                continue
            checkpoints.append({"file": path.name, "path": str(path), "step": step,
                                "size": path.stat().st_size})
        return checkpoints

    def latest(self) -> Optional[Path]:
        """Newest checkpoint that passes verification"""
        for info in self.list_checkpoints():
            valid, message = self.verify(info["path"])
            if valid:
                return Path(info["path"])
            logger.warning("Skipping checkpoint %s: %s", info["file"], message)
        return None

    def prune(self) -> int:
        """
        Remove checkpoints beyond max_checkpoints, oldest first

        Returns:
            Number of checkpoints removed
        """
        removed = 0
        for info in self.list_checkpoints()[self.max_checkpoints:]:
            logger.debug("Removing old checkpoint %s", info["file"])
            Path(info["path"]).unlink()
            removed += 1
        return removed

    def get_log(self, limit: int = 50) -> List[Dict]:
        return self._read_log()[-limit:]
