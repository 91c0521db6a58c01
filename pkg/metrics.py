"""
Metrics Module
Rollout accuracy of a dynamics model against recorded episodes:
- Autoregressive rollouts
- Absolute and relative multi-step position / rotation RMSE
- One-step force-torque RMSE
- RMSE curves over the rollout length and the evaluation table
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from dataset import Record, record_history
from models import DynamicsModel
from state import (Action, Observation, Pose, State, StateHistory, quaternion_angle, quaternion_inverse,
                   quaternion_multiply)
from tensor_core import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_ROLLOUT_LENGTH = 100
RESULT_COLUMNS = ["rmse_pos_abs", "rmse_pos_rel", "rmse_rot_abs", "rmse_rot_rel", "force_rmse", "torque_rmse"]


class UndefinedRelativeError(ZeroDivisionError):
    """Raised when the zero-motion reference error is zero"""


@dataclass
class EvalConfig:
    rollout_len: int = DEFAULT_ROLLOUT_LENGTH
    windows: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.rollout_len < 1 or self.windows < 1:
            raise ValueError(f"Need rollout_len >= 1 and windows >= 1, got {self.rollout_len} and {self.windows}")

    @classmethod
    def from_config(cls, cfg: Dict) -> "EvalConfig":
        return cls(rollout_len=cfg.get("eval.rollout_len", DEFAULT_ROLLOUT_LENGTH),
                   windows=cfg.get("eval.windows", 20), seed=cfg.get("seed", 0))


@dataclass
class Rollout:
    states: List[State] = field(default_factory=list)
    observations: List[Observation] = field(default_factory=list)
    truncated: bool = False


def rollout_model(model: DynamicsModel, history: StateHistory, actions: Sequence[Action]) -> Rollout:
    """Feed each predicted state back as the next input; stop at the first non-finite prediction"""
    if len(actions) < 1:
        raise ValueError("Rollout needs at least one action")
    rollout = Rollout()
    for action in actions:
        try:
            state, observation = model.step(history, action)
        except (ArithmeticError, ValueError) as e:
            logger.debug("Rollout truncated after %d steps: %s", len(rollout.states), e)
            rollout.truncated = True
            break
        if not (np.all(np.isfinite(state.as_array())) and np.all(np.isfinite(observation.as_array()))):
            rollout.truncated = True
            break
        rollout.states.append(state)
        rollout.observations.append(observation)
        history = history.push(state)
    return rollout


# ----------------------------------------------------------------------
# Error definitions
# ----------------------------------------------------------------------

def _positions(trajectory) -> np.ndarray:
    if len(trajectory) and isinstance(trajectory[0], (Pose, State)):
        return np.stack([(x.pose if isinstance(x, State) else x).position for x in trajectory])
    return np.asarray(trajectory, dtype=np.float64).reshape(-1, 3)


def _orientations(trajectory) -> np.ndarray:
    if len(trajectory) and isinstance(trajectory[0], (Pose, State)):
        return np.stack([(x.pose if isinstance(x, State) else x).orientation for x in trajectory])
    return np.asarray(trajectory, dtype=np.float64).reshape(-1, 4)


def _window(pred: np.ndarray, truth: np.ndarray, T: int):
    if T < 1 or len(pred) < T + 1 or len(truth) < T + 1:
        raise ShapeError(f"Trajectories of length {len(pred)} and {len(truth)} are too short for T={T} "
                         f"(index 0 is the shared initial state)")


def rmse_pos(pred, truth, T: int, relative: bool = False) -> float:
    """
    Multi-step position RMSE over steps 1..T

    Both trajectories start at the shared initial state (index 0). The
    relative form divides by the error of a predictor frozen at p_0.
    """
    pred, truth = _positions(pred), _positions(truth)
    _window(pred, truth, T)
    error = np.sqrt(np.mean(np.sum((pred[1:T + 1] - truth[1:T + 1]) ** 2, axis=1)))
    if not relative:
        return float(error)
    reference = np.sqrt(np.mean(np.sum((truth[0] - truth[1:T + 1]) ** 2, axis=1)))
    if reference == 0.0:
        raise UndefinedRelativeError("Ground-truth positions never move; relative RMSE is undefined")
    return float(error / reference)


def rotation_errors(pred_q: np.ndarray, truth_q: np.ndarray) -> np.ndarray:
    """Angle of q_t^-1 q_hat_t per step (rad)"""
    return np.array([quaternion_angle(quaternion_multiply(quaternion_inverse(t), p))
                     for p, t in zip(pred_q, truth_q)])


def rmse_rot(pred, truth, T: int, relative: bool = False) -> float:
    """Multi-step rotation RMSE over steps 1..T, same conventions as rmse_pos"""
    pred, truth = _orientations(pred), _orientations(truth)
    _window(pred, truth, T)
    error = np.sqrt(np.mean(rotation_errors(pred[1:T + 1], truth[1:T + 1]) ** 2))
    if not relative:
        return float(error)
    frozen = np.repeat(truth[:1], T, axis=0)
    reference = np.sqrt(np.mean(rotation_errors(frozen, truth[1:T + 1]) ** 2))
    if reference == 0.0:
        raise UndefinedRelativeError("Ground-truth orientation never changes; relative RMSE is undefined")
    return float(error / reference)


def ft_rmse(pred, truth) -> Tuple[float, float]:
    """One-step (force RMSE, torque RMSE)"""
    pred = np.stack([p.as_array() if isinstance(p, Observation) else np.asarray(p, dtype=np.float64) for p in pred])
    truth = np.stack([t.as_array() if isinstance(t, Observation) else np.asarray(t, dtype=np.float64) for t in truth])
    if pred.shape != truth.shape:
        raise ShapeError(f"Observation counts differ: {pred.shape[0]} vs {truth.shape[0]}")
    diff = pred - truth
    return (float(np.sqrt(np.mean(np.sum(diff[:, :3] ** 2, axis=1)))),
            float(np.sqrt(np.mean(np.sum(diff[:, 3:] ** 2, axis=1)))))


def rmse_curve(preds: Sequence, truths: Sequence, T_max: int) -> pd.DataFrame:
    """
    Absolute position and rotation RMSE for T = 1..T_max across windows

    Returns:
        One row per T with median and 25/75 percentiles of both errors
    """
    rows = []
    for T in range(1, T_max + 1):
        pos = [rmse_pos(p, t, T) for p, t in zip(preds, truths) if len(p) > T and len(t) > T]
        rot = [rmse_rot(p, t, T) for p, t in zip(preds, truths) if len(p) > T and len(t) > T]
        if not pos:
            break
        rows.append({
            "T": T,
            "pos_median": float(np.median(pos)), "pos_q25": float(np.percentile(pos, 25)),
            "pos_q75": float(np.percentile(pos, 75)),
            "rot_median": float(np.median(rot)), "rot_q25": float(np.percentile(rot, 25)),
            "rot_q75": float(np.percentile(rot, 75)),
            "windows": len(pos),
        })
    return pd.DataFrame(rows)


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------

def episode_runs(records: Sequence[Record]) -> List[List[Record]]:
    """Records split into runs of consecutive steps within one episode"""
    by_episode: Dict[int, List[Record]] = {}
    for record in records:
        by_episode.setdefault(record.episode, []).append(record)
    runs = []
    for episode in sorted(by_episode):
        ordered = sorted(by_episode[episode], key=lambda r: r.step)
        run = [ordered[0]]
        for record in ordered[1:]:
            if record.step == run[-1].step + 1:
                run.append(record)
            else:
                runs.append(run)
                run = [record]
        runs.append(run)
    return runs


def sample_windows(records: Sequence[Record], T: int, count: int, seed: int = 0) -> List[List[Record]]:
    """Up to `count` distinct windows of T consecutive records, seeded"""
    runs = episode_runs(records)
    starts = [(r, k) for r, run in enumerate(runs) for k in range(len(run) - T + 1)]
    if not starts:
        return []
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(starts), size=min(count, len(starts)), replace=False)
    return [runs[starts[i][0]][starts[i][1]:starts[i][1] + T] for i in sorted(picks)]


def window_truth(window: Sequence[Record]) -> List[Pose]:
    return [window[0].pose(0)] + [r.next for r in window]


ModelLookup = Union[DynamicsModel, Callable[[int], DynamicsModel]]


def _model_for(models: ModelLookup, record: Record) -> DynamicsModel:
    return models if isinstance(models, DynamicsModel) else models(record.tool_shape)


def evaluate(models: ModelLookup, records: Sequence[Record], dt: float, T: int = DEFAULT_ROLLOUT_LENGTH,
             windows: int = 20, seed: int = 0, curve: bool = False
             ) -> Tuple[pd.DataFrame, Optional[pd.DataFrame]]:
    """
    Multi-step rollout errors over sampled windows plus one-step F/T errors

    Args:
        models: a dynamics model, or a lookup from tool shape id to model
        records: evaluation records
        dt: time step of the records
        T: rollout length per window
        windows: number of windows
        seed: window sampling seed
        curve: also return the RMSE-vs-T curve

    Returns:
        (one-row results table, curve table or None)
    """
    sampled = sample_windows(records, T, windows, seed)
    if not sampled:
        raise ValueError(f"No run of {T} consecutive records to evaluate")

    results = {name: [] for name in ("pos_abs", "pos_rel", "rot_abs", "rot_rel")}
    preds, truths = [], []
    one_step_pred, one_step_truth = [], []
    truncated = 0
    for window in sampled:
        model = _model_for(models, window[0])
        history = record_history(window[0], dt)
        rollout = rollout_model(model, history, [r.action for r in window])
        truth = window_truth(window)
        pred = [window[0].pose(0)] + [s.pose for s in rollout.states]
        preds.append(pred)
        truths.append(truth)
        if rollout.truncated:
            truncated += 1
            continue
        results["pos_abs"].append(rmse_pos(pred, truth, T))
        results["rot_abs"].append(rmse_rot(pred, truth, T))
        try:
            results["pos_rel"].append(rmse_pos(pred, truth, T, relative=True))
        except UndefinedRelativeError:
            pass
        try:
            results["rot_rel"].append(rmse_rot(pred, truth, T, relative=True))
        except UndefinedRelativeError:
            pass
        for record in window:
            _, observation = model.step(record_history(record, dt), record.action)
            one_step_pred.append(observation)
            one_step_truth.append(record.observation)

    force, torque = ft_rmse(one_step_pred, one_step_truth) if one_step_pred else (np.nan, np.nan)
    table = pd.DataFrame([{
        "rmse_pos_abs": float(np.mean(results["pos_abs"])) if results["pos_abs"] else np.nan,
        "rmse_pos_rel": float(np.mean(results["pos_rel"])) if results["pos_rel"] else np.nan,
        "rmse_rot_abs": float(np.mean(results["rot_abs"])) if results["rot_abs"] else np.nan,
        "rmse_rot_rel": float(np.mean(results["rot_rel"])) if results["rot_rel"] else np.nan,
        "force_rmse": force,
        "torque_rmse": torque,
        "windows": len(sampled),
        "truncated": truncated,
        "T": T,
    }])
    logger.info("Evaluated %d windows of %d steps (%d truncated)", len(sampled), T, truncated)
    return table, (rmse_curve(preds, truths, T) if curve else None)
