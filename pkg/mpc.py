"""
MPC Module
Sampling-based model predictive control of the tool:
- Tip-to-target reward with a success bonus
- iCEM planner (colored-noise sampling, elites, momentum, warm starts)
- Agent loop executing plans against the oracle environment
- Episode traces, insertion depth and reward statistics
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from dataset import Record
from geometry import DEFAULT_COLLISION_RADIUS, detect_collisions
from models import DynamicsModel, OracleModel
from scene import Scene
from state import (Action, DEFAULT_HISTORY, Observation, Pose, State, StateHistory, quaternion_angle,
                   quaternion_inverse, quaternion_multiply)

logger = logging.getLogger(__name__)

SUCCESS_BONUS = 10.0
DEFAULT_EPSILON = 0.002


class PlanningError(RuntimeError):
    """Raised when no candidate action sequence could be evaluated"""


@dataclass
class AgentConfig:
    particles: int = 1
    horizon: int = 50
    samples: int = 20
    iterations: int = 5
    replan_freq: int = 5
    elite_fraction: float = 0.1
    noise_beta: float = 2.0
    momentum: float = 0.1
    std_floor: float = 1e-3       # fraction of the bound range
    init_std: float = 0.5         # fraction of the bound half-range
    force_limit: float = 1.0      # N
    torque_limit: float = 0.002   # N m
    epsilon: float = DEFAULT_EPSILON
    max_steps: int = 150
    history: int = DEFAULT_HISTORY
    radius: float = DEFAULT_COLLISION_RADIUS   # m, contact pairs of recorded transitions

    def __post_init__(self):
        if self.particles != 1:
            raise ValueError("Only deterministic rollouts (particles=1) are supported")
        if not self.samples >= self.elites >= 2:
            raise ValueError(f"Need samples >= elites >= 2, got samples={self.samples}, elites={self.elites}")
        if self.horizon < self.replan_freq:
            raise ValueError(f"Horizon {self.horizon} shorter than replan frequency {self.replan_freq}")
        if not self.epsilon > 0.0:
            raise ValueError(f"Success threshold must be positive, got {self.epsilon}")
        if not self.radius > 0.0:
            raise ValueError(f"Contact radius must be positive, got {self.radius}")

    @classmethod
    def from_config(cls, cfg: Dict) -> "AgentConfig":
        names = ("particles", "horizon", "samples", "iterations", "replan_freq", "elite_fraction",
                 "noise_beta", "momentum", "std_floor", "init_std", "force_limit", "torque_limit",
                 "epsilon", "max_steps")
        values = {name: cfg[f"mpc.{name}"] for name in names if f"mpc.{name}" in cfg}
        if "graph.history" in cfg:
            values["history"] = cfg["graph.history"]
        if "graph.radius" in cfg:
            values["radius"] = cfg["graph.radius"]
        return cls(**values)

    @property
    def elites(self) -> int:
        return max(2, math.ceil(self.elite_fraction * self.samples))

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        upper = np.array([self.force_limit] * 3 + [self.torque_limit] * 3, dtype=np.float64)
        return -upper, upper


@dataclass(eq=False)
class Plan:
    actions: np.ndarray   # (horizon, 6)
    mean: np.ndarray      # (horizon, 6)
    std: np.ndarray       # (horizon, 6)
    score: float = -np.inf

    def shifted(self, steps: int, fill: np.ndarray) -> np.ndarray:
        """Mean advanced by `steps`, padded with `fill`"""
        tail = np.repeat(fill[None, :], steps, axis=0)
        return np.concatenate([self.mean[steps:], tail], axis=0)[:self.mean.shape[0]]


# ----------------------------------------------------------------------
# Reward
# ----------------------------------------------------------------------

def tip_errors(state: State, target: Pose, tool_tip: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """(tip distance in m, rotation error in rad)"""
    tip = state.pose.apply(np.zeros(3) if tool_tip is None else tool_tip)
    distance = float(np.linalg.norm(tip - target.position))
    angle = quaternion_angle(quaternion_multiply(quaternion_inverse(target.orientation), state.pose.orientation))
    return distance, angle


def reward(state: State, target: Pose, epsilon: float = DEFAULT_EPSILON,
           tool_tip: Optional[np.ndarray] = None) -> float:
    if not epsilon > 0.0:
        raise ValueError(f"Success threshold must be positive, got {epsilon}")
    distance, angle = tip_errors(state, target, tool_tip)
    bonus = SUCCESS_BONUS if distance <= epsilon else 0.0
    return bonus + math.exp(-distance) + math.exp(-angle)


# ----------------------------------------------------------------------
# Planner
# ----------------------------------------------------------------------

def colored_noise(beta: float, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian noise with a 1/f^beta power spectrum along the last axis"""
    n = shape[-1]
    if n < 2 or beta == 0.0:
        return rng.standard_normal(shape)
    freqs = np.fft.rfftfreq(n)
    scale = np.maximum(freqs, 1.0 / n) ** (-beta / 2.0)
    weights = scale[1:].copy()
    weights[-1] *= (1 + (n % 2)) / 2.0
    sigma = 2.0 * np.sqrt(np.sum(weights ** 2)) / n

    real = rng.standard_normal(shape[:-1] + (freqs.size,)) * scale
    imag = rng.standard_normal(shape[:-1] + (freqs.size,)) * scale
    if n % 2 == 0:
        imag[..., -1] = 0.0
        real[..., -1] *= np.sqrt(2.0)
    imag[..., 0] = 0.0
    real[..., 0] *= np.sqrt(2.0)
    return np.fft.irfft(real + 1j * imag, n=n, axis=-1) / sigma


def rollout_returns(model: DynamicsModel, history: StateHistory, candidates: np.ndarray, target: Pose,
                    epsilon: float) -> np.ndarray:
    """Summed reward of each candidate sequence; -inf where the rollout failed"""
    count, horizon = candidates.shape[:2]
    tool_tip = model.scene.tool_tip
    histories: List[Optional[StateHistory]] = [history] * count
    returns = np.zeros(count)
    for t in range(horizon):
        alive = [k for k in range(count) if histories[k] is not None]
        if not alive:
            break
        actions = [Action.from_array(candidates[k, t]) for k in alive]
        try:
            states, _ = model.step_batch([histories[k] for k in alive], actions)
        except (ArithmeticError, ValueError):
            states = []
            for k, action in zip(alive, actions):
                try:
                    states.append(model.step(histories[k], action)[0])
                except (ArithmeticError, ValueError):
                    states.append(None)
        for k, state in zip(alive, states):
            if state is None or not np.all(np.isfinite(state.as_array())):
                histories[k] = None
                returns[k] = -np.inf
                continue
            histories[k] = histories[k].push(state)
            returns[k] += reward(state, target, epsilon, tool_tip)
    return returns


def icem_plan(model: DynamicsModel, history: StateHistory, target: Pose, cfg: AgentConfig, seed=None,
              prev_plan: Optional[Plan] = None, shift: int = 0) -> Plan:
    """
    Improved cross-entropy planning with a fixed population size

    The elites of one iteration are carried into the next population, so
    on a deterministic model the elite objective never gets worse.

    Args:
        model: dynamics model used for rollouts
        history: current state window
        target: tip target pose
        cfg: agent configuration
        seed: sampling seed
        prev_plan: previous plan; its mean, shifted by `shift` executed
                   steps, warm-starts the sampling distribution
    """
    lower, upper = cfg.bounds
    span = upper - lower
    center = 0.5 * (lower + upper)
    floor = cfg.std_floor * span
    horizon = cfg.horizon

    if prev_plan is not None:
        mean = prev_plan.shifted(shift, center)
    else:
        mean = np.tile(center, (horizon, 1))
    std = np.tile(np.maximum(cfg.init_std * 0.5 * span, floor), (horizon, 1))
    rng = np.random.default_rng(seed)
    best_actions, best_score = np.clip(mean, lower, upper), -np.inf
    kept = np.empty((0, horizon, 6))

    for iteration in range(cfg.iterations):
        fresh = cfg.samples - len(kept)
        candidates = kept
        if fresh > 0:
            noise = colored_noise(cfg.noise_beta, (fresh, 6, horizon), rng).transpose(0, 2, 1)
            candidates = np.concatenate([np.clip(mean + std * noise, lower, upper), kept])
        returns = rollout_returns(model, history, candidates, target, cfg.epsilon)
        if not np.any(np.isfinite(returns)):
            raise PlanningError(f"Every candidate rollout failed in iteration {iteration}")

        order = np.argsort(-returns, kind="stable")
        elites = candidates[order[:cfg.elites]]
        kept = elites[np.isfinite(returns[order[:cfg.elites]])]
        finite = returns[np.isfinite(returns)]
        if finite.max() == finite.min():
            # ties carry no ranking information: keep the mean, shrink the spread
            std = np.maximum(cfg.momentum * std, floor)
        else:
            mean = (1.0 - cfg.momentum) * elites.mean(axis=0) + cfg.momentum * mean
            std = np.maximum((1.0 - cfg.momentum) * elites.std(axis=0) + cfg.momentum * std, floor)
        if returns[order[0]] > best_score:
            best_score = float(returns[order[0]])
            best_actions = candidates[order[0]].copy()
        logger.debug("iCEM iteration %d: best %.4f elite mean %.4f", iteration, returns[order[0]],
                     float(np.mean(returns[order[:cfg.elites]])))

    return Plan(best_actions, mean, std, best_score)


# ----------------------------------------------------------------------
# Agent
# ----------------------------------------------------------------------

@dataclass
class EpisodeTrace:
    rows: List[Dict] = field(default_factory=list)
    success: bool = False
    steps: int = 0
    insertion: float = 0.0
    records: List[Record] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


def insertion_fraction(scene: Scene, target: Pose, state: State) -> float:
    """Share of the slot depth the tip has travelled along the insertion axis"""
    if scene.insertion_axis is None or scene.insertion_depth <= 0.0:
        return 0.0
    entry = target.position - scene.insertion_axis * scene.insertion_depth
    travelled = float((scene.tip_position(state.pose) - entry) @ scene.insertion_axis)
    return float(np.clip(travelled / scene.insertion_depth, 0.0, 1.0))


def _trace_row(step: int, state: State, action: Action, observation: Observation, value: float,
               distance: float) -> Dict:
    row = {"step": step}
    row.update({f"pose_{k}": v for k, v in enumerate(state.pose.as_array())})
    row.update({f"twist_{k}": v for k, v in enumerate(state.twist.as_array())})
    row.update({f"action_{k}": v for k, v in enumerate(action.as_array())})
    row.update({f"observation_{k}": v for k, v in enumerate(observation.as_array())})
    row["reward"] = value
    row["distance_reward"] = math.exp(-distance)
    row["distance"] = distance
    return row


def run_agent(model: DynamicsModel, scene: Scene, target: Pose, cfg: AgentConfig,
              max_steps: Optional[int] = None, seed: int = 0, environment: Optional[DynamicsModel] = None,
              start: Optional[Pose] = None, episode: int = 0, record: bool = False) -> EpisodeTrace:
    """
    Run one MPC episode against the environment (oracle by default)

    Replans every `replan_freq` steps and stops on success (tip within
    epsilon of the target) or after `max_steps`.
    """
    environment = environment or OracleModel(scene)
    max_steps = cfg.max_steps if max_steps is None else max_steps
    history = StateHistory.constant(State.at_rest(start or scene.start_pose), cfg.history)
    trace = EpisodeTrace()
    poses = [history.current.pose] * (cfg.history + 1)

    distance, _ = tip_errors(history.current, target, scene.tool_tip)
    trace.insertion = insertion_fraction(scene, target, history.current)
    if distance < cfg.epsilon:
        trace.success = True
        return trace

    plan: Optional[Plan] = None
    step = 0
    while step < max_steps and not trace.success:
        plan = icem_plan(model, history, target, cfg, seed=[seed, episode, step], prev_plan=plan,
                         shift=cfg.replan_freq if plan is not None else 0)
        for action_values in plan.actions[:cfg.replan_freq]:
            action = Action.from_array(action_values)
            current = history.current
            state, observation = environment.step(history, action)
            history = history.push(state)
            step += 1
            value = reward(state, target, cfg.epsilon, scene.tool_tip)
            distance, _ = tip_errors(state, target, scene.tool_tip)
            trace.rows.append(_trace_row(step, state, action, observation, value, distance))
            trace.insertion = max(trace.insertion, insertion_fraction(scene, target, state))
            if record:
                contacts = detect_collisions(scene.posed_bodies(current.pose), cfg.radius)
                trace.records.append(Record(
                    episode=episode, step=step - 1,
                    poses=np.stack([p.as_array() for p in poses[:cfg.history + 1]]),
                    twist=current.twist.as_array(), action=action, observation=observation,
                    next_pose=state.pose.as_array(), contact=bool(np.any(observation.as_array() != 0.0)),
                    contacts=tuple(pair.key for pair in contacts),
                ))
                poses = [state.pose] + poses[:cfg.history]
            if distance < cfg.epsilon:
                trace.success = True
                break
            if step >= max_steps:
                break
    trace.steps = step
    logger.info("Episode %d: %s after %d steps (insertion %.0f%%)", episode,
                "success" if trace.success else "no success", step, 100.0 * trace.insertion)
    return trace


def success_summary(traces: Sequence[EpisodeTrace]) -> Dict:
    return {
        "episodes": len(traces),
        "successes": sum(t.success for t in traces),
        "halfway": sum(t.insertion >= 0.5 for t in traces),
        "mean_steps": float(np.mean([t.steps for t in traces])) if traces else 0.0,
    }


def reward_statistics(traces: Sequence[EpisodeTrace]) -> pd.DataFrame:
    """Per-step median and interquartile band of the distance reward across episodes"""
    frames = [t.to_frame()[["step", "distance_reward"]] for t in traces if t.rows]
    if not frames:
        return pd.DataFrame(columns=["step", "median", "q25", "q75", "episodes"])
    grouped = pd.concat(frames).groupby("step")["distance_reward"]
    stats = pd.DataFrame({
        "median": grouped.median(),
        "q25": grouped.quantile(0.25),
        "q75": grouped.quantile(0.75),
        "episodes": grouped.count(),
    }).reset_index()
    return stats
