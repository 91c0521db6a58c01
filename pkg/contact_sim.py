#!/usr/bin/env python3
"""
Contact Dynamics Command Line
Generate oracle data, train the graph network, evaluate rollouts and run MPC

Usage:
    python contact_sim.py gen-data --scene scenes/floor.json --episodes 100 --steps 200 --out data/floor.bin
    python contact_sim.py train --data data/floor.bin --out runs/floor
    python contact_sim.py eval --data data/floor_test.bin --checkpoint runs/floor/ckpt_00020000.ckpt
    python contact_sim.py mpc --scene scenes/peg_in_hole.json --checkpoint runs/peg/ckpt_00020000.ckpt --episodes 10
    python contact_sim.py --help

Exit codes: 0 success, 1 usage error, 2 runtime failure
"""

import argparse
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import ConfigError, load_config, save_config
from dataset import (DatasetError, DatasetHeader, Record, read_dataset, split_by_episode,
                     write_dataset)
from epd import EncodeProcessDecode, EpdConfig
from metrics import EvalConfig, evaluate
from models import DynamicsModel, LearnedModel, OracleModel
from mpc import AgentConfig, reward_statistics, run_agent, success_summary
from oracle_sim import OracleConfig, generate_episode, jittered_start, shape_names, tool_shape_scene
from results_report import export_pdf
from scene import Scene, load_scene, scene_hash
from state import Pose
from tensor_core import load_checkpoint, restore_module, set_deterministic
from training import TrainConfig, TrainingSource, train

logger = logging.getLogger("contact_sim")

RULE = "=" * 70


class UsageError(Exception):
    """Bad command-line usage; exit code 1"""


class UsageParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for runtime failures"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"✗ ERROR: {message}", file=sys.stderr)
        sys.exit(1)


def banner(title: str, lines: Sequence[str] = ()):
    print("\n" + RULE)
    print(title)
    print(RULE)
    for line in lines:
        print(line)
    if lines:
        print(RULE)


# ----------------------------------------------------------------------
# Shared helpers
# ----------------------------------------------------------------------

def resolve_scene(header: DatasetHeader, scene_arg: Optional[str]) -> Scene:
    """Load the dataset's scene (or an explicit one) and check it is the scene the data came from"""
    path = scene_arg or header.scene_path
    if not path:
        raise UsageError("Dataset header names no scene file; pass --scene")
    scene = load_scene(path)
    digest = scene_hash(scene)
    if digest != header.scene_hash:
        raise DatasetError(f"Scene {path} does not match the dataset (hash {digest[:12]} != {header.scene_hash[:12]})")
    return scene


def parse_target(text: Optional[str], scene: Scene) -> Pose:
    if text is None:
        if scene.target is None:
            raise UsageError(f"Scene '{scene.name}' has no target; pass --target x,y,z")
        return scene.target
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--target expects comma-separated numbers, got {text!r}")
    if len(values) == 3:
        orientation = scene.target.orientation if scene.target is not None else [1.0, 0.0, 0.0, 0.0]
        return Pose(np.array(values), np.asarray(orientation))
    if len(values) == 7:
        return Pose.from_array(values)
    raise UsageError(f"--target expects 3 (position) or 7 (pose) values, got {len(values)}")


def check_checkpoint(path: str, h: int, dt: float):
    """A checkpoint only fits data with the history length and dt it was trained on"""
    header, _ = load_checkpoint(path)
    trained_h = header.get("epd", {}).get("history", h)
    trained_dt = header.get("dt", dt)
    if trained_h != h or not np.isclose(trained_dt, dt):
        raise UsageError(f"{path} was trained with h={trained_h}, dt={trained_dt}; got h={h}, dt={dt}")


def shaped_models(factory: Callable[[Scene], DynamicsModel], scene: Scene,
                  shapes: Sequence[str]) -> Callable[[int], DynamicsModel]:
    """Tool shape id -> model, building each shape's scene once"""
    cache: Dict[int, DynamicsModel] = {}

    def lookup(shape_id: int) -> DynamicsModel:
        if shape_id not in cache:
            name = shapes[shape_id] if shape_id < len(shapes) else "scene"
            cache[shape_id] = factory(tool_shape_scene(scene, name))
        return cache[shape_id]

    return lookup


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_gen_data(args, cfg: Dict) -> int:
    scene = load_scene(args.scene)
    oracle_cfg = OracleConfig.from_config(cfg, dt=scene.dt)
    episodes = cfg["gen.episodes"] if args.episodes is None else args.episodes
    steps = cfg["gen.steps"] if args.steps is None else args.steps
    if steps < oracle_cfg.history + 1:
        raise UsageError(f"--steps must be at least h+1={oracle_cfg.history + 1}, got {steps}")
    if episodes < 1:
        raise UsageError(f"--episodes must be positive, got {episodes}")
    shapes = shape_names(args.tools.split(",") if args.tools else None)

    banner("GENERATING ORACLE DATASET", [
        f"Scene:     {scene.name} ({args.scene})",
        f"Episodes:  {episodes} x {steps} steps",
        f"Seed:      {cfg['seed']}",
        f"Tools:     {', '.join(shapes[1:]) if len(shapes) > 1 else 'scene tool'}",
    ])

    records: List[Record] = []
    for episode in range(episodes):
        shape_id = 0
        if len(shapes) > 1:
            shape_id = 1 + int(np.random.default_rng([cfg["seed"], episode, 7]).integers(len(shapes) - 1))
        records.extend(generate_episode(scene, oracle_cfg, seed=[cfg["seed"], episode], steps=steps,
                                        episode=episode, tool_shape=shapes[shape_id], shape_id=shape_id,
                                        radius=cfg["graph.radius"]))
        if (episode + 1) % 10 == 0:
            logger.info("Generated %d/%d episodes", episode + 1, episodes)

    header = DatasetHeader(h=oracle_cfg.history, dt=scene.dt, scene_hash=scene_hash(scene),
                           scene_path=str(args.scene), observation_frame=oracle_cfg.observation_frame,
                           tool_shapes=shapes)
    write_dataset(args.out, header, records)
    contact = sum(r.contact for r in records)
    print(f"\n✓ Wrote {len(records)} records to {args.out}")
    print(f"  Contact fraction: {contact / max(len(records), 1):.1%}")
    return 0


def load_sources(paths: Sequence[str], scene_arg: Optional[str], fraction: float, seed: int):
    """Split every dataset by episode; all datasets must agree on h, dt and observation frame"""
    train_sources, val_sources, headers = [], [], []
    for path in paths:
        header, records, _ = read_dataset(path)
        if headers and (header.h, header.dt, header.observation_frame) != (
                headers[0].h, headers[0].dt, headers[0].observation_frame):
            raise DatasetError(f"{path}: h, dt or observation frame differs from {paths[0]}")
        scene = resolve_scene(header, scene_arg)
        train_records, val_records = split_by_episode(records, fraction, seed)
        train_sources.append(TrainingSource(scene, header, train_records))
        if val_records:
            val_sources.append(TrainingSource(scene, header, val_records))
        headers.append(header)
        logger.info("%s: %d training / %d validation records", path, len(train_records), len(val_records))
    return train_sources, val_sources, headers


def cmd_train(args, cfg: Dict) -> int:
    train_cfg = TrainConfig.from_config(cfg)
    train_sources, val_sources, headers = load_sources(args.data, args.scene, train_cfg.validation_fraction,
                                                       train_cfg.seed)
    if headers[0].h != cfg["graph.history"]:
        raise ConfigError(f"graph.history={cfg['graph.history']} but the dataset was written with h={headers[0].h}")

    network: Optional[EncodeProcessDecode] = None
    if args.init_checkpoint:
        ckpt_header, blocks = load_checkpoint(args.init_checkpoint)
        network = EncodeProcessDecode(EpdConfig(**ckpt_header["epd"]))
        restore_module(network, blocks)
        print(f"✓ Fine-tuning from {args.init_checkpoint}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    banner("TRAINING GRAPH NETWORK", [
        f"Datasets:  {', '.join(args.data)}",
        f"Records:   {sum(len(s.records) for s in train_sources)} train / "
        f"{sum(len(s.records) for s in val_sources)} validation",
        f"Steps:     {train_cfg.steps} (batch {train_cfg.batch_size})",
        f"Output:    {out}",
    ])
    header = {
        "dt": headers[0].dt,
        "radius": cfg["graph.radius"],
        "observation_frame": headers[0].observation_frame,
        "scene_hash": headers[0].scene_hash,
        "datasets": [str(p) for p in args.data],
    }
    _, log = train(train_sources, train_cfg, out, EpdConfig.from_config(cfg), network, val_sources, header)
    if log.empty:
        print("\n⚠ Nothing to do: the latest checkpoint already reached train.steps")
        return 0
    last = log.iloc[-1]
    print(f"\n✓ Trained to step {int(last['step'])}, final loss {last['train_loss']:.6f}")
    validated = log["val_loss"].dropna()
    if not validated.empty:
        print(f"  Last validation loss: {validated.iloc[-1]:.6f}")
    print(f"  Metrics log: {out / 'metrics.csv'}")
    return 0


def cmd_eval(args, cfg: Dict) -> int:
    header, records, _ = read_dataset(args.data)
    scene = resolve_scene(header, args.scene)
    eval_cfg = EvalConfig.from_config(cfg)
    eval_cfg = replace(eval_cfg,
                       rollout_len=args.rollout_len or eval_cfg.rollout_len,
                       windows=args.windows or eval_cfg.windows)

    if args.oracle_baseline:
        oracle_cfg = replace(OracleConfig.from_config(cfg, dt=header.dt), observation_frame=header.observation_frame)
        models = shaped_models(lambda s: OracleModel(s, oracle_cfg), scene, header.tool_shapes)
        label = "oracle"
    else:
        check_checkpoint(args.checkpoint, header.h, header.dt)
        models = shaped_models(lambda s: LearnedModel.from_checkpoint(args.checkpoint, s), scene, header.tool_shapes)
        label = Path(args.checkpoint).name

    banner("EVALUATING ROLLOUTS", [
        f"Dataset:   {args.data} ({len(records)} records)",
        f"Model:     {label}",
        f"Windows:   {eval_cfg.windows} x {eval_cfg.rollout_len} steps",
    ])
    table, curve = evaluate(models, records, header.dt, eval_cfg.rollout_len, eval_cfg.windows,
                            eval_cfg.seed, curve=bool(args.curve))
    table.insert(0, "model", label)
    print(table.to_string(index=False))

    if args.out:
        table.to_csv(args.out, index=False)
        print(f"\n✓ Results written to {args.out}")
    if curve is not None:
        curve.to_csv(args.curve, index=False)
        print(f"✓ RMSE curve written to {args.curve}")
    if args.pdf:
        export_pdf(table, args.pdf, title="Rollout Evaluation", notes={"Dataset": args.data, "Model": label})
        print(f"✓ PDF report written to {args.pdf}")
    if table["truncated"].iloc[0]:
        print(f"\n⚠ {int(table['truncated'].iloc[0])} window(s) truncated by non-finite predictions")
    return 0


def cmd_mpc(args, cfg: Dict) -> int:
    scene = load_scene(args.scene)
    target = parse_target(args.target, scene)
    oracle_cfg = OracleConfig.from_config(cfg, dt=scene.dt)
    agent_cfg = AgentConfig.from_config(cfg)
    environment = OracleModel(scene, oracle_cfg)
    if args.oracle_model:
        model: DynamicsModel = environment
        label = "oracle"
    else:
        check_checkpoint(args.checkpoint, agent_cfg.history, scene.dt)
        model = LearnedModel.from_checkpoint(args.checkpoint, scene)
        label = Path(args.checkpoint).name

    banner("RUNNING MPC AGENT", [
        f"Scene:     {scene.name}",
        f"Model:     {label}",
        f"Target:    {np.round(target.position, 4).tolist()}",
        f"Episodes:  {args.episodes} (max {agent_cfg.max_steps} steps)",
    ])
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    traces = []
    for episode in range(args.episodes):
        start = jittered_start(scene, np.random.default_rng([cfg["seed"], episode, 11]), oracle_cfg)
        trace = run_agent(model, scene, target, agent_cfg, seed=cfg["seed"], environment=environment,
                          start=start, episode=episode, record=bool(args.record_dataset))
        traces.append(trace)
        print(f"  Episode {episode:3d}: {'✓ success' if trace.success else '✗ no success'} "
              f"after {trace.steps} steps, insertion {trace.insertion:.0%}")
        if out is not None:
            trace.to_frame().to_csv(out / f"episode_{episode:03d}.csv", index=False)

    summary = success_summary(traces)
    banner("MPC SUMMARY", [
        f"  Successes:          {summary['successes']}/{summary['episodes']}",
        f"  Inserted halfway:   {summary['halfway']}/{summary['episodes']}",
        f"  Mean steps:         {summary['mean_steps']:.1f}",
    ])
    if out is not None:
        pd.DataFrame([summary]).to_csv(out / "summary.csv", index=False)
    if args.reward_stats:
        reward_statistics(traces).to_csv(args.reward_stats, index=False)
        print(f"✓ Reward statistics written to {args.reward_stats}")
    if args.record_dataset:
        header = DatasetHeader(h=agent_cfg.history, dt=scene.dt, scene_hash=scene_hash(scene),
                               scene_path=str(args.scene), observation_frame=oracle_cfg.observation_frame)
        write_dataset(args.record_dataset, header, [r for t in traces for r in t.records])
        print(f"✓ Executed transitions written to {args.record_dataset}")
    if args.pdf:
        export_pdf(pd.DataFrame(), args.pdf, title="MPC Episodes", mpc_summary=summary,
                   notes={"Scene": scene.name, "Model": label})
        print(f"✓ PDF report written to {args.pdf}")
    return 0


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='JSON file of flat dotted configuration keys')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one configuration key (repeatable)')
    common.add_argument('--seed', type=int, help='Random seed (overrides the "seed" key)')
    common.add_argument('--threads', type=int, help='Cap on CPU threads')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging and tracebacks')

    parser = UsageParser(
        description='Learned contact dynamics: data generation, training, evaluation and MPC',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Small free-flight dataset
  python contact_sim.py gen-data --scene scenes/free_flight.json --episodes 20 --steps 120 --out data/ff.bin

  # Random tool shapes around a slot
  python contact_sim.py gen-data --scene scenes/peg_in_hole.json --tools triangle,square,hexagon --out data/peg.bin

  # Train on two datasets, fewer steps
  python contact_sim.py train --data data/ff.bin --data data/peg.bin --out runs/combined --set train.steps=2000

  # Oracle self-evaluation (all errors are zero)
  python contact_sim.py eval --data data/ff.bin --oracle-baseline

  # MPC with the learned model, traces to a directory
  python contact_sim.py mpc --scene scenes/peg_in_hole.json --checkpoint runs/peg/ckpt_00020000.ckpt --out runs/mpc
        """
    )
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    gen = sub.add_parser('gen-data', parents=[common], help='Generate an oracle dataset')
    gen.add_argument('--scene', required=True, help='Scene description file')
    gen.add_argument('--episodes', type=int, help='Number of episodes (gen.episodes)')
    gen.add_argument('--steps', type=int, help='Control steps per episode (gen.steps)')
    gen.add_argument('--tools', type=str, help='Comma-separated random tool shapes (triangle,square,hexagon)')
    gen.add_argument('--out', required=True, help='Dataset file to write')

    tr = sub.add_parser('train', parents=[common], help='Train the graph network')
    tr.add_argument('--data', action='append', required=True, help='Dataset file (repeatable)')
    tr.add_argument('--scene', help='Scene file (default: the one named in the dataset header)')
    tr.add_argument('--out', required=True, help='Directory for checkpoints and metrics.csv')
    tr.add_argument('--init-checkpoint', help='Fine-tune from this checkpoint')

    ev = sub.add_parser('eval', parents=[common], help='Evaluate rollouts against a dataset')
    ev.add_argument('--data', required=True, help='Evaluation dataset')
    ev.add_argument('--scene', help='Scene file (default: the one named in the dataset header)')
    which = ev.add_mutually_exclusive_group(required=True)
    which.add_argument('--checkpoint', help='Learned model checkpoint')
    which.add_argument('--oracle-baseline', action='store_true', help='Evaluate the oracle itself')
    ev.add_argument('--windows', type=int, help='Number of rollout windows (eval.windows)')
    ev.add_argument('--rollout-len', type=int, help='Rollout length T (eval.rollout_len)')
    ev.add_argument('--curve', help='Write the RMSE-vs-T curve to this CSV')
    ev.add_argument('--out', help='Write the results table to this CSV')
    ev.add_argument('--pdf', help='Write a PDF report')

    mp = sub.add_parser('mpc', parents=[common], help='Run the MPC agent in the oracle environment')
    mp.add_argument('--scene', required=True, help='Scene description file')
    model = mp.add_mutually_exclusive_group(required=True)
    model.add_argument('--checkpoint', help='Learned model checkpoint')
    model.add_argument('--oracle-model', action='store_true', help='Plan with the oracle itself')
    mp.add_argument('--target', help='Target position x,y,z or pose x,y,z,qw,qx,qy,qz (default: scene target)')
    mp.add_argument('--episodes', type=int, default=10, help='Number of episodes')
    mp.add_argument('--out', help='Directory for per-episode traces and summary.csv')
    mp.add_argument('--record-dataset', help='Write executed transitions as a dataset')
    mp.add_argument('--reward-stats', help='Write per-step reward statistics to this CSV')
    mp.add_argument('--pdf', help='Write a PDF summary')
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "mpc": cmd_mpc}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        print("\n⚠ Please specify a command: gen-data, train, eval or mpc")
        return 1

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="[%(levelname)s] %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        cfg = load_config(args.config, overrides)
        set_deterministic(cfg["seed"], cfg["threads"])
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"\n✗ ERROR: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"\n✗ ERROR in {args.command}: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
