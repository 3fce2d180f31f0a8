"""Command-line entry point: gen-data, train, eval, ingest, oracle, baseline, sweep."""
import argparse
import dataclasses
import json
import os
import platform
import sys
import time
from importlib import metadata
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
import torch
import yaml
from dotenv import load_dotenv

from .baselines import PolicyKind, baseline_curves
from .config import (
    RunConfig,
    build_config,
    ensure_dir,
    expand_sweep,
    read_config_file,
    write_resolved,
)
from .data_ingest import expected_groups, extract_archives, fetch_dataset, ingest_group
from .errors import CTStopError, ConfigError, DataError, RuntimeFailure
from .eval_harness import (
    evaluate_targets,
    load_measured_targets,
    plot_baseline_curves,
    summarize,
    synthetic_targets,
)
from .logging_utils import attach_run_log, detach_run_logs, get_logger, set_level
from .phantom_gen import load_dataset, rotation_pool, sample_dataset, save_dataset
from .policy_net import N_ANGLES, build_network, make_optimizer
from .rl_train import train_naive, train_terminal
from .scan_env import ScanEnvironment
from .storage import export_run_bundle, load_checkpoint, write_table
from .tabular_oracle import run_oracle_suite

logger = get_logger("cli")

SUBCOMMANDS = ("gen-data", "train", "eval", "ingest", "oracle", "baseline", "sweep")
VERSIONED_PACKAGES = ("numpy", "scipy", "torch", "pandas", "matplotlib", "pyyaml", "tqdm", "requests", "tifffile")

# dedicated flag -> dotted config key
FLAG_KEYS = {
    "cost_b": "reward.cost_b",
    "episodes": "train.episodes",
    "seed": "seed",
    "threads": "threads",
    "out_dir": "paths.out_dir",
    "variant": "variant",
    "noise_eta": "noise.eta",
    "resume": "paths.resume",
    "checkpoint": "paths.checkpoint",
    "log_level": "log_level",
}


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML file (or key = value lines in a .cfg/.txt file)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any dotted config key")
    p.add_argument("--cost-b", type=float, help="per-angle cost magnitude b")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--variant", choices=("naive", "terminal"))
    p.add_argument("--noise-eta", type=float)
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    p.add_argument("--bundle", action="store_true", help="zip the run directory when done")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctstop", description="Learned angle selection and stopping for sparse-angle CT")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    common = _common_flags()
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "sweep":
            sp.add_argument("--run", choices=("train", "eval", "baseline"), default="train",
                            help="subcommand executed once per sweep combination")
    return parser


def _parse_set(items: Sequence[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        value = value.strip()
        # list literals stay lists so `sweep` can expand them
        if value.startswith("["):
            try:
                value = yaml.safe_load(value)
            except yaml.YAMLError as e:
                raise ConfigError(f"--set {key.strip()}: not a valid list ({e})") from e
        out[key.strip()] = value
    return out


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """--set values first, dedicated flags after, so a flag wins over --set for the same key."""
    overrides = _parse_set(args.set)
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _config_for(subcommand: str, flat: Dict[str, Any], overrides: Dict[str, Any]) -> RunConfig:
    return build_config(flat, {**overrides, "subcommand": subcommand})


def _versions() -> Dict[str, str]:
    out = {}
    for name in VERSIONED_PACKAGES:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = "missing"
    return out


def new_run_dir(cfg: RunConfig) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(cfg.paths.out_dir, f"{stamp}_{cfg.subcommand}")
    run_dir, n = base, 1
    while os.path.exists(run_dir):
        n += 1
        run_dir = f"{base}_{n}"
    ensure_dir(run_dir)
    write_resolved(cfg, run_dir)
    with open(os.path.join(run_dir, "environment.json"), "w", encoding="utf-8") as f:
        json.dump({
            "python": platform.python_version(),
            "platform": platform.platform(),
            "packages": _versions(),
            "seed": cfg.seed,
            "threads": cfg.threads,
            "created": stamp,
            "argv": sys.argv,
        }, f, ensure_ascii=False, indent=2)
    return run_dir


# ----------------------------------------------------------------- subcommands

def _training_pool(cfg: RunConfig):
    if cfg.paths.dataset_dir:
        train_dir = os.path.join(cfg.paths.dataset_dir, "train")
        return load_dataset(train_dir if os.path.isdir(train_dir) else cfg.paths.dataset_dir)
    return sample_dataset(cfg.seed, cfg.train.n_per_shape, cfg.geometry.grid, rotation_pool("train"))


def _validation_pool(cfg: RunConfig):
    if cfg.paths.dataset_dir:
        val_dir = os.path.join(cfg.paths.dataset_dir, "validation")
        if os.path.isdir(val_dir):
            return load_dataset(val_dir)
    return sample_dataset(cfg.seed + 1, cfg.eval.n_per_shape, cfg.geometry.grid, rotation_pool("validation"))


def cmd_gen_data(cfg: RunConfig, run_dir: str) -> int:
    grid = cfg.geometry.grid
    train = sample_dataset(cfg.seed, cfg.train.n_per_shape, grid, rotation_pool("train"))
    val = sample_dataset(cfg.seed + 1, cfg.eval.n_per_shape, grid, rotation_pool("validation"))
    save_dataset(train, os.path.join(run_dir, "dataset", "train"))
    save_dataset(val, os.path.join(run_dir, "dataset", "validation"))
    print(os.path.join(run_dir, "dataset"))
    return 0


def cmd_train(cfg: RunConfig, run_dir: str) -> int:
    n_actions = N_ANGLES + 1 if cfg.variant == "naive" else N_ANGLES
    start_episode = 0
    if cfg.paths.resume:
        net, payload = load_checkpoint(cfg.paths.resume, expected_grid=cfg.geometry.grid, expected_actions=n_actions)
        optimizer = make_optimizer(net, cfg.optimizer)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start_episode = int(payload["header"]["episode"])
        logger.info("Resuming", extra={"event": "train_resume", "data": {"from": cfg.paths.resume, "episode": start_episode}})
    else:
        net = build_network(cfg.geometry.grid, n_actions, cfg.network, seed=cfg.seed)
        optimizer = None
    train = train_naive if cfg.variant == "naive" else train_terminal
    result = train(cfg, _training_pool(cfg), net, optimizer=optimizer, start_episode=start_episode,
                   run_dir=run_dir, progress=True)
    print(os.path.join(run_dir, "checkpoint.pt"), f"episodes={result.last_episode}", f"updates={result.step_count}")
    return 0


def cmd_eval(cfg: RunConfig, run_dir: str) -> int:
    env = ScanEnvironment.from_config(cfg)
    net, _ = load_checkpoint(cfg.paths.checkpoint, expected_grid=cfg.geometry.grid)
    episode_log = os.path.join(run_dir, "episodes.jsonl")
    runs = []
    if cfg.eval.experimental:
        if not cfg.paths.scans_dir:
            raise ConfigError("eval.experimental needs paths.scans_dir (output of the ingest subcommand)")
        if cfg.geometry.n_detector is None:
            env.geom = dataclasses.replace(env.geom, n_detector=cfg.ingest.n_bins)
        groups = load_measured_targets(cfg.paths.scans_dir, env.geom, cfg.geometry.sirt_iters)
        for label, targets in sorted(groups.items()):
            runs.append(evaluate_targets(net, env, targets, cfg.reward.cost_b, label, mode=cfg.eval.mode, seed=cfg.seed,
                                         gr_offset=cfg.baseline.gr_offset, checkpoint=cfg.paths.checkpoint,
                                         dataset=cfg.paths.scans_dir, progress=True, episode_log=episode_log,
                                         decide_before=cfg.train.decide_before_acquire))
    else:
        pool = _validation_pool(cfg)
        for eta in cfg.eval.noise_levels:
            targets = synthetic_targets(pool, env, eta, seed=cfg.seed)
            runs.append(evaluate_targets(net, env, targets, cfg.reward.cost_b, f"eta{eta:g}", mode=cfg.eval.mode,
                                         seed=cfg.seed, gr_offset=cfg.baseline.gr_offset,
                                         checkpoint=cfg.paths.checkpoint, dataset="validation", progress=True,
                                         episode_log=episode_log, decide_before=cfg.train.decide_before_acquire))
    summary = summarize(runs, run_dir)
    print(summary.to_string(index=False))
    return 0


def cmd_ingest(cfg: RunConfig, run_dir: str) -> int:
    if cfg.paths.dataset_dir:
        root = cfg.paths.dataset_dir
    else:
        files = fetch_dataset(cfg.ingest.record_url, cfg.paths.cache_dir)
        root = os.path.join(cfg.paths.cache_dir, "extracted")
        extract_archives(files, root)
    out_dir = os.path.join(run_dir, "scans")
    written, missing = [], []
    for key in expected_groups(cfg.ingest):
        try:
            written.append(ingest_group(cfg.ingest, key, root, out_dir))
        except DataError as e:
            missing.append(key.slug)
            logger.warning("Group skipped", extra={"event": "ingest_skip", "data": {"group": key.slug, "error": str(e)}})
    if not written:
        raise DataError(f"no projection group could be ingested from {root}")
    logger.info("Ingest finished", extra={"event": "ingest_done", "data": {"written": len(written), "missing": missing}})
    print(out_dir)
    return 0


def cmd_oracle(cfg: RunConfig, run_dir: str) -> int:
    oc = cfg.oracle
    report = run_oracle_suite(n_mdps=oc.n_mdps, n_trajectories=oc.n_trajectories, seed=cfg.seed,
                              max_states=oc.max_states, max_actions=oc.max_actions, max_horizon=oc.max_horizon)
    text = report.to_text()
    with open(os.path.join(run_dir, "oracle_report.txt"), "w", encoding="utf-8") as f:
        f.write(text + "\n")
    print(text)
    return 0 if report.passed else RuntimeFailure.exit_code


def cmd_baseline(cfg: RunConfig, run_dir: str) -> int:
    bc = cfg.baseline
    env = ScanEnvironment.from_config(cfg)
    phantoms = sample_dataset(cfg.seed, bc.n_per_shape, cfg.geometry.grid, rotation_pool("validation"))
    targets = synthetic_targets(phantoms, env, cfg.noise.eta, seed=cfg.seed)
    include_greedy = bc.kind in (PolicyKind.GREEDY.value, "all")
    frames = [baseline_curves(env, t, bc.n_angles, include_greedy=include_greedy, offset=bc.gr_offset) for t in targets]
    curves = pd.concat(frames, ignore_index=True)
    if bc.kind != "all":
        curves = curves[curves["policy"] == bc.kind]
    write_table(os.path.join(run_dir, "baselines.tsv"), curves)
    plot_baseline_curves(curves, os.path.join(run_dir, "baselines.png"))
    print(os.path.join(run_dir, "baselines.tsv"))
    return 0


COMMANDS: Dict[str, Callable[[RunConfig, str], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ingest": cmd_ingest,
    "oracle": cmd_oracle,
    "baseline": cmd_baseline,
}


def run_subcommand(cfg: RunConfig, bundle: bool = False) -> int:
    """Run one subcommand inside its own timestamped run directory."""
    torch.set_num_threads(cfg.threads)
    set_level(cfg.log_level)
    run_dir = new_run_dir(cfg)
    attach_run_log(run_dir)
    try:
        logger.info("Run started", extra={"event": "run_start", "data": {"subcommand": cfg.subcommand, "dir": run_dir}})
        status = COMMANDS[cfg.subcommand](cfg, run_dir)
        logger.info("Run finished", extra={"event": "run_done", "data": {"subcommand": cfg.subcommand, "status": status}})
    finally:
        detach_run_logs(run_dir)
    if bundle:
        export_run_bundle(run_dir)
    return status


def _sweep(flat: Dict[str, Any], overrides: Dict[str, Any], target: str, bundle: bool) -> int:
    combos = expand_sweep({**flat, **overrides})
    worst = 0
    for i, combo in enumerate(combos, start=1):
        cfg = _config_for(target, combo, {})
        logger.info("Sweep member", extra={"event": "sweep_run", "data": {"index": i, "of": len(combos)}})
        worst = max(worst, run_subcommand(cfg, bundle))
    return worst


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        flat = read_config_file(args.config) if args.config else {}
        overrides = overrides_from_args(args)
        if args.subcommand == "sweep":
            return _sweep(flat, overrides, args.run, args.bundle)
        cfg = _config_for(args.subcommand, flat, overrides)
        return run_subcommand(cfg, args.bundle)
    except CTStopError as e:
        logger.exception("Run failed", extra={"event": "run_error", "data": {"type": type(e).__name__, "exit": e.exit_code}})
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.exception("Run failed", extra={"event": "run_error", "data": {"type": type(e).__name__}})
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code
    except Exception as e:
        logger.exception("Run failed", extra={"event": "run_error", "data": {"type": type(e).__name__, "exit": RuntimeFailure.exit_code}})
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return RuntimeFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
