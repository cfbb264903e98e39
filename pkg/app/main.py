# app/main.py
"""Command-line entry point: python app/main.py <command> CONFIG [options]."""
import functools
import sys
from pathlib import Path

import click
import yaml

from baselines import train_offpolicy
from config import RunConfig, dump_config, load_config
from env_core import N_ACTIONS, GridWorld
from errors import ConfigError, UavSimError
from logger import EventLog
from mappo_trainer import build_agent, evaluate, load_agent, train
from meta_trainer import CURVE_COLUMNS, adapt_and_eval, meta_train
from nn_core import Mlp, load_into, load_params
from oracle import OracleInstance, enumerate_check, return_agreement, solve, uniform_expectation
from persistence import RunManifest, write_csv
from settings import get_settings

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


# ---------- Helpers ----------

def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except (UavSimError, RuntimeError, ValueError, OSError) as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def config_options(fn):
    fn = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                      help="Run directory (default: $UAVSIM_RUNS_DIR/<command>-<config>-seed<N>).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override every section seed.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Dotted override, e.g. training.epochs=3 (repeatable).")(fn)
    return click.argument("config_path", type=click.Path(dir_okay=False))(fn)


def prepare(command: str, config_path: str, overrides, seed, out_dir) -> tuple[RunConfig, Path, EventLog, bool]:
    cfg = load_config(config_path, overrides, seed)
    settings = get_settings()
    out = Path(out_dir) if out_dir else settings.runs_dir / f"{command}-{Path(config_path).stem}-seed{cfg.training.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out, EventLog(out / settings.event_log), settings.progress


def load_policy(checkpoint: str, world: GridWorld, cfg: RunConfig) -> Mlp:
    """Actor from a MAPPO/meta checkpoint, or the agent Q-network from a baseline checkpoint."""
    tensors = load_params(checkpoint)
    if any(k.startswith("actor.") for k in tensors):
        return load_agent(checkpoint, world, cfg.training).actor
    net = Mlp([world.obs_dim, *cfg.baseline.hidden_sizes, N_ACTIONS])
    load_into(net, tensors, "agent")
    return net


# ---------- Commands ----------

@click.group()
def cli():
    """UAV data-collection simulator: MAPPO, meta-MAPPO, VDN/QMIX and an exact oracle."""


@cli.command("validate-config")
@config_options
@handle_errors
def validate_config(config_path, overrides, seed, out_dir):
    """Parse and validate CONFIG, print the resolved config."""
    cfg = load_config(config_path, overrides, seed)
    click.echo(dump_config(cfg), nl=False)


@cli.command("train")
@config_options
@handle_errors
def train_cmd(config_path, overrides, seed, out_dir):
    """Train with training.algorithm (mappo, vdn or qmix)."""
    cfg, out, events, progress = prepare("train", config_path, overrides, seed, out_dir)
    manifest = RunManifest.start("train", cfg, out)
    algorithm = cfg.training.algorithm
    if algorithm == "mappo":
        result = train(cfg.scenario, cfg.training, out, events, progress)
        if len(result.evals):
            manifest.add(write_csv(result.evals, out / "eval_metrics.csv"))
        checkpoints = result.checkpoints
    else:
        result = train_offpolicy(cfg.scenario, cfg.training, cfg.baseline, algorithm, out, events, progress)
        checkpoints = [result.checkpoint] if result.checkpoint else []
    manifest.add(write_csv(result.metrics, out / "metrics.csv"))
    for path in checkpoints:
        manifest.add(path)
    last = result.metrics.iloc[-1]
    manifest.finish(algorithm=algorithm, final_mean_reward=float(last["mean_reward"]),
                    final_total_aou=float(last["total_aou"]))
    click.echo(f"{algorithm}: {len(result.metrics)} epochs, final mean reward {last['mean_reward']:.4f} -> {out}")


@cli.command("meta-train")
@config_options
@handle_errors
def meta_train_cmd(config_path, overrides, seed, out_dir):
    """Meta-train an initialisation over sampled (T, R_min) tasks."""
    cfg, out, events, progress = prepare("meta-train", config_path, overrides, seed, out_dir)
    manifest = RunManifest.start("meta-train", cfg, out)
    result = meta_train(cfg.scenario, cfg.training, cfg.meta, out, events, progress)
    manifest.add(write_csv(result.metrics, out / "meta_metrics.csv"))
    if result.checkpoint:
        manifest.add(result.checkpoint)
    if cfg.meta.held_out is not None:
        task = cfg.scenario.with_task(cfg.meta.held_out.horizon, cfg.meta.held_out.rate_min)
        curve = adapt_and_eval(result.agent, task, cfg.training, cfg.meta.adapt_budget, seed=cfg.meta.seed)
        manifest.add(write_csv(curve[CURVE_COLUMNS], out / "adaptation_curve.csv"))
    manifest.finish(meta_epochs=cfg.meta.meta_epochs, mode=cfg.meta.mode)
    click.echo(f"meta-{cfg.meta.mode}: {cfg.meta.meta_epochs} meta-epochs -> {out}")


@cli.command("eval")
@config_options
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), default=None,
              help="safetensors checkpoint; omit only with --mode uniform.")
@click.option("--episodes", type=int, default=None, help="Default: training.eval_episodes.")
@click.option("--mode", type=click.Choice(["argmax", "sample", "uniform"]), default="argmax")
@click.option("--trace/--no-trace", default=False, help="Export per-slot trace CSVs.")
@handle_errors
def eval_cmd(config_path, overrides, seed, out_dir, checkpoint, episodes, mode, trace):
    """Evaluate a frozen policy on the config's scenario with a constraint audit."""
    cfg, out, _, _ = prepare("eval", config_path, overrides, seed, out_dir)
    world = GridWorld(cfg.scenario)
    if checkpoint:
        actor = load_policy(checkpoint, world, cfg)
    elif mode == "uniform":
        actor = build_agent(world, cfg.training).actor
    else:
        raise ConfigError("--checkpoint is required unless --mode uniform", ["--checkpoint"])
    manifest = RunManifest.start("eval", cfg, out)
    result = evaluate(actor, world, episodes or cfg.training.eval_episodes, mode, seed=cfg.training.seed)
    manifest.add(write_csv(result.episodes, out / "eval_metrics.csv"))
    manifest.add(write_csv(result.aou_curve, out / "aou_curve.csv"))
    reports = [{"episode": k, **r.to_dict()} for k, r in enumerate(result.reports)]
    (out / "constraints.yaml").write_text(yaml.safe_dump(reports, sort_keys=False), encoding="utf-8")
    manifest.add(out / "constraints.yaml")
    if trace:
        for k, tr in enumerate(result.traces):
            manifest.add(write_csv(world.trace_frame(tr), out / f"trace_{k:03d}.csv"))
    summary = result.summary()
    manifest.finish(mode=mode, checkpoint=checkpoint, **summary)
    click.echo(f"eval ({mode}): mean reward {summary['mean_reward']:.4f}, "
               f"mean total AoU {summary['mean_total_aou']:.1f}, constraints passed: {summary['constraints_passed']}")


@cli.command("oracle")
@config_options
@click.option("--horizon", type=int, default=None, help="Override the scenario horizon (0 allowed).")
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Also report the greedy gap of this policy.")
@handle_errors
def oracle_cmd(config_path, overrides, seed, out_dir, horizon, checkpoint):
    """Exact optimum of a tiny deterministic instance."""
    cfg, out, _, _ = prepare("oracle", config_path, overrides, seed, out_dir)
    instance = OracleInstance(cfg.scenario, horizon)
    manifest = RunManifest.start("oracle", cfg, out)
    solution = solve(instance)
    doc = solution.to_dict()
    doc["uniform_expected_return"] = uniform_expectation(instance)
    doc["return_agreement"] = return_agreement(instance, solution)
    if checkpoint:
        actor = load_policy(checkpoint, instance.world, cfg)
        doc["gap"] = enumerate_check(instance, actor, solution).to_dict()
    (out / "oracle.yaml").write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    manifest.add(out / "oracle.yaml")
    if solution.actions:
        manifest.add(write_csv(instance.world.trace_frame(solution.trace), out / "oracle_trace.csv"))
    manifest.finish(optimal_return=solution.optimal_return)
    click.echo(f"oracle: optimal return {solution.optimal_return:.6f} over T={instance.horizon}")


if __name__ == "__main__":
    cli()
