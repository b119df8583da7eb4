import logging
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from sparsereg.config import BASELINES_PATH, N_JOBS, OUTPUT_DIR, configure_logging
from sparsereg.core.envs import ENVIRONMENTS, make_env
from sparsereg.core.evaluation import compute_baselines, evaluate_policy, load_baselines, normalized_score, pin_baselines
from sparsereg.core.exceptions import ConfigError, ParseError, SchemaError, SplitError, UsageError
from sparsereg.db.dataset import QUALITIES, generate
from sparsereg.db.storage import dataset_paths, load_actor, save_dataset
from sparsereg.services.run_config import format_validation_error, load_run_config
from sparsereg.services.runner import run_sweep, run_training

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DIVERGED = 3

# bad input data or config detected after validation
DATA_ERRORS = (ConfigError, SplitError, SchemaError, ParseError)


def _csv_list(cast):
    def convert(ctx, param, value):
        if value is None:
            return None
        try:
            return [cast(v.strip()) for v in value.split(",") if v.strip()]
        except ValueError as e:
            raise click.BadParameter(str(e)) from e

    return convert


def _config_error(message: str) -> None:
    click.echo(f"config error:\n{message}", err=True)
    sys.exit(EXIT_CONFIG)


def run_options(f):
    """Flags mirroring RunConfig; any flag given wins over the config file."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="INI run config."),
        click.option("--env", type=click.Choice(sorted(ENVIRONMENTS))),
        click.option("--algorithm", type=click.Choice(["bc", "td3bc", "iql"])),
        click.option("--dataset", "dataset_path", type=click.Path(), help="Stored dataset (manifest or .bin path)."),
        click.option("--quality", type=click.Choice(QUALITIES)),
        click.option("--size", type=int),
        click.option("--gen-seed", type=int),
        click.option("--validation-size", type=int),
        click.option("--regularizer", type=click.Choice(
            ["none", "sparse", "l1", "dropout", "weight_decay", "layer_norm", "spectral_norm"])),
        click.option("--sparsity", type=float),
        click.option("--mode", type=click.Choice(["SFI", "SPU"])),
        click.option("--refresh-interval", type=int),
        click.option("--refresh-cutoff", type=int),
        click.option("--lam", type=float, help="L1 coefficient."),
        click.option("--rate", type=float, help="Dropout rate."),
        click.option("--coef", type=float, help="Weight decay coefficient."),
        click.option("--hidden-dims", callback=_csv_list(int), help="e.g. 256,256"),
        click.option("--total-steps", type=int),
        click.option("--eval-interval", type=int),
        click.option("--eval-episodes", type=int),
        click.option("--seeds", callback=_csv_list(int), help="e.g. 0,1,2"),
        click.option("--output-dir", type=click.Path(file_okay=False)),
        click.option("--n-jobs", type=int),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _overrides(opts: dict) -> dict:
    regularizer = {
        "kind": opts["regularizer"],
        "sparsity": opts["sparsity"],
        "mode": opts["mode"],
        "refresh_interval": opts["refresh_interval"],
        "refresh_cutoff": opts["refresh_cutoff"],
        "lam": opts["lam"],
        "rate": opts["rate"],
        "coef": opts["coef"],
    }
    return {
        "env": opts["env"],
        "algorithm": opts["algorithm"],
        "hidden_dims": opts["hidden_dims"],
        "total_steps": opts["total_steps"],
        "eval_interval": opts["eval_interval"],
        "eval_episodes": opts["eval_episodes"],
        "seeds": opts["seeds"],
        "output_dir": opts["output_dir"],
        "n_jobs": opts["n_jobs"],
        "dataset": {
            "path": opts["dataset_path"],
            "quality": opts["quality"],
            "size": opts["size"],
            "gen_seed": opts["gen_seed"],
            "validation_size": opts["validation_size"],
        },
        "regularizer": {k: v for k, v in regularizer.items() if v is not None} or None,
    }


def _resolve(opts: dict):
    try:
        config = load_run_config(opts["config_path"], _overrides(opts))
    except ValidationError as e:
        _config_error(format_validation_error(e))
    except ConfigError as e:
        _config_error(str(e))
    if "output_dir" not in config.model_fields_set:
        config = config.model_copy(update={"output_dir": Path(OUTPUT_DIR) / f"{config.env}_{config.algorithm}"})
    return config


def _n_jobs(opts: dict, config) -> int:
    if opts["n_jobs"] is not None:
        return opts["n_jobs"]
    return config.n_jobs if config.n_jobs != 1 else N_JOBS


@click.group()
@click.option("--log-level", default=None, help="Overrides SPARSEREG_LOG_LEVEL.")
def cli(log_level):
    """Sparse-Reg: sparse regularisation for offline RL on small datasets."""
    configure_logging(log_level)


@cli.command("gen-data")
@click.option("--env", "env_name", type=click.Choice(sorted(ENVIRONMENTS)), required=True)
@click.option("--quality", type=click.Choice(QUALITIES), required=True)
@click.option("--size", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Path stem; defaults to <output>/data/<env>_<quality>_<size>_<seed>.")
@click.option("--force", is_flag=True, help="Overwrite existing files.")
def gen_data(env_name, quality, size, seed, out, force):
    """Generate an offline dataset with a scripted policy."""
    if size < 1:
        raise click.UsageError(f"--size must be >= 1, got {size}")
    out = out or Path(OUTPUT_DIR) / "data" / f"{env_name}_{quality}_{size}_{seed}"
    manifest_path, bin_path = dataset_paths(out)
    if (manifest_path.exists() or bin_path.exists()) and not force:
        raise click.ClickException(f"{manifest_path} already exists; pass --force to overwrite")
    ds = generate(make_env(env_name), quality, size, seed)
    save_dataset(ds, out)
    returns = ds.trajectory_returns()
    click.echo(f"wrote {len(ds)} transitions to {bin_path}")
    click.echo(f"trajectories: {ds.num_trajectories}")
    click.echo(f"trajectory return: mean {returns.mean():.3f} std {returns.std():.3f}")


@cli.command()
@run_options
def train(**opts):
    """Train every seed of a run config and write its run directory."""
    config = _resolve(opts)
    try:
        record = run_training(config, n_jobs=_n_jobs(opts, config))
    except DATA_ERRORS as e:
        _config_error(str(e))
    s = record.summary
    click.echo(f"{config.output_dir}: normalized score {s.final_normalized_mean:.4f} ± {s.final_normalized_std:.4f}")
    if record.status != "ok":
        for seed in record.seeds.values():
            if seed.error:
                click.echo(f"seed {seed.seed}: {seed.error}", err=True)
        sys.exit(EXIT_DIVERGED)


@cli.command()
@run_options
@click.option("--grid-sparsity", callback=_csv_list(float), help="e.g. 0.5,0.75,0.95")
@click.option("--grid-size", callback=_csv_list(int), help="e.g. 500,10000")
@click.option("--grid-regularizer", callback=_csv_list(str), help="e.g. none,sparse,dropout")
@click.option("--grid-algorithm", callback=_csv_list(str), help="e.g. bc,iql")
@click.option("--grid-mode", callback=_csv_list(str), help="SFI,SPU")
def sweep(grid_sparsity, grid_size, grid_regularizer, grid_algorithm, grid_mode, **opts):
    """Run a grid of configurations and write sweep_cells.csv / sweep_matrix.csv."""
    base = _resolve(opts)
    grid = {
        "sparsity": grid_sparsity,
        "size": grid_size,
        "regularizer": grid_regularizer,
        "algorithm": grid_algorithm,
        "mode": grid_mode,
    }
    try:
        cells = run_sweep(base, {k: v for k, v in grid.items() if v}, n_jobs=_n_jobs(opts, base))
    except DATA_ERRORS as e:
        _config_error(str(e))
    for cell in cells:
        click.echo(f"{cell.name}: {cell.status}" + (f" ({cell.error})" if cell.error else ""))
    click.echo(f"wrote {Path(base.output_dir) / 'sweep_matrix.csv'}")


@cli.command("eval")
@click.argument("checkpoint", type=click.Path())
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--env", "env_name", type=click.Choice(sorted(ENVIRONMENTS)), default=None,
              help="Defaults to the environment recorded in the checkpoint.")
def evaluate(checkpoint, episodes, seed, env_name):
    """Evaluate a saved actor checkpoint."""
    if episodes < 1:
        raise click.UsageError("--episodes must be >= 1")
    try:
        actor, manifest = load_actor(checkpoint)
    except (ParseError, SchemaError, FileNotFoundError) as e:
        raise click.ClickException(str(e)) from e
    env_name = env_name or manifest.get("env_name")
    if env_name is None:
        raise click.UsageError("checkpoint does not record its environment; pass --env")
    env = make_env(env_name)
    mean, std = evaluate_policy(actor, env, episodes, seed)
    score = normalized_score(mean, load_baselines(env_name, BASELINES_PATH))
    click.echo(f"return {mean:.4f} ± {std:.4f} normalized {score:.4f}")


@cli.command()
@click.option("--env", "env_names", type=click.Choice(sorted(ENVIRONMENTS)), multiple=True)
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--path", type=click.Path(dir_okay=False), default=BASELINES_PATH, show_default=True)
def baselines(env_names, episodes, path):
    """Pin expert/random score baselines by Monte-Carlo rollouts."""
    pinned = [compute_baselines(make_env(name), episodes) for name in (env_names or sorted(ENVIRONMENTS))]
    pin_baselines(pinned, path)
    for b in pinned:
        click.echo(f"{b.env_name}: expert {b.expert_score:.4f} random {b.random_score:.4f}")


def main():
    try:
        cli(standalone_mode=True)
    except UsageError as e:
        click.echo(f"usage error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


if __name__ == "__main__":
    main()
