"""Experiment orchestration: datasets, per-seed runs, run records and sweeps.

Run directory layout:
    curve_<seed>.csv          learning curve per seed
    summary.json              RunRecord
    config.snapshot           resolved config (INI, reloadable with --config)
    dataset.manifest.json/.bin  the training data (when generated for the run)
    actor_final_<seed>.*      final actor checkpoint per seed
    aggregate.csv             normalized score mean and std over seeds per step (all seeds ok)
"""
import csv
import itertools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from pydantic import ValidationError

from sparsereg import __version__
from sparsereg.config import BASELINES_PATH, SHOW_PROGRESS
from sparsereg.core.algorithms import OfflineAlgorithm, SeedStreams, make_algorithm, train
from sparsereg.core.envs import make_env
from sparsereg.core.evaluation import (
    LearningCurve,
    action_mse,
    aggregate,
    evaluate_policy,
    load_baselines,
    normalized_score,
    score_quantiles,
)
from sparsereg.core.exceptions import ConfigError, DivergenceError, SparseRegError
from sparsereg.db.dataset import OfflineDataset, generate, split
from sparsereg.db.storage import load_dataset, save_actor, save_dataset
from sparsereg.models.models import (
    RunConfig,
    RunRecord,
    RunSummary,
    ScoreBaselines,
    SeedSummary,
    SparseRegularizer,
)
from sparsereg.services.run_config import dump_snapshot

logger = logging.getLogger(__name__)

SWEEP_AXES = ("algorithm", "mode", "size", "regularizer", "sparsity")


def validation_seed(gen_seed: int) -> int:
    """Seed of the independent validation set, derived from the generator seed."""
    return int(np.random.SeedSequence([gen_seed, 1]).generate_state(1)[0])


def prepare_datasets(config: RunConfig) -> tuple[OfflineDataset, OfflineDataset]:
    spec = config.dataset
    env = make_env(config.env)
    if spec.path is not None:
        ds = load_dataset(spec.path)
        if ds.env_name != config.env:
            raise ConfigError(f"dataset {spec.path} was collected on {ds.env_name}, not {config.env}")
    else:
        ds = generate(env, spec.quality, spec.size, spec.gen_seed)
    if spec.validation_size is not None:
        validation = generate(env, ds.quality, spec.validation_size, validation_seed(ds.generator_seed))
        validation = validation.subset(np.arange(len(validation)), "validation")
        return ds.subset(np.arange(len(ds)), "train"), validation
    return split(ds, spec.validation_fraction)


def _eval_hook(config: RunConfig, train_ds: OfflineDataset, val_ds: OfflineDataset, baselines: ScoreBaselines, eval_seed: int):
    env = make_env(config.env)
    train_split, val_split = train_ds.as_batch(), val_ds.as_batch()

    def hook(algo: OfflineAlgorithm, step: int) -> dict[str, float]:
        actor = algo.agent.actor
        mean, std = evaluate_policy(actor, env, config.eval_episodes, eval_seed)
        return {
            "return_mean": mean,
            "return_std": std,
            "normalized_score": normalized_score(mean, baselines),
            "train_mse": action_mse(actor, train_split.observations, train_split.actions),
            "val_mse": action_mse(actor, val_split.observations, val_split.actions),
        }

    return hook


def build_algorithm(config: RunConfig, seed: int, obs_dim: int, act_dim: int) -> OfflineAlgorithm:
    env = make_env(config.env)
    return make_algorithm(
        config.algorithm,
        obs_dim,
        act_dim,
        env.spec.act_bound,
        config.hidden_dims,
        config.hyper,
        config.regularizer,
        SeedStreams.from_seed(seed),
    )


def run_seed(
    config: RunConfig,
    seed: int,
    train_ds: OfflineDataset,
    val_ds: OfflineDataset,
    baselines: ScoreBaselines,
    progress: bool = False,
) -> SeedSummary:
    """Train one seed and write its curve (partial on divergence) and checkpoint."""
    out = Path(config.output_dir)
    curve_path = out / f"curve_{seed}.csv"
    algo = build_algorithm(config, seed, train_ds.obs_dim, train_ds.act_dim)
    hook = _eval_hook(config, train_ds, val_ds, baselines, algo.streams.eval_seed)
    status, error = "ok", None
    try:
        curve = train(
            algo,
            train_ds,
            config.total_steps,
            sparsity_cfg=config.sparsity_config(),
            eval_hook=hook,
            eval_interval=config.eval_interval,
            progress=progress,
        )
    except DivergenceError as e:
        curve, status, error = e.curve, "diverged", str(e)
    curve.to_csv(curve_path)
    if config.save_actor and status == "ok":
        save_actor(algo.agent.actor, out / f"actor_final_{seed}", extra={"env_name": config.env, "seed": seed})
    logger.info("seed %d finished (%s) after %d steps", seed, status, curve.steps[-1])
    return SeedSummary(
        seed=seed,
        status=status,
        curve_path=curve_path.name,
        final_step=curve.steps[-1],
        final_return_mean=curve.final("return_mean"),
        final_return_std=curve.final("return_std"),
        final_normalized_score=curve.final("normalized_score"),
        final_train_mse=curve.final("train_mse"),
        final_val_mse=curve.final("val_mse"),
        error=error,
    )


def summarize(seeds: Sequence[SeedSummary]) -> RunSummary:
    """Mean, population std and quantiles of the final values over seeds."""
    normalized = np.array([s.final_normalized_score for s in seeds])
    returns = np.array([s.final_return_mean for s in seeds])
    return RunSummary(
        final_normalized_mean=float(normalized.mean()),
        final_normalized_std=float(normalized.std()),
        final_return_mean=float(returns.mean()),
        final_return_std=float(returns.std()),
        final_val_mse_mean=float(np.mean([s.final_val_mse for s in seeds])),
        final_quantiles=score_quantiles(normalized),
    )


def run_training(config: RunConfig, n_jobs: Optional[int] = None, progress: bool = SHOW_PROGRESS) -> RunRecord:
    """Run every seed of `config` and write the run directory."""
    started = time.perf_counter()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    # resolved here so parallel workers never write the baselines fixture
    baselines = load_baselines(config.env, BASELINES_PATH)
    train_ds, val_ds = prepare_datasets(config)
    if config.dataset.path is None:
        save_dataset(train_ds, out / "dataset")
        manifest = {"path": "dataset.manifest.json", **train_ds.manifest()}
    else:
        manifest = {"path": str(config.dataset.path), **train_ds.manifest()}
    dump_snapshot(config, out / "config.snapshot")

    n_jobs = n_jobs or config.n_jobs
    show = progress and n_jobs == 1
    if n_jobs == 1:
        seeds = [run_seed(config, s, train_ds, val_ds, baselines, show) for s in config.seeds]
    else:
        seeds = Parallel(n_jobs=n_jobs)(
            delayed(run_seed)(config, s, train_ds, val_ds, baselines) for s in config.seeds
        )
    status = "ok" if all(s.status == "ok" for s in seeds) else "diverged"
    record = RunRecord(
        config=config,
        status=status,
        seeds={s.seed: s for s in seeds},
        summary=summarize(seeds),
        dataset_manifest=manifest,
        wall_clock_seconds=time.perf_counter() - started,
        version=__version__,
    )
    (out / "summary.json").write_text(record.model_dump_json(indent=2) + "\n")
    if status == "ok":
        curves = load_curves(out, record)
        aggregate({config.env: curves}, {config.env: baselines}).to_csv(out / "aggregate.csv")
    logger.info("run %s finished: %s", out, status)
    return record


def load_curves(run_dir: Path, record: RunRecord) -> dict[int, LearningCurve]:
    return {seed: LearningCurve.from_csv(run_dir / s.curve_path) for seed, s in record.seeds.items()}


@dataclass
class SweepCell:
    algorithm: str
    mode: str
    size: int
    regularizer: str
    sparsity: Optional[float]
    config: Optional[RunConfig]
    status: str = "pending"
    record: Optional[RunRecord] = None
    error: Optional[str] = None

    @property
    def name(self) -> str:
        parts = [self.algorithm, f"n{self.size}", self.regularizer]
        if self.regularizer == "sparse":
            parts += [self.mode, f"s{self.sparsity:g}"]
        return "_".join(parts)

    @property
    def column(self) -> str:
        return f"{self.sparsity:g}" if self.regularizer == "sparse" else self.regularizer


def _cell_config(base: RunConfig, cell: dict[str, Any]) -> RunConfig:
    data = base.model_dump()
    data["algorithm"] = cell["algorithm"]
    data["dataset"]["size"] = cell["size"]
    if cell["regularizer"] == "sparse":
        current = data["regularizer"] if data["regularizer"]["kind"] == "sparse" else {"kind": "sparse"}
        current.update(sparsity=cell["sparsity"], mode=cell["mode"])
        data["regularizer"] = current
    elif cell["regularizer"] != data["regularizer"]["kind"]:
        data["regularizer"] = {"kind": cell["regularizer"]}
    return RunConfig.model_validate(data)


def expand_grid(base: RunConfig, grid: dict[str, Sequence]) -> list[SweepCell]:
    """Cartesian product of the sweep axes; sparsity and mode only vary sparse cells."""
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ConfigError(f"unknown sweep axes {sorted(unknown)}; choose from {SWEEP_AXES}")
    reg = base.regularizer
    axes = {
        "algorithm": grid.get("algorithm") or [base.algorithm],
        "mode": grid.get("mode") or [reg.mode if isinstance(reg, SparseRegularizer) else "SPU"],
        "size": grid.get("size") or [base.dataset.size],
        "regularizer": grid.get("regularizer") or (["sparse"] if grid.get("sparsity") else [reg.kind]),
        "sparsity": grid.get("sparsity") or [reg.sparsity if isinstance(reg, SparseRegularizer) else 0.95],
    }
    cells, seen = [], set()
    for values in itertools.product(*(axes[a] for a in SWEEP_AXES)):
        cell = dict(zip(SWEEP_AXES, values))
        if cell["regularizer"] != "sparse":
            cell["mode"], cell["sparsity"] = None, None
        key = tuple(cell[a] for a in SWEEP_AXES)
        if key in seen:
            continue
        seen.add(key)
        sweep_cell = SweepCell(config=None, **cell)
        try:
            config = _cell_config(base, cell)
            sweep_cell.config = config.model_copy(update={"output_dir": Path(base.output_dir) / sweep_cell.name})
        except (ValidationError, SparseRegError) as e:
            sweep_cell.status, sweep_cell.error = "failed", str(e)
        cells.append(sweep_cell)
    return cells


def run_sweep(base: RunConfig, grid: dict[str, Sequence], n_jobs: Optional[int] = None) -> list[SweepCell]:
    """Run every cell; a failing cell is recorded and the sweep moves on."""
    cells = expand_grid(base, grid)
    for cell in cells:
        if cell.config is None:
            continue
        try:
            cell.record = run_training(cell.config, n_jobs=n_jobs)
            cell.status = cell.record.status
        except (SparseRegError, ValidationError, OSError) as e:
            cell.status, cell.error = "failed", str(e)
            logger.warning("sweep cell %s failed: %s", cell.name, e)
    write_sweep_tables(cells, Path(base.output_dir))
    return cells


CELL_COLUMNS = (
    "cell",
    "algorithm",
    "mode",
    "size",
    "regularizer",
    "sparsity",
    "status",
    "final_normalized_mean",
    "final_normalized_std",
    "final_return_mean",
    "final_val_mse_mean",
    "error",
)


def _cell_row(cell: SweepCell) -> list[str]:
    summary = cell.record.summary if cell.record is not None else None
    stats = (
        [repr(summary.final_normalized_mean), repr(summary.final_normalized_std),
         repr(summary.final_return_mean), repr(summary.final_val_mse_mean)]
        if summary is not None
        else ["", "", "", ""]
    )
    return [
        cell.name,
        cell.algorithm,
        cell.mode or "",
        str(cell.size),
        cell.regularizer,
        "" if cell.sparsity is None else repr(cell.sparsity),
        cell.status,
        *stats,
        cell.error or "",
    ]


def write_sweep_tables(cells: Sequence[SweepCell], out: Path) -> tuple[Path, Path]:
    """`sweep_cells.csv` (one row per cell) and `sweep_matrix.csv` (mean±std of the final normalized score)."""
    out.mkdir(parents=True, exist_ok=True)
    cells_path, matrix_path = out / "sweep_cells.csv", out / "sweep_matrix.csv"
    with open(cells_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CELL_COLUMNS)
        writer.writerows(_cell_row(c) for c in cells)

    columns = list(dict.fromkeys(c.column for c in cells))
    rows: dict[tuple, dict[str, str]] = {}
    for c in cells:
        key = (c.algorithm, c.mode or "-", c.size)
        if c.record is not None:
            s = c.record.summary
            value = f"{s.final_normalized_mean:.4f}±{s.final_normalized_std:.4f}"
        else:
            value = c.status
        rows.setdefault(key, {})[c.column] = value
    with open(matrix_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["algorithm", "mode", "size", *columns])
        for (algorithm, mode, size), values in rows.items():
            writer.writerow([algorithm, mode, size, *(values.get(col, "") for col in columns)])
    return cells_path, matrix_path
