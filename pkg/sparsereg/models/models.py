from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

EnvName = Literal["pointmass", "pendulum"]
AlgorithmName = Literal["bc", "td3bc", "iql"]
Quality = Literal["expert", "medium", "random", "medium_replay", "expert_replay"]
SparsityMode = Literal["SFI", "SPU"]


class EnvSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    obs_dim: int = Field(gt=0)
    act_dim: int = Field(gt=0)
    act_bound: float = Field(gt=0)
    horizon: int = Field(ge=1)
    dynamics_seed: int = 0


class SparsityConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    sparsity: float = Field(ge=0.0, lt=1.0)
    refresh_interval: int = Field(gt=0)
    refresh_cutoff: int = Field(ge=0)
    mode: SparsityMode = "SPU"
    score_batch_size: int = Field(default=256, gt=0)
    mask_biases: bool = True
    # reuse the first saliency batch at every refresh instead of resampling
    fixed_score_batch: bool = False
    # one saliency batch shared by every managed network of a refresh
    shared_score_batch: bool = True

    @model_validator(mode="after")
    def check_schedule(self):
        if self.mode == "SFI" and self.refresh_cutoff != 0:
            raise ValueError("SFI mode requires refresh_cutoff == 0")
        if self.mode == "SPU" and self.refresh_interval > self.refresh_cutoff:
            raise ValueError("SPU mode requires refresh_interval <= refresh_cutoff")
        return self

    @classmethod
    def scaled(cls, total_steps: int, sparsity: float, mode: SparsityMode = "SPU", **extra) -> "SparsityConfig":
        """Refresh every total/200 steps until total/5 (5k and 200k of a 1M-step run)."""
        interval = max(1, total_steps // 200)
        cutoff = max(interval, total_steps // 5) if mode == "SPU" else 0
        return cls(sparsity=sparsity, refresh_interval=interval, refresh_cutoff=cutoff, mode=mode, **extra)


class AlgoHyper(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(default=0.99, gt=0.0, lt=1.0)
    tau: float = Field(default=5e-3, gt=0.0, le=1.0)
    policy_freq: int = Field(default=2, gt=0)
    lr: float = Field(default=1e-3, gt=0.0)
    batch: int = Field(default=256, gt=0)
    td3bc_alpha: float = Field(default=2.5, ge=0.0)
    iql_expectile: float = Field(default=0.7, gt=0.5, lt=1.0)
    iql_beta: float = Field(default=3.0, ge=0.0)
    awr_clip: float = Field(default=100.0, gt=0.0)
    policy_noise: float = Field(default=0.2, ge=0.0)
    noise_clip: float = Field(default=0.5, ge=0.0)
    divergence_threshold: float = Field(default=1e8, gt=0.0)


class NoRegularizer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["none"] = "none"


class SparseRegularizer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["sparse"] = "sparse"
    sparsity: float = Field(default=0.95, ge=0.0, lt=1.0)
    mode: SparsityMode = "SPU"
    refresh_interval: Optional[int] = Field(default=None, gt=0)
    refresh_cutoff: Optional[int] = Field(default=None, ge=0)
    score_batch_size: int = Field(default=256, gt=0)
    mask_biases: bool = True
    fixed_score_batch: bool = False
    shared_score_batch: bool = True

    def to_sparsity_config(self, total_steps: int) -> SparsityConfig:
        extra = dict(
            score_batch_size=self.score_batch_size,
            mask_biases=self.mask_biases,
            fixed_score_batch=self.fixed_score_batch,
            shared_score_batch=self.shared_score_batch,
        )
        if self.refresh_interval is None and self.refresh_cutoff is None:
            return SparsityConfig.scaled(total_steps, self.sparsity, self.mode, **extra)
        scaled = SparsityConfig.scaled(total_steps, self.sparsity, self.mode)
        interval = self.refresh_interval or scaled.refresh_interval
        cutoff = self.refresh_cutoff if self.refresh_cutoff is not None else scaled.refresh_cutoff
        if self.mode == "SFI":
            cutoff = 0
        return SparsityConfig(
            sparsity=self.sparsity, refresh_interval=interval, refresh_cutoff=cutoff, mode=self.mode, **extra
        )


class L1Regularizer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["l1"] = "l1"
    lam: float = Field(default=1e-4, ge=0.0)


class DropoutRegularizer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["dropout"] = "dropout"
    rate: float = Field(default=0.1, ge=0.0, lt=1.0)


class WeightDecayRegularizer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["weight_decay"] = "weight_decay"
    coef: float = Field(default=0.01, ge=0.0)


class LayerNormRegularizer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["layer_norm"] = "layer_norm"


class SpectralNormRegularizer(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["spectral_norm"] = "spectral_norm"


Regularizer = Annotated[
    Union[
        NoRegularizer,
        SparseRegularizer,
        L1Regularizer,
        DropoutRegularizer,
        WeightDecayRegularizer,
        LayerNormRegularizer,
        SpectralNormRegularizer,
    ],
    Field(discriminator="kind"),
]


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[Path] = None
    quality: Quality = "expert"
    size: int = Field(default=500, gt=0)
    gen_seed: int = 0
    # independent validation set of this many transitions; falls back to split() when unset
    validation_size: Optional[int] = Field(default=None, gt=0)
    validation_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    env: EnvName = "pointmass"
    algorithm: AlgorithmName = "bc"
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    regularizer: Regularizer = Field(default_factory=NoRegularizer)
    hidden_dims: List[int] = Field(default_factory=lambda: [256, 256], min_length=1)
    total_steps: int = Field(default=20_000, ge=0)
    eval_interval: int = Field(default=100, gt=0)
    eval_episodes: int = Field(default=10, gt=0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_dir: Path = Path("runs/default")
    hyper: AlgoHyper = Field(default_factory=AlgoHyper)
    n_jobs: int = 1
    save_actor: bool = True

    @model_validator(mode="after")
    def check_protocol(self):
        if any(h <= 0 for h in self.hidden_dims):
            raise ValueError("hidden_dims must all be positive")
        if self.total_steps < self.eval_interval and self.total_steps != 0:
            raise ValueError("total_steps must be >= eval_interval")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        try:
            self.sparsity_config()
        except ValidationError as e:
            raise ValueError(f"regularizer schedule is invalid: {e.errors()[0]['msg']}") from e
        return self

    def sparsity_config(self) -> Optional[SparsityConfig]:
        if isinstance(self.regularizer, SparseRegularizer):
            return self.regularizer.to_sparsity_config(self.total_steps)
        return None


class ScoreBaselines(BaseModel):
    env_name: str
    random_score: float
    expert_score: float

    @model_validator(mode="after")
    def check_order(self):
        if not self.expert_score > self.random_score:
            raise ValueError("expert_score must exceed random_score")
        return self


class SeedSummary(BaseModel):
    seed: int
    status: Literal["ok", "diverged"] = "ok"
    curve_path: str
    final_step: int
    final_return_mean: float
    final_return_std: float
    final_normalized_score: float
    final_train_mse: float
    final_val_mse: float
    error: Optional[str] = None


class RunSummary(BaseModel):
    final_normalized_mean: float
    final_normalized_std: float
    final_return_mean: float
    final_return_std: float
    final_val_mse_mean: float
    final_quantiles: Dict[str, float]


class RunRecord(BaseModel):
    config: RunConfig
    status: Literal["ok", "diverged"]
    seeds: Dict[int, SeedSummary]
    summary: RunSummary
    dataset_manifest: Dict[str, object]
    wall_clock_seconds: float
    version: str
