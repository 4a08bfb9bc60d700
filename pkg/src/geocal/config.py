"""Declarative experiment configuration, loaded from YAML with a strict schema."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from geocal.calibrate import GpclConfig
from geocal.federation import SessionConfig
from geocal.promptmodel import TrainConfig
from geocal.synthdata import GlobalSpec, PartitionConfig, random_global_spec

MAX_SEED = 2**64 - 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldSection(_Strict):
    """Parameters of the random Gaussian world; see ``random_global_spec``."""

    num_classes: int = Field(20, gt=0)
    dim: int = Field(32, gt=0)
    num_domains: int = Field(1, gt=0)
    samples_per_class_domain: int = Field(8, gt=0)
    test_samples_per_class_domain: int = Field(50, gt=0)
    mean_scale: float = 1.0
    shared_offset: float = 1.0
    spread: float = Field(0.15, ge=0)
    anisotropy: float = Field(10.0, gt=0)
    domain_offset: float = Field(0.0, ge=0)
    domain_spread: list[float] | None = None
    normalize: bool = False

    @model_validator(mode="after")
    def _domain_spread_len(self) -> WorldSection:
        if self.domain_spread is not None and len(self.domain_spread) != self.num_domains:
            raise ValueError("domain_spread needs one entry per domain")
        return self

    def build(self, seed: int) -> GlobalSpec:
        return random_global_spec(
            self.num_classes,
            self.dim,
            self.num_domains,
            self.samples_per_class_domain,
            mean_scale=self.mean_scale,
            shared_offset=self.shared_offset,
            spread=self.spread,
            anisotropy=self.anisotropy,
            domain_offset=self.domain_offset,
            domain_spread=None if self.domain_spread is None else tuple(self.domain_spread),
            seed=seed,
            normalize=self.normalize,
        )


class PartitionSection(_Strict):
    scheme: Literal["dirichlet_label_skew", "one_domain_one_client", "mixed_lds"] = "dirichlet_label_skew"
    beta: float = Field(0.1, gt=0)
    num_clients: int = Field(10, gt=0)


class GpclSection(_Strict):
    top_k: int | None = Field(None, ge=1)
    scale: float = Field(1.0, gt=0)


class TrainSection(_Strict):
    learning_rate: float = Field(0.002, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-5, ge=0)
    batch_size: int = Field(32, ge=1)
    local_steps: int | None = Field(None, ge=1)


class SessionSection(_Strict):
    rounds: int = Field(10, ge=0)
    coverage: float = Field(0.8, gt=0, le=1)
    participation: float = Field(1.0, gt=0, le=1)
    refresh_every_round: bool = False
    temperature: float = Field(30.0, gt=0)
    init_scale: float = Field(0.01, gt=0)
    min_upload_count: int = Field(2, ge=1)


class Cell(_Strict):
    """One ablation cell: which client-side switches are on."""

    name: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    calibration: bool = True
    sampler: bool = False
    prototypes: bool = False


@dataclass(frozen=True)
class RunSpec:
    """A cell bound to a concrete beta; ``run_id`` names its output directory."""

    run_id: str
    cell: Cell
    beta: float


class ExperimentConfig(_Strict):
    world: WorldSection = WorldSection()
    partition: PartitionSection = PartitionSection()
    gpcl: GpclSection = GpclSection()
    train: TrainSection = TrainSection()
    session: SessionSection = SessionSection()
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    # optional Dirichlet sweep; every cell runs once per beta
    betas: list[float] | None = Field(None, min_length=1)
    cells: list[Cell] = Field(
        default_factory=lambda: [Cell(name="calibrated"), Cell(name="uncalibrated", calibration=False)],
        min_length=1,
    )
    output_dir: str = "runs/experiment"

    @field_validator("seeds")
    @classmethod
    def _seed_range(cls, v: list[int]) -> list[int]:
        if any(not 0 <= s <= MAX_SEED for s in v):
            raise ValueError("seeds must be unsigned 64-bit integers")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @field_validator("betas")
    @classmethod
    def _beta_positive(cls, v: list[float] | None) -> list[float] | None:
        if v is not None and any(b <= 0 for b in v):
            raise ValueError("betas must be > 0")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> ExperimentConfig:
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise ValueError("cell names must be unique")
        # surface session-level errors at load time, before anything runs
        for run in self.runs():
            for seed in self.seeds[:1]:
                self.session_config(run, seed).validate()
        return self

    def runs(self) -> list[RunSpec]:
        """Expand cells over the beta sweep, in config order."""
        if self.betas is None:
            return [RunSpec(cell.name, cell, self.partition.beta) for cell in self.cells]
        return [RunSpec(f"{cell.name}-beta{b:g}", cell, b) for b in self.betas for cell in self.cells]

    def session_config(self, run: RunSpec, seed: int) -> SessionConfig:
        s = self.session
        return SessionConfig(
            world=self.world.build(seed),
            partition=PartitionConfig(self.partition.scheme, run.beta, self.partition.num_clients, seed),
            gpcl=GpclConfig(self.gpcl.top_k, self.gpcl.scale),
            train=TrainConfig(**self.train.model_dump()),
            rounds=s.rounds,
            seed=seed,
            test_samples_per_class_domain=self.world.test_samples_per_class_domain,
            calibration=run.cell.calibration,
            balanced_sampler=run.cell.sampler,
            prototypes=run.cell.prototypes,
            coverage=s.coverage,
            refresh_every_round=s.refresh_every_round,
            participation=s.participation,
            temperature=s.temperature,
            init_scale=s.init_scale,
            min_upload_count=s.min_upload_count,
        )

    def canonical(self) -> dict:
        """Fully expanded plain-data form; loading it back gives an equal config."""
        return self.model_dump(mode="json")

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True, default_flow_style=False)


class ConfigError(Exception):
    pass


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
