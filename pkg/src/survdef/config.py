"""Run configuration: every tunable of a simulate / ingest / train / evaluate run in one place."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .alignment import MIN_MONTHS, EventDefinition
from .inference import TrainConfig
from .model import DefConfig
from .pipeline import DEFAULT_FRACTIONS
from .synth import CohortSpec


class UserError(Exception):
    """Bad input from the user: reported with exit status 1."""


@dataclass
class ModelSection:
    latent_dim: int = 5
    num_layers: int = 2
    hidden_dim: int | None = None
    top_prior_sd: float = 1.0
    weibull_shape: float = 2.0
    prior_sd_weights: float = 1.0
    prior_sd_bias: float = 1.0
    student_dof: float = 4.0
    group_weights: dict | None = None
    init_sd: float = 0.1

    def def_config(self) -> DefConfig:
        return DefConfig(
            layer_dims=(self.latent_dim,) * self.num_layers,
            hidden_dim=self.hidden_dim if self.hidden_dim is not None else self.latent_dim,
            top_prior_sd=self.top_prior_sd,
            weibull_shape=self.weibull_shape,
            prior_sd_weights=self.prior_sd_weights,
            prior_sd_bias=self.prior_sd_bias,
            student_dof=self.student_dof,
            group_weights=self.group_weights,
            init_sd=self.init_sd,
        )


# Desk scale: 1000 patients, K=5, 2000 iterations on one CPU. The larger,
# annealed learning rate replaces the long constant-rate schedule.
PRESETS = {
    "desk": {
        "model": {"latent_dim": 5},
        "train": {"iterations": 2000, "learning_rate": 0.01, "lr_schedule": "cosine", "batch_size": 1000,
                  "chunk_size": 256},
        "cohort": {"num_patients": 1000},
    },
    "paper": {
        "model": {"latent_dim": 50},
        "train": {"iterations": 6000, "learning_rate": 1e-4, "lr_schedule": "constant", "batch_size": 240,
                  "momentum": 0.9},
        "cohort": {"num_patients": 313000},
    },
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSection = field(default_factory=ModelSection)
    cohort: CohortSpec = field(default_factory=CohortSpec)
    event_definition: EventDefinition = field(default_factory=EventDefinition)
    split: tuple = DEFAULT_FRACTIONS
    critical_channels: tuple | None = None
    min_months: int = MIN_MONTHS
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise UserError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.min_months < 1:
            raise UserError("min_months must be positive")

    @classmethod
    def from_dict(cls, d: dict, preset: str | None = None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)} - {"preset"}
        if unknown:
            raise UserError(f"unknown config sections: {sorted(unknown)}")
        preset = preset or d.get("preset")
        sections = {"train": {}, "model": {}, "cohort": {}}
        if preset is not None:
            if preset not in PRESETS:
                raise UserError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            for k, v in PRESETS[preset].items():
                sections[k].update(v)
        for k in sections:
            sections[k].update(d.get(k, {}) or {})
        # the run seed drives training unless the train section pins its own
        sections["train"].setdefault("seed", int(d.get("seed", 0)))
        try:
            return cls(
                train=_build(TrainConfig, sections["train"]),
                model=_build(ModelSection, sections["model"]),
                cohort=_build(CohortSpec, sections["cohort"]),
                event_definition=_build(EventDefinition, d.get("event_definition", {}) or {}),
                split=tuple(d.get("split", DEFAULT_FRACTIONS)),
                critical_channels=tuple(d["critical_channels"]) if d.get("critical_channels") else None,
                min_months=int(d.get("min_months", MIN_MONTHS)),
                seed=int(d.get("seed", 0)),
            )
        except (TypeError, ValueError) as e:
            raise UserError(f"invalid configuration: {e}") from e

    @classmethod
    def load(cls, path, preset: str | None = None) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, preset)
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as e:
            raise UserError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise UserError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise UserError("config must be a JSON object")
        return cls.from_dict(d, preset)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "model": dataclasses.asdict(self.model),
            "cohort": self.cohort.to_dict(),
            "event_definition": {"code_prefixes": list(self.event_definition.code_prefixes)},
            "split": list(self.split),
            "critical_channels": list(self.critical_channels) if self.critical_channels else None,
            "min_months": self.min_months,
            "seed": self.seed,
        }


def _build(kind, values: dict):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise UserError(f"unknown {kind.__name__} fields: {sorted(unknown)}")
    return kind(**values)
