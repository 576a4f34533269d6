"""On-disk formats: checkpoints, aligned datasets, manifests.

Every structured file is canonical JSON (sorted keys, compact separators)
carrying a ``format_version``; readers reject versions they do not know.
Arrays are stored as ``{"shape": [...], "data": [...]}`` with row-major
data. Python's float repr round-trips exactly, so load-then-save
reproduces the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import AlignedObservation, Standardizer
from .inference import OptimizerState, TrainConfig, TrainState, VariationalFactors
from .model import ChannelRegistry, DefConfig, DefModelParams

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def encode_array(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def decode_array(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def encode_arrays(arrays: dict) -> dict:
    return {k: encode_array(v) for k, v in arrays.items()}


def decode_arrays(d: dict) -> dict:
    return {k: decode_array(v) for k, v in d.items()}


def write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def _check_version(d: dict, expected: int, what: str) -> None:
    v = d.get("format_version")
    if v != expected:
        raise FormatError(f"{what} has format_version {v!r}; this reader supports {expected}")


@dataclass
class Checkpoint:
    def_config: DefConfig
    train_config: TrainConfig
    registry: ChannelRegistry
    stats: Standardizer
    state: TrainState

    @property
    def params(self) -> DefModelParams:
        return self.state.params

    def to_dict(self) -> dict:
        s = self.state
        return {
            "format_version": CHECKPOINT_VERSION,
            "def_config": self.def_config.to_dict(),
            # worker count is an execution detail and never changes results
            "train_config": {k: v for k, v in self.train_config.to_dict().items() if k != "workers"},
            "registry": self.registry.to_dict(),
            "stats": self.stats.to_dict(),
            "iteration": s.iteration,
            "params": encode_arrays(s.params.flat()),
            "factors": encode_arrays(s.factors.flat()),
            "param_opt": {"avg": encode_arrays(s.param_opt.avg), "vel": encode_arrays(s.param_opt.vel)},
            "factor_opt": {"avg": encode_arrays(s.factor_opt.avg), "vel": encode_arrays(s.factor_opt.vel)},
            "nan_streak": s.nan_streak,
            "skipped_steps": s.skipped_steps,
            # iteration i draws from RngStream(seed).child(("iter", i)); seed plus iteration fix every counter
            "rng": {"seed": self.train_config.seed, "next_iteration": s.iteration},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        _check_version(d, CHECKPOINT_VERSION, "checkpoint")
        state = TrainState(
            iteration=int(d["iteration"]),
            params=DefModelParams.from_flat(decode_arrays(d["params"])),
            factors=VariationalFactors.from_flat(decode_arrays(d["factors"])),
            param_opt=OptimizerState(decode_arrays(d["param_opt"]["avg"]), decode_arrays(d["param_opt"]["vel"])),
            factor_opt=OptimizerState(decode_arrays(d["factor_opt"]["avg"]), decode_arrays(d["factor_opt"]["vel"])),
            nan_streak=int(d.get("nan_streak", 0)),
            skipped_steps=int(d.get("skipped_steps", 0)),
        )
        train_cfg = d["train_config"]
        return cls(
            def_config=DefConfig.from_dict(d["def_config"]),
            train_config=TrainConfig(**train_cfg),
            registry=ChannelRegistry.from_dict(d["registry"]),
            stats=Standardizer.from_dict(d["stats"]),
            state=state,
        )

    def dumps(self) -> str:
        return canonical_dumps(self.to_dict())

    def save(self, path) -> None:
        write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def dataset_header(registry: ChannelRegistry, stats: Standardizer, groups: dict, report: dict) -> dict:
    return {
        "format_version": DATASET_VERSION,
        "registry": registry.to_dict(),
        "stats": stats.to_dict(),
        "groups": dict(sorted(groups.items())),
        "report": report,
    }


def write_observations(path, observations: list[AlignedObservation]) -> None:
    write_text(path, "".join(canonical_dumps(o.to_dict()) + "\n" for o in observations))


def read_observations(path) -> list[AlignedObservation]:
    out = []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(AlignedObservation.from_dict(json.loads(line)))
                except (KeyError, ValueError, TypeError) as e:
                    raise FormatError(f"{path}:{no}: bad aligned observation ({e})") from e
    return out


def read_header(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    _check_version(d, DATASET_VERSION, "dataset header")
    return d


def manifest(kind: str, seed: int | None, config: dict, files: dict[str, str]) -> dict:
    return {
        "format_version": MANIFEST_VERSION,
        "kind": kind,
        "seed": seed,
        "config_sha256": sha256_text(canonical_dumps(config)),
        "files": {name: sha256_text(text) for name, text in sorted(files.items())},
    }
