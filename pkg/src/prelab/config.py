"""JSON config loading with strict field checking.

Keys mirror the dataclass field names; unknown keys are rejected so that a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .gradcheck import GradCheckConfig
from .prompt_encoder import EncoderConfig
from .synthetic import SyntheticTaskSpec
from .train import TrainConfig


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: top level must be a JSON object")
    return obj


def build(cls, data, where="config"):
    """Instantiate dataclass ``cls`` from ``data``, listing every bad field at once."""
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"{where}: unknown field(s): {', '.join(unknown)}")
    try:
        return cls(**data)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


@dataclass
class ExperimentConfig:
    """One training run: where the task lives, where outputs go, and the recipe."""

    data_dir: str
    out_dir: str = "runs/default"
    run_id: str = "run"
    train: TrainConfig = field(default_factory=TrainConfig)
    base_dir: Path = Path(".")

    @property
    def data_path(self):
        return (self.base_dir / self.data_dir).resolve()

    @property
    def out_path(self):
        return (self.base_dir / self.out_dir).resolve()

    def to_dict(self):
        return {"data_dir": self.data_dir, "out_dir": self.out_dir, "run_id": self.run_id,
                "train": train_config_to_dict(self.train)}


def train_config_from_dict(data, where="train"):
    data = dict(data)
    enc = data.pop("encoder", {})
    cfg = build(TrainConfig, data, where)
    cfg.encoder = build(EncoderConfig, enc, f"{where}.encoder")
    return cfg


def train_config_to_dict(cfg):
    out = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name != "encoder"}
    out["encoder"] = cfg.encoder.to_dict()
    return out


def experiment_from_dict(data, base_dir=Path("."), where="config"):
    data = dict(data)
    unknown = sorted(set(data) - {"data_dir", "out_dir", "run_id", "train"})
    if unknown:
        raise ValidationError(f"{where}: unknown field(s): {', '.join(unknown)}")
    if "data_dir" not in data:
        raise ValidationError(f"{where}: missing required field data_dir")
    train = train_config_from_dict(data.get("train", {}), f"{where}.train")
    return ExperimentConfig(data_dir=data["data_dir"], out_dir=data.get("out_dir", "runs/default"),
                            run_id=str(data.get("run_id", "run")), train=train, base_dir=Path(base_dir))


def load_experiment(path):
    path = Path(path)
    return experiment_from_dict(read_json(path), base_dir=path.parent, where=str(path))


def load_task_spec(path):
    return build(SyntheticTaskSpec, read_json(path), str(path))


def load_gradcheck(path):
    return build(GradCheckConfig, read_json(path), str(path))


@dataclass
class AblationGrid:
    architectures: list
    residual: list = field(default_factory=lambda: [True])
    sharing: list = field(default_factory=lambda: ["shared"])
    M: list = field(default_factory=lambda: [4])
    K: list = field(default_factory=lambda: [16])
    seeds: list = field(default_factory=lambda: [1])

    def __post_init__(self):
        empty = [f.name for f in dataclasses.fields(self) if not getattr(self, f.name)]
        if empty:
            raise ValidationError(f"ablation grid axes must be non-empty: {', '.join(empty)}")

    def cells(self):
        """Cartesian product in declaration order (architecture varies slowest)."""
        import itertools

        return list(itertools.product(self.architectures, self.residual, self.sharing, self.M, self.K, self.seeds))


def load_grid(path):
    """Grid file: axis lists plus ``base_config`` (path or inline object) and optional ``out``."""
    path = Path(path)
    data = dict(read_json(path))
    base = data.pop("base_config", None)
    out = data.pop("out", "ablation.csv")
    if base is None:
        raise ValidationError(f"{path}: missing required field base_config")
    if isinstance(base, str):
        base_exp = load_experiment(path.parent / base)
    else:
        base_exp = experiment_from_dict(base, base_dir=path.parent, where=f"{path}.base_config")
    grid = build(AblationGrid, data, str(path))
    return grid, base_exp, (path.parent / out).resolve()
