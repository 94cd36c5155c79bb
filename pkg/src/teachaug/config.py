"""Run configuration: training settings, dataset settings and an output directory,
stored as one JSON object with ``train`` and ``data`` sections."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .data import Dataset, ShapesSpec, generate_shapes, read_cifar_binary, train_test_split
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class DataConfig:
    """Synthetic shapes by default; ``path`` switches to the binary reader.

    The defaults are the desk-scale comparison setting: 16x16 images with
    wide colour jitter and noisy backgrounds, 2000 train / 500 test.
    """

    n_train: int = 2000
    n_test: int = 500
    height: int = 16
    width: int = 16
    num_classes: int = 3
    palette_jitter: float = 0.3
    background_noise: float = 0.15
    seed: int = 0
    path: str = ""

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("n_train and n_test must be non-negative")

    def shapes_spec(self) -> ShapesSpec:
        return ShapesSpec(n=self.n_train + self.n_test, height=self.height, width=self.width,
                          num_classes=self.num_classes, palette_jitter=self.palette_jitter,
                          background_noise=self.background_noise, seed=self.seed)

    def load(self) -> tuple[Dataset, Dataset]:
        """(train, test). A binary file is split the same way: the last
        ``n_test`` records are the test set, ``n_train`` caps the rest."""
        self.validate()
        if self.path:
            data = read_cifar_binary(self.path, self.num_classes)
        else:
            data = generate_shapes(self.shapes_spec())
        n_test = min(self.n_test, len(data))
        tr, te = train_test_split(data, n_test)
        if len(tr) > self.n_train:
            tr = tr.subset(slice(0, self.n_train), "train")
        return tr, te


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/default"

    def validate(self) -> None:
        self.train.validate()
        self.data.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["lr_milestones"] = list(d["train"]["lr_milestones"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        data = d.get("data", {})
        unknown = sorted(set(data) - {f.name for f in fields(DataConfig)})
        if unknown:
            raise ConfigError(f"unknown data config keys: {unknown}")
        try:
            cfg = cls(TrainConfig.from_dict(d.get("train", {})), DataConfig(**data),
                      d.get("out", cls.out))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)
