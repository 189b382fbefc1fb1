"""Run configuration: a YAML file merged with command-line overrides.

Example file::

    data:
      root: data            # PYRAMID_DISTILL_DATA overrides this
      categories: [synthetic]
    teacher:
      archive: teacher.npz
    pyramid:
      blocks: [2, 3, 4]
      weights: null         # null = all ones
    train:
      learning_rate: 0.4
      epochs: 100
      batch_size: 32
      input_size: 256
      val_fraction: 0.2
      train_fraction: 1.0
      seed: 0
      momentum: 0.9
      weight_decay: 0.0001
    metrics:
      fpr_limit: 0.3
      steps: 200
      fpr_mode: pooled
      smoothing_sigma: null
    output:
      dir: runs/default
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .backbone import PyramidConfig
from .errors import ConfigError, UsageError
from .trainer import TrainConfig

DATA_ROOT_ENV = "PYRAMID_DISTILL_DATA"
METRIC_DEFAULTS = {"fpr_limit": 0.3, "steps": 200, "fpr_mode": "pooled", "smoothing_sigma": None}


@dataclass
class RunConfig:
    data_root: str = "data"
    categories: list = field(default_factory=list)
    teacher_archive: str | None = None
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: dict = field(default_factory=lambda: dict(METRIC_DEFAULTS))
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        # "fingerprint" appears in written snapshots and is recomputed, not read
        unknown = set(d) - {"data", "teacher", "pyramid", "train", "metrics", "output",
                            "fingerprint"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        data = d.get("data") or {}
        train_keys = {f.name for f in fields(TrainConfig)}
        train = d.get("train") or {}
        bad = set(train) - train_keys
        if bad:
            raise ConfigError(f"unknown train options: {sorted(bad)}")
        metrics = dict(METRIC_DEFAULTS)
        metrics.update(d.get("metrics") or {})
        pyr = d.get("pyramid") or {}
        try:
            return cls(
                data_root=str(data.get("root", "data")),
                categories=list(data.get("categories") or []),
                teacher_archive=(d.get("teacher") or {}).get("archive"),
                pyramid=PyramidConfig(tuple(pyr.get("blocks", (2, 3, 4))), pyr.get("weights")),
                train=TrainConfig(**train),
                metrics=metrics,
                output_dir=str((d.get("output") or {}).get("dir", "runs/default")),
            )
        except UsageError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(yaml.safe_load(path.read_text()))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc

    def to_dict(self):
        return {
            "data": {"root": self.data_root, "categories": list(self.categories)},
            "teacher": {"archive": self.teacher_archive},
            "pyramid": {"blocks": list(self.pyramid.block_ids),
                        "weights": list(self.pyramid.level_weights)},
            "train": self.train.to_dict(),
            "metrics": dict(self.metrics),
            "output": {"dir": self.output_dir},
        }

    def semantic_dict(self):
        """Fields that change numeric results; paths are excluded."""
        d = self.to_dict()
        return {"pyramid": d["pyramid"], "train": d["train"], "metrics": d["metrics"]}

    def fingerprint(self):
        blob = json.dumps(self.semantic_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, blocks=None, weights=None, categories=None, data_root=None,
                       teacher=None, output=None, metrics=None, env=None, **train):
        """New config with command-line values applied over file values.

        Data root precedence: explicit override, then the environment
        variable, then the file.
        """
        env = os.environ if env is None else env
        cfg = replace(self)
        if data_root:
            cfg.data_root = str(data_root)
        elif env.get(DATA_ROOT_ENV):
            cfg.data_root = env[DATA_ROOT_ENV]
        if categories:
            cfg.categories = list(categories)
        if teacher:
            cfg.teacher_archive = str(teacher)
        if output:
            cfg.output_dir = str(output)
        if blocks is not None:
            # new blocks without explicit weights fall back to all ones
            cfg.pyramid = PyramidConfig(tuple(blocks), weights)
        elif weights is not None:
            cfg.pyramid = PyramidConfig(cfg.pyramid.block_ids, weights)
        train = {k: v for k, v in train.items() if v is not None}
        if train:
            try:
                cfg.train = replace(cfg.train, **train)
            except UsageError as exc:
                raise ConfigError(str(exc)) from exc
        if metrics:
            cfg.metrics = {**cfg.metrics, **{k: v for k, v in metrics.items() if v is not None}}
        return cfg

    def write(self, directory):
        """Snapshot the resolved config (with its fingerprint) into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        d["fingerprint"] = self.fingerprint()
        path = directory / "config.yaml"
        path.write_text(yaml.safe_dump(d, sort_keys=True))
        return path
