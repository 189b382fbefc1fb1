"""Student training against a frozen teacher, validation, checkpoints and
feature dumps."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import (NetworkHandle, PyramidConfig, WeightsArchive, extract_pyramid,
                       student_from_parameters)
from .distill import batch_loss, normalize_positions, total_loss
from .errors import ConfigError, LoadError, TrainingError, UsageError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.4
    epochs: int = 100
    batch_size: int = 32
    input_size: int = 256
    val_fraction: float = 0.2
    train_fraction: float = 1.0
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.input_size < 1:
            raise UsageError("batch_size and input_size must be positive")
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise UsageError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise UsageError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise UsageError("momentum and weight_decay must be non-negative")

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def split_dataset(items, val_fraction=0.2, train_fraction=1.0, seed=0):
    """Seeded shuffle into disjoint (train, val) lists.

    The validation share is ``round(n * val_fraction)`` (at least 1); the
    remaining training share is then cut to ``ceil(train_fraction * n_train)``
    items, minimum 1.
    """
    items = list(items)
    n = len(items)
    if n < 2:
        raise UsageError(f"need at least 2 items to split, got {n}")
    if not 0.0 < val_fraction < 1.0 or not 0.0 < train_fraction <= 1.0:
        raise UsageError("fractions out of range")
    order = np.random.default_rng(seed).permutation(n)
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    # round() guards against float noise such as 0.05 * 80 = 4.000000000000001
    n_train = max(1, math.ceil(round(len(train_idx) * train_fraction, 9)))
    train_idx = train_idx[:n_train]
    return [items[i] for i in train_idx], [items[i] for i in val_idx]


@dataclass
class Checkpoint:
    parameters: dict
    epoch: int
    val_loss: float
    config_fingerprint: str
    teacher_fingerprint: str
    pyramid: PyramidConfig
    architecture: str
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def student(self, teacher: NetworkHandle) -> NetworkHandle:
        if teacher.architecture != self.architecture:
            raise ConfigError(
                f"checkpoint is for {self.architecture}, teacher is {teacher.architecture}"
            )
        return student_from_parameters(teacher, self.parameters)

    def save(self, path):
        meta = {
            "kind": "checkpoint",
            "architecture": self.architecture,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "config_fingerprint": self.config_fingerprint,
            "teacher_fingerprint": self.teacher_fingerprint,
            "pyramid": self.pyramid.to_dict(),
            "train_config": self.train_config,
            "history": self.history,
            "extra": self.extra,
        }
        return WeightsArchive(self.parameters, meta).save(path)

    @classmethod
    def load(cls, path):
        archive = WeightsArchive.load(path)
        m = archive.meta
        if m.get("kind") != "checkpoint":
            raise LoadError(f"{path} is a weights archive, not a checkpoint")
        return cls(
            parameters=archive.arrays,
            epoch=int(m["epoch"]),
            val_loss=float(m["val_loss"]),
            config_fingerprint=m["config_fingerprint"],
            teacher_fingerprint=m["teacher_fingerprint"],
            pyramid=PyramidConfig.from_dict(m["pyramid"]),
            architecture=m["architecture"],
            train_config=m.get("train_config", {}),
            history=m.get("history", []),
            extra=m.get("extra", {}),
        )


def _as_batch(net, images):
    if torch.is_tensor(images):
        return images
    return net.preprocess(np.stack([np.asarray(im) for im in images]))


def validate(teacher, student, val_images, pyramid: PyramidConfig, batch_size=32):
    """Mean per-image total loss over ``val_images`` without any update."""
    x = _as_batch(teacher, val_images)
    if len(x) == 0:
        raise UsageError("validation set is empty")
    acc = 0.0
    for i in range(0, len(x), batch_size):
        chunk = x[i:i + batch_size]
        pyr_t = extract_pyramid(teacher, chunk, pyramid)
        pyr_s = extract_pyramid(student, chunk, pyramid)
        acc += float(total_loss(pyr_t, pyr_s, pyramid).total.double().sum())
    return acc / len(x)


def train(teacher: NetworkHandle, student: NetworkHandle, train_images, val_images,
          config: TrainConfig, pyramid: PyramidConfig, checkpoint_dir=None,
          log_path=None, extra=None) -> Checkpoint:
    """Minibatch SGD on the student; returns the lowest-validation-loss epoch.

    The student handle is left holding the returned (best) parameters. When
    ``checkpoint_dir`` is given, ``best.npz`` and ``last.npz`` are refreshed
    every epoch; ``log_path`` receives one JSON line per epoch.
    """
    if not teacher.frozen or student.frozen:
        raise UsageError("train needs a frozen teacher and a trainable student")
    if teacher.architecture != student.architecture:
        raise ConfigError("teacher and student architectures differ")
    x_train = _as_batch(teacher, train_images)
    x_val = _as_batch(teacher, val_images)
    if len(x_train) == 0 or len(x_val) == 0:
        raise UsageError("training and validation sets must be non-empty")

    torch.manual_seed(config.seed)
    net = student.module
    net.requires_grad_(True)
    opt = torch.optim.SGD(net.parameters(), lr=config.learning_rate,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    teacher_fp = teacher.meta.get("fingerprint") or teacher.checksum()
    fingerprint = config.fingerprint()

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a") if log_path else None
    if log_fh:
        log_fh.write(json.dumps({"event": "start", "n_train": len(x_train),
                                 "n_val": len(x_val), "config": config.to_dict(),
                                 "pyramid": pyramid.to_dict()}) + "\n")

    def make_ckpt(state, epoch, val):
        return Checkpoint(
            parameters={k: v.detach().cpu().numpy().copy() for k, v in state.items()},
            epoch=epoch, val_loss=val, config_fingerprint=fingerprint,
            teacher_fingerprint=teacher_fp, pyramid=pyramid,
            architecture=student.architecture, train_config=config.to_dict(),
            history=list(history), extra=dict(extra or {}),
        )

    history = []
    best_state, best_epoch, best_val = None, -1, math.inf
    try:
        for epoch in range(1, config.epochs + 1):
            net.train()
            perm = torch.randperm(len(x_train), generator=gen)
            running, seen = 0.0, 0
            for i in range(0, len(perm), config.batch_size):
                xb = x_train[perm[i:i + config.batch_size]]
                with torch.no_grad():
                    pyr_t = teacher.module.pyramid(xb, pyramid.block_ids)
                pyr_s = net.pyramid(xb, pyramid.block_ids)
                loss = batch_loss(total_loss(pyr_t, pyr_s, pyramid, check=False))
                if not torch.isfinite(loss):
                    raise TrainingError(f"loss became {loss.item()} in epoch {epoch}", epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(xb)
                seen += len(xb)
            val = validate(teacher, student, x_val, pyramid, config.batch_size)
            if not math.isfinite(val):
                raise TrainingError(f"validation loss became {val} in epoch {epoch}", epoch)
            record = {"epoch": epoch, "train_loss": running / seen, "val_loss": val}
            history.append(record)
            log.info("epoch %d train %.6f val %.6f", epoch, record["train_loss"], val)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_state = copy.deepcopy(net.state_dict())
                if ckpt_dir:
                    make_ckpt(best_state, epoch, val).save(ckpt_dir / "best.npz")
            if ckpt_dir:
                make_ckpt(net.state_dict(), epoch, val).save(ckpt_dir / "last.npz")
    finally:
        if log_fh:
            log_fh.close()

    net.load_state_dict(best_state)
    net.eval()
    best = make_ckpt(best_state, best_epoch, best_val)
    if ckpt_dir:
        best.save(ckpt_dir / "best.npz")
    return best


def dump_features(teacher, student, image, pyramid: PyramidConfig, path, source_id=None):
    """Write per-position unit feature vectors of both networks.

    The ``.npz`` record holds, for every block ``b``: ``b{b}_teacher`` and
    ``b{b}_student`` (positions x channels), ``b{b}_coords`` ((row, col)
    per position), and a JSON ``__meta__`` entry.
    """
    if not isinstance(pyramid, PyramidConfig):
        pyramid = PyramidConfig(tuple(pyramid))
    x = _as_batch(teacher, [image]) if not torch.is_tensor(image) else image.reshape(1, *image.shape[-3:])
    pyr_t = extract_pyramid(teacher, x, pyramid)
    pyr_s = extract_pyramid(student, x, pyramid)
    record = {}
    shapes = []
    for b, ft, fs in zip(pyramid.block_ids, pyr_t, pyr_s):
        c, h, w = ft.shape[1:]
        rows, cols = np.mgrid[0:h, 0:w]
        for tag, f in (("teacher", ft), ("student", fs)):
            unit = normalize_positions(f[0]).numpy()
            record[f"b{b}_{tag}"] = unit.reshape(c, -1).T.astype(np.float32)
        record[f"b{b}_coords"] = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.int32)
        shapes.append([int(c), int(h), int(w)])
    meta = {"blocks": list(pyramid.block_ids), "shapes": shapes, "source_id": source_id}
    record["__meta__"] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **record)
    return path


def load_features(path):
    with np.load(path, allow_pickle=False) as d:
        meta = json.loads(str(d["__meta__"]))
        return {k: d[k] for k in d.files if k != "__meta__"}, meta
