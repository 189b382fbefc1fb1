"""Residual backbones for the teacher and the student, weight archives, and
feature pyramid extraction.

Layer groups follow the usual residual-network numbering:
block 1 is the stem (``conv1``), blocks 2..5 are ``conv2_x``..``conv5_x``
(``layer1``..``layer4`` in torchvision naming). A pyramid level is the
post-activation output of a whole group.

Weights archive format
----------------------
A single ``.npz`` file. Every entry except ``__meta__`` maps a parameter or
buffer name (torchvision ``state_dict`` naming) to a dense array. ``__meta__``
is a 0-d unicode array holding a JSON object with at least::

    {"format": "pyramid-distill-weights", "version": 1,
     "architecture": "resnet18", "input_size": 256,
     "mean": [r, g, b], "std": [r, g, b]}

Checkpoints use the same container with extra metadata keys.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionError, LoadError

ARCHIVE_FORMAT = "pyramid-distill-weights"
META_KEY = "__meta__"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class Architecture:
    name: str
    stem_channels: int
    stem_kernel: int
    stem_stride: int
    stem_pool: bool
    stage_channels: tuple
    blocks_per_stage: tuple
    input_size: int

    @property
    def num_groups(self):
        return 1 + len(self.stage_channels)

    def level_shapes(self, input_size=None):
        """(channels, height, width) of every layer group output, blocks 1..5."""
        size = input_size or self.input_size
        size = _conv_out(size, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        shapes = [(self.stem_channels, size, size)]
        if self.stem_pool:
            size = _conv_out(size, 3, 2, 1)
        for i, ch in enumerate(self.stage_channels):
            if i > 0:
                size = _conv_out(size, 3, 2, 1)
            shapes.append((ch, size, size))
        return shapes


def _conv_out(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


ARCHITECTURES = {
    "resnet18": Architecture(
        name="resnet18", stem_channels=64, stem_kernel=7, stem_stride=2,
        stem_pool=True, stage_channels=(64, 128, 256, 512),
        blocks_per_stage=(2, 2, 2, 2), input_size=256,
    ),
    # desk-scale member of the same family: one basic block per stage
    "resnet-toy": Architecture(
        name="resnet-toy", stem_channels=16, stem_kernel=3, stem_stride=2,
        stem_pool=False, stage_channels=(16, 32, 64, 128),
        blocks_per_stage=(1, 1, 1, 1), input_size=64,
    ),
}


def get_architecture(name):
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise ConfigError(
            f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}"
        ) from None


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResidualNet(nn.Module):
    """Residual feature extractor without the classification head.

    Parameter names follow torchvision's ResNet so that its ImageNet
    state dicts load without renaming.
    """

    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        self.conv1 = nn.Conv2d(
            3, arch.stem_channels, arch.stem_kernel, arch.stem_stride,
            arch.stem_kernel // 2, bias=False,
        )
        self.bn1 = nn.BatchNorm2d(arch.stem_channels)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1) if arch.stem_pool else nn.Identity()
        in_ch = arch.stem_channels
        for i, (ch, n) in enumerate(zip(arch.stage_channels, arch.blocks_per_stage)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, ch, stride)]
            blocks += [BasicBlock(ch, ch, 1) for _ in range(n - 1)]
            setattr(self, f"layer{i + 1}", nn.Sequential(*blocks))
            in_ch = ch

    def pyramid(self, x, block_ids):
        """Outputs of the requested layer groups, in increasing block order."""
        wanted = set(block_ids)
        last = max(block_ids)
        outs = []
        x = self.relu(self.bn1(self.conv1(x)))
        if 1 in wanted:
            outs.append(x)
        x = self.maxpool(x)
        for b in range(2, last + 1):
            x = getattr(self, f"layer{b - 1}")(x)
            if b in wanted:
                outs.append(x)
        return outs

    def forward(self, x):
        return self.pyramid(x, list(range(1, self.arch.num_groups + 1)))


@dataclass(frozen=True)
class PyramidConfig:
    """Which layer groups are matched, and how much each level weighs."""

    block_ids: tuple = (2, 3, 4)
    level_weights: tuple | None = None

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.block_ids)
        if len(blocks) == 0:
            raise ConfigError("block_ids must name at least one layer group")
        if any(b2 <= b1 for b1, b2 in zip(blocks, blocks[1:])):
            raise ConfigError(f"block_ids must be strictly increasing, got {blocks}")
        weights = self.level_weights
        weights = (1.0,) * len(blocks) if weights is None else tuple(float(w) for w in weights)
        if len(weights) != len(blocks):
            raise ConfigError(
                f"{len(weights)} level weights given for {len(blocks)} blocks"
            )
        if any(not np.isfinite(w) or w < 0 for w in weights):
            raise ConfigError(f"level weights must be finite and >= 0, got {weights}")
        object.__setattr__(self, "block_ids", blocks)
        object.__setattr__(self, "level_weights", weights)

    @property
    def num_levels(self):
        return len(self.block_ids)

    def check_architecture(self, arch: Architecture):
        bad = [b for b in self.block_ids if not 1 <= b <= arch.num_groups]
        if bad:
            raise ConfigError(
                f"block ids {bad} do not exist in {arch.name} "
                f"(valid: 1..{arch.num_groups})"
            )

    def to_dict(self):
        return {"blocks": list(self.block_ids), "weights": list(self.level_weights)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["blocks"]), d.get("weights"))


@dataclass
class WeightsArchive:
    """In-memory form of the weights archive file."""

    arrays: dict
    meta: dict

    @property
    def architecture(self):
        return self.meta["architecture"]

    def fingerprint(self):
        return _fingerprint(self.arrays)

    def save(self, path):
        path = Path(path)
        meta = {"format": ARCHIVE_FORMAT, "version": 1, **self.meta}
        payload = {k: np.asarray(v) for k, v in self.arrays.items()}
        payload[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
        path.parent.mkdir(parents=True, exist_ok=True)
        # np.savez appends .npz to bare names; write through a handle instead
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise LoadError(f"weights archive not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as data:
                arrays = {k: data[k] for k in data.files if k != META_KEY}
                if META_KEY not in data.files:
                    raise LoadError(f"{path} has no {META_KEY} record")
                meta = json.loads(str(data[META_KEY]))
        except (OSError, ValueError) as exc:
            raise LoadError(f"cannot read weights archive {path}: {exc}") from exc
        if meta.get("format") != ARCHIVE_FORMAT:
            raise LoadError(f"{path} is not a {ARCHIVE_FORMAT} archive")
        return cls(arrays, meta)


def _fingerprint(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class NetworkHandle:
    architecture: str
    module: ResidualNet
    frozen: bool
    meta: dict = field(default_factory=dict)

    @property
    def arch(self):
        return get_architecture(self.architecture)

    @property
    def input_size(self):
        return int(self.meta.get("input_size", self.arch.input_size))

    @property
    def mean(self):
        return tuple(self.meta.get("mean", IMAGENET_MEAN))

    @property
    def std(self):
        return tuple(self.meta.get("std", IMAGENET_STD))

    def parameters(self):
        """Named parameters and buffers as numpy arrays (copies)."""
        return {k: v.detach().cpu().numpy().copy()
                for k, v in self.module.state_dict().items()}

    def layer_shapes(self):
        return [(k, tuple(v.shape)) for k, v in self.module.state_dict().items()]

    def checksum(self):
        return _fingerprint(self.parameters())

    def to_archive(self):
        meta = {k: self.meta[k] for k in ("input_size", "mean", "std") if k in self.meta}
        meta["architecture"] = self.architecture
        return WeightsArchive(self.parameters(), meta)

    def preprocess(self, images):
        """uint8 (or [0, 1] float) images, HxW or HxWxC, single or batched,
        to a normalized float32 NCHW tensor."""
        x = np.asarray(images)
        if x.ndim == 2 or (x.ndim == 3 and x.shape[-1] not in (1, 3)):
            x = x[..., None]
        if x.ndim == 3:
            x = x[None]
        if x.shape[-1] == 1:
            x = np.repeat(x, 3, axis=-1)
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / 255.0
        x = x.astype(np.float32)
        x = (x - np.asarray(self.mean, np.float32)) / np.asarray(self.std, np.float32)
        return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def random_archive(architecture="resnet18", seed=0, input_size=None,
                   mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Archive with seeded random weights; stands in for pretrained ones."""
    arch = get_architecture(architecture)
    net = ResidualNet(arch)
    _init_weights(net, seed)
    arrays = {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}
    meta = {
        "architecture": arch.name,
        "input_size": int(input_size or arch.input_size),
        "mean": list(mean),
        "std": list(std),
    }
    return WeightsArchive(arrays, meta)


def _init_weights(net, seed):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in net.named_modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, float(np.sqrt(2.0 / fan_out)), generator=gen)
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.num_batches_tracked.zero_()


def _build_module(archive: WeightsArchive):
    arch = get_architecture(archive.meta.get("architecture", ""))
    net = ResidualNet(arch)
    expected = net.state_dict()
    missing = [k for k in expected if k not in archive.arrays]
    if missing:
        raise LoadError(f"archive is missing tensor {missing[0]!r} ({len(missing)} missing)")
    for name, ref in expected.items():
        got = archive.arrays[name]
        if tuple(got.shape) != tuple(ref.shape):
            raise LoadError(
                f"shape mismatch for tensor {name!r}: archive has {tuple(got.shape)}, "
                f"{arch.name} expects {tuple(ref.shape)}"
            )
    state = {k: torch.from_numpy(np.array(archive.arrays[k])).to(expected[k].dtype)
             for k in expected}
    net.load_state_dict(state)
    return arch, net


def load_teacher(archive, config: PyramidConfig) -> NetworkHandle:
    """Build a frozen teacher from a weights archive (path or WeightsArchive)."""
    if not isinstance(archive, WeightsArchive):
        archive = WeightsArchive.load(archive)
    arch, net = _build_module(archive)
    config.check_architecture(arch)
    net.eval()
    net.requires_grad_(False)
    meta = dict(archive.meta)
    meta.setdefault("input_size", arch.input_size)
    meta["fingerprint"] = archive.fingerprint()
    return NetworkHandle(arch.name, net, frozen=True, meta=meta)


def init_student(teacher: NetworkHandle, seed: int) -> NetworkHandle:
    """Trainable network with the teacher's architecture and seeded random weights."""
    if not isinstance(teacher, NetworkHandle):
        raise TypeError("teacher must be a NetworkHandle")
    net = ResidualNet(teacher.arch)
    _init_weights(net, seed)
    meta = {k: teacher.meta[k] for k in ("input_size", "mean", "std") if k in teacher.meta}
    meta["seed"] = int(seed)
    return NetworkHandle(teacher.architecture, net, frozen=False, meta=meta)


def student_from_parameters(teacher: NetworkHandle, arrays) -> NetworkHandle:
    archive = WeightsArchive(dict(arrays), {"architecture": teacher.architecture})
    _, net = _build_module(archive)
    meta = {k: teacher.meta[k] for k in ("input_size", "mean", "std") if k in teacher.meta}
    return NetworkHandle(teacher.architecture, net, frozen=False, meta=meta)


def check_input(net: NetworkHandle, batch):
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise DimensionError(f"expected an (N, 3, H, W) batch, got shape {tuple(batch.shape)}")
    size = net.input_size
    if batch.shape[2] != size or batch.shape[3] != size:
        raise DimensionError(
            f"input spatial size {tuple(batch.shape[2:])} != configured {size}x{size}"
        )


def extract_pyramid(net: NetworkHandle, batch, config: PyramidConfig):
    """Feature maps of the configured layer groups, each (N, C_l, H_l, W_l).

    Runs in inference mode; neither parameters nor batch-norm statistics
    change.
    """
    if not torch.is_tensor(batch):
        batch = torch.as_tensor(np.asarray(batch, np.float32))
    check_input(net, batch)
    config.check_architecture(net.arch)
    was_training = net.module.training
    net.module.eval()
    try:
        with torch.no_grad():
            return net.module.pyramid(batch, config.block_ids)
    finally:
        net.module.train(was_training)
