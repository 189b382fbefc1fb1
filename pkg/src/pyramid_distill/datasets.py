"""MVTec-style category loading, a deterministic synthetic defect dataset,
and a desk-scale pretrained teacher.

Directory layout read and written here::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png          (defect_type "good" = defect-free)
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .backbone import ResidualNet, WeightsArchive, _init_weights, get_architecture
from .errors import DatasetError, LayoutError, PretrainingError, UsageError

GOOD = "good"


def read_image(path, size=None):
    """uint8 HxWx3 array; grayscale replicated, bilinear resize to ``size``."""
    with Image.open(path) as im:
        im = im.convert("L").convert("RGB") if im.mode in ("L", "I", "I;16", "1", "LA") \
            else im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def read_mask(path, size=None):
    """Boolean HxW mask; nearest-neighbour resize, binarized at half of 255."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return np.asarray(im) > 127


@dataclass
class Sample:
    """One image of a category, loaded on first access."""

    id: str
    label: str = GOOD
    path: Path | None = None
    mask_path: Path | None = None
    size: int | None = None
    _image: np.ndarray | None = field(default=None, repr=False)
    _mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self):
        if self._image is None:
            self._image = read_image(self.path, self.size)
        return self._image

    @property
    def mask(self):
        if self._mask is None and self.mask_path is not None:
            self._mask = read_mask(self.mask_path, self.size)
        return self._mask

    @property
    def is_defective(self):
        return self.label != GOOD

    def mask_or_zeros(self):
        m = self.mask
        return np.zeros(self.image.shape[:2], dtype=bool) if m is None else m


@dataclass
class CategorySet:
    name: str
    train: list
    test: list
    input_size: int | None = None

    def labels(self):
        return sorted({s.label for s in self.test})


def load_category(root, name, input_size=256) -> CategorySet:
    base = Path(root) / name
    train_dir = base / "train" / GOOD
    test_dir = base / "test"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise LayoutError(f"{base} does not follow the train/good + test/<type> layout")
    train = [Sample(p.stem, GOOD, p, size=input_size) for p in sorted(train_dir.glob("*.png"))]
    if not train:
        raise LayoutError(f"no training images under {train_dir}")
    test = []
    for type_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        label = type_dir.name
        for p in sorted(type_dir.glob("*.png")):
            mask_path = None
            if label != GOOD:
                mask_path = base / "ground_truth" / label / f"{p.stem}_mask.png"
                if not mask_path.is_file():
                    raise DatasetError(f"missing mask for defective image {p}: expected {mask_path}")
                with Image.open(p) as a, Image.open(mask_path) as b:
                    if a.size != b.size:
                        raise DatasetError(
                            f"mask {mask_path} is {b.size[0]}x{b.size[1]}, "
                            f"image {p} is {a.size[0]}x{a.size[1]}"
                        )
            test.append(Sample(p.stem, label, p, mask_path, size=input_size))
    if not test:
        raise LayoutError(f"no test images under {test_dir}")
    return CategorySet(name, train, test, input_size)


def list_categories(root):
    root = Path(root)
    return sorted(d.name for d in root.iterdir() if (d / "train" / GOOD).is_dir())


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic texture category.

    ``pattern`` is one of "stripes", "checker", "rings" or "noise". Angles
    are in degrees, lengths in pixels, intensities on a [0, 1] scale.
    """

    name: str = "synthetic"
    image_size: int = 64
    pattern: str = "stripes"
    period: float = 10.0
    orientation: float = 30.0
    amplitude: float = 0.25
    noise: float = 0.04
    tint: tuple = (0.9, 0.75, 0.6)
    blobs: tuple = (1, 2)
    radius: tuple = (4, 7)
    delta: float = 0.35
    n_train: int = 60
    n_test_good: int = 20
    n_test_defect: int = 20
    seed: int = 0


PATTERNS = ("stripes", "checker", "rings", "noise")


def _background(spec, rng):
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    theta = np.deg2rad(spec.orientation)
    k = 2 * np.pi / spec.period
    if spec.pattern == "stripes":
        wave = np.sin(k * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    elif spec.pattern == "checker":
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = -xx * np.sin(theta) + yy * np.cos(theta)
        wave = np.sin(k * u + phase) * np.sin(k * v + rng.uniform(0, 2 * np.pi))
    elif spec.pattern == "rings":
        cy, cx = rng.uniform(0, n, size=2)
        wave = np.sin(k * np.hypot(xx - cx, yy - cy) + phase)
    elif spec.pattern == "noise":
        wave = np.zeros_like(xx)
    else:
        raise UsageError(f"unknown pattern {spec.pattern!r}; choose from {PATTERNS}")
    gray = 0.5 + spec.amplitude * wave
    img = gray[..., None] * np.asarray(spec.tint)[None, None, :]
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return img


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def rasterize_disk(size, center, radius):
    """Boolean mask of pixels whose centre lies within ``radius`` of
    ``center`` = (row, col)."""
    yy, xx = np.mgrid[0:size, 0:size]
    r0, c0 = center
    return (yy - r0) ** 2 + (xx - c0) ** 2 <= radius ** 2


def paint_blob(img, center, radius, value):
    """Fill a disk of a float image with a flat color; returns the disk mask."""
    disk = rasterize_disk(img.shape[0], center, radius)
    img[disk] = value
    return disk


def _defective(spec, rng):
    img = _background(spec, rng)
    n = spec.image_size
    mask = np.zeros((n, n), dtype=bool)
    count = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    for _ in range(count):
        r = int(rng.integers(spec.radius[0], spec.radius[1] + 1))
        center = tuple(int(c) for c in rng.integers(r, n - r, size=2))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        color = np.clip(0.5 + sign * spec.delta + rng.uniform(-0.05, 0.05, size=3), 0, 1)
        disk = paint_blob(img, center, r, color)
        img[disk] += rng.normal(0.0, spec.noise, size=(int(disk.sum()), 3))
        mask |= disk
    return img, mask


def _check_spec(spec):
    if spec.n_train < 1 or spec.n_test_good < 0 or spec.n_test_defect < 0 \
            or spec.n_test_good + spec.n_test_defect == 0:
        raise UsageError("synthetic spec needs at least one training and one test image")
    if spec.image_size < 8 or spec.period <= 0:
        raise UsageError("synthetic spec has a degenerate image size or period")
    if spec.radius[0] < 1 or spec.radius[1] < spec.radius[0] or 2 * spec.radius[1] >= spec.image_size:
        raise UsageError(f"blob radius range {spec.radius} does not fit the image")


def generate_synthetic(spec: SynthSpec) -> CategorySet:
    """Deterministic category: textured backgrounds, blob defects, exact masks."""
    _check_spec(spec)
    rng = np.random.default_rng(spec.seed)
    train = [Sample(f"{i:03d}", GOOD, _image=_quantize(_background(spec, rng)))
             for i in range(spec.n_train)]
    test = [Sample(f"{i:03d}", GOOD, _image=_quantize(_background(spec, rng)))
            for i in range(spec.n_test_good)]
    for i in range(spec.n_test_defect):
        img, mask = _defective(spec, rng)
        test.append(Sample(f"{i:03d}", "blob", _image=_quantize(img), _mask=mask))
    return CategorySet(spec.name, train, test, spec.image_size)


def write_category(category: CategorySet, root):
    """Write a CategorySet as PNG files in the MVTec layout."""
    base = Path(root) / category.name
    for sub in ("train", "test", "ground_truth"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    (base / "train" / GOOD).mkdir(exist_ok=True)
    for s in category.train:
        Image.fromarray(s.image).save(base / "train" / GOOD / f"{s.id}.png")
    for s in category.test:
        d = base / "test" / s.label
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(s.image).save(d / f"{s.id}.png")
        if s.is_defective:
            g = base / "ground_truth" / s.label
            g.mkdir(parents=True, exist_ok=True)
            Image.fromarray(s.mask_or_zeros().astype(np.uint8) * 255).save(g / f"{s.id}_mask.png")
    return base


def default_texture_classes(image_size=64, seed=0):
    """Three well-separated structured textures for toy pretraining."""
    base = SynthSpec(image_size=image_size, seed=seed, noise=0.05)
    return [
        replace(base, name="stripes", pattern="stripes", period=8, orientation=0,
                tint=(0.8, 0.8, 0.9)),
        replace(base, name="checker", pattern="checker", period=12, orientation=45,
                tint=(0.9, 0.7, 0.6)),
        replace(base, name="rings", pattern="rings", period=7, orientation=0,
                tint=(0.6, 0.9, 0.7)),
    ]


def noise_texture_classes(image_size=64, seed=0):
    """Structure-free classes told apart only by noise level and tint."""
    base = SynthSpec(image_size=image_size, seed=seed, pattern="noise", amplitude=0.0)
    return [
        replace(base, name="noise-low", noise=0.02, tint=(0.8, 0.8, 0.8)),
        replace(base, name="noise-mid", noise=0.10, tint=(0.8, 0.7, 0.8)),
        replace(base, name="noise-high", noise=0.25, tint=(0.7, 0.8, 0.8)),
    ]


class _Classifier(nn.Module):
    def __init__(self, backbone, n_classes):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.arch.stage_channels[-1], n_classes)

    def forward(self, x):
        return self.head(self.backbone(x)[-1].mean(dim=(2, 3)))


def pretrain_toy_teacher(specs, epochs=8, seed=0, architecture="resnet-toy",
                         per_class=80, batch_size=32, lr=2e-3,
                         min_accuracy=0.8) -> WeightsArchive:
    """Train a small residual classifier on synthetic texture classes and
    export its feature extractor as a weights archive.

    A quarter of each class is held out; the holdout accuracy is stored in
    the archive metadata. Raises PretrainingError below ``min_accuracy``.
    """
    specs = list(specs)
    if len(specs) < 2:
        raise UsageError("toy pretraining needs at least two texture classes")
    arch = get_architecture(architecture)
    size = specs[0].image_size
    if any(s.image_size != size for s in specs):
        raise UsageError("all texture classes must share one image size")

    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, spec in enumerate(specs):
        for _ in range(per_class):
            xs.append(_quantize(_background(spec, rng)))
            ys.append(label)
    x = np.stack(xs).astype(np.float32) / 255.0
    y = np.asarray(ys)
    order = rng.permutation(len(y))
    n_hold = max(len(specs), len(y) // 4)
    hold, fit = order[:n_hold], order[n_hold:]

    mean = x[fit].mean(axis=(0, 1, 2))
    std = x[fit].std(axis=(0, 1, 2)) + 1e-6
    xt = torch.from_numpy(((x - mean) / std).transpose(0, 3, 1, 2).copy())
    yt = torch.from_numpy(y)

    torch.manual_seed(seed)
    backbone = ResidualNet(arch)
    _init_weights(backbone, seed)
    model = _Classifier(backbone, len(specs))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    fit_t = torch.from_numpy(fit)
    for _ in range(epochs):
        model.train()
        perm = fit_t[torch.randperm(len(fit_t), generator=gen)]
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            loss = nn.functional.cross_entropy(model(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    model.eval()
    with torch.no_grad():
        pred = model(xt[torch.from_numpy(hold)]).argmax(dim=1).numpy()
    accuracy = float((pred == y[hold]).mean())
    if accuracy < min_accuracy:
        raise PretrainingError(
            f"toy teacher reached only {accuracy:.3f} holdout accuracy "
            f"(needs {min_accuracy}); raise epochs or separate the classes"
        )
    arrays = {k: v.detach().numpy().copy() for k, v in backbone.state_dict().items()}
    meta = {
        "architecture": arch.name,
        "input_size": int(size),
        "mean": [float(v) for v in mean],
        "std": [float(v) for v in std],
        "pretraining": {
            "classes": [s.name for s in specs],
            "holdout_accuracy": accuracy,
            "epochs": int(epochs),
            "seed": int(seed),
        },
    }
    return WeightsArchive(arrays, meta)

