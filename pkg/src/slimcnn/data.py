"""Folder splitting, class discovery, grayscale image loading and batching.

Shuffles use numpy's PCG64 generator (``numpy.random.default_rng``). Split
assignment seeds one generator with the split seed and draws one permutation
per class, visiting classes in sorted order.
"""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .imaging import resize_bilinear
from .tensor import DTYPE

SUBSETS = ("train", "val", "test")
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}

# guards floor(n * r) against ratios such as 0.1 that are not exact in binary
_FLOOR_EPS = 1e-9


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 888

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"need three non-negative ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")

    def counts(self, n: int) -> tuple[int, int, int]:
        """Train and val sizes are floored; test takes the remainder."""
        n_train = math.floor(n * self.ratios[0] + _FLOOR_EPS)
        n_val = math.floor(n * self.ratios[1] + _FLOOR_EPS)
        n_val = min(n_val, n - n_train)
        return n_train, n_val, n - n_train - n_val


def discover_classes(directory) -> tuple[list[str], dict[str, int]]:
    """Class names are the subdirectory names, sorted by byte order."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    names = sorted((p.name for p in d.iterdir() if p.is_dir() and not p.name.startswith(".")),
                   key=lambda s: s.encode("utf-8"))
    if not names:
        raise DataError(f"no class subdirectories in {d}")
    return names, {name: i for i, name in enumerate(names)}


def _class_files(d: Path) -> list[Path]:
    return sorted((p for p in d.iterdir() if p.is_file() and not p.name.startswith(".")),
                  key=lambda p: p.name.encode("utf-8"))


def split_folders(src_dir, dst_dir, spec: SplitSpec = SplitSpec()) -> dict[str, tuple[int, int, int]]:
    """Copy ``src/<class>/*`` into ``dst/{train,val,test}/<class>/``.

    Returns per-class ``(train, val, test)`` counts in class order.
    """
    src, dst = Path(src_dir), Path(dst_dir)
    classes, _ = discover_classes(src)
    rng = np.random.default_rng(spec.seed)
    plan = {}
    for name in classes:
        files = _class_files(src / name)
        if not files:
            raise DataError(f"class folder {src / name} is empty")
        order = rng.permutation(len(files))
        n_train, n_val, _ = spec.counts(len(files))
        parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
        plan[name] = [[files[i] for i in part] for part in parts]

    # check every target before copying anything
    for name, parts in plan.items():
        for subset, chosen in zip(SUBSETS, parts):
            for f in chosen:
                target = dst / subset / name / f.name
                if target.exists():
                    raise DataError(f"destination already exists: {target}")

    counts = {}
    for name, parts in plan.items():
        for subset, chosen in zip(SUBSETS, parts):
            out = dst / subset / name
            out.mkdir(parents=True, exist_ok=True)
            for f in chosen:
                shutil.copyfile(f, out / f.name)
        counts[name] = tuple(len(p) for p in parts)
    return counts


def format_split_table(counts: dict[str, tuple[int, int, int]]) -> str:
    names = list(counts)
    totals = [sum(c[i] for c in counts.values()) for i in range(3)]
    grand = sum(totals)
    width = max(10, *(len(n) for n in names)) + 2
    lines = ["Datasets".ljust(16) + "".join(n.rjust(width) for n in names) + "Total".rjust(18)]
    for i, subset in enumerate(SUBSETS):
        pct = f"{totals[i]} ({round(100 * totals[i] / grand) if grand else 0}%)"
        lines.append(subset.ljust(16) + "".join(str(counts[n][i]).rjust(width) for n in names)
                     + pct.rjust(18))
    lines.append("total".ljust(16) + "".join(str(sum(counts[n])).rjust(width) for n in names)
                 + str(grand).rjust(18))
    return "\n".join(lines)


def load_grayscale_image(path, target_h: int, target_w: int) -> np.ndarray:
    """Decode to luminance in [0, 1] with shape (target_h, target_w, 1)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                lum = np.asarray(im, dtype=np.float64)
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                lum = rgb @ np.array([0.299, 0.587, 0.114])
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if lum.shape != (target_h, target_w):
        lum = resize_bilinear(lum, target_h, target_w)
    return np.clip(lum / 255.0, 0.0, 1.0).astype(DTYPE)[:, :, None]


@dataclass
class DatasetIndex:
    samples: list[tuple[Path, int]]
    classes: list[str]
    image_size: tuple[int, int] = (128, 128)
    cache: bool = True
    _images: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_directory(cls, directory, image_size=(128, 128), classes: list[str] | None = None,
                       cache: bool = True) -> "DatasetIndex":
        """Index ``directory/<class>/<image>``; ``classes`` pins a known label order."""
        d = Path(directory)
        found, _ = discover_classes(d)
        if classes is None:
            classes = found
        elif set(found) - set(classes):
            raise DataError(f"{d} has classes {sorted(set(found) - set(classes))} unknown to the model")
        samples = []
        for idx, name in enumerate(classes):
            if not (d / name).is_dir():
                continue
            samples += [(p, idx) for p in _class_files(d / name) if p.suffix.lower() in IMAGE_SUFFIXES]
        return cls(samples, list(classes), tuple(image_size), cache)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.samples], dtype=np.int64)

    def image(self, i: int) -> np.ndarray:
        if i in self._images:
            return self._images[i]
        img = load_grayscale_image(self.samples[i][0], *self.image_size)
        if self.cache:
            self._images[i] = img
        return img


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    out = np.zeros((labels.size, k), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out


def batches(ds: DatasetIndex, batch_size: int = 32,
            epoch_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, onehot)`` batches covering every sample once.

    With ``epoch_seed`` None the index order is kept (evaluation); otherwise it
    is shuffled by a generator seeded with ``epoch_seed``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(ds))
    if epoch_seed is not None:
        order = np.random.default_rng(epoch_seed).permutation(len(ds))
    k = len(ds.classes)
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        x = np.stack([ds.image(int(i)) for i in idx])
        y = one_hot([ds.samples[int(i)][1] for i in idx], k)
        yield x, y
