"""Dataset ingestion (IDX format) and continual-task stream generation.

A task stream is a list of (TaskSpec, transformed dataset) pairs derived from
one base dataset: either pixel permutations or center rotations, one fixed
transform per task, applied identically to every image. Specs are generated
from a master seed alone, so a stream is reproducible from
(kind, n_tasks, master_seed) and can be re-applied to any split.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, IdxParseError, ParameterError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# spawn key tags for deriving independent child seeds from the master seed
_TASK_KEY = 1
_SUBSET_KEY = 2


@dataclass
class Dataset:
    """Flat image matrix in [0,1] plus integer labels."""

    images: np.ndarray  # [N, side*side] float64 in [0, 1]
    labels: np.ndarray  # [N] int64 in [0, 10)
    split: str = "train"
    side: int = 28

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"images {self.images.shape} and labels {self.labels.shape} do not align"
            )
        if self.images.shape[1] != self.side * self.side:
            raise DataError(
                f"images have {self.images.shape[1]} pixels, expected {self.side}x{self.side}"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise DataError("labels must lie in [0, 10)")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, indices: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.images[indices].copy(), self.labels[indices].copy(),
                       split or self.split, self.side)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str  # identity | permuted | rotated
    seed: int
    permutation: np.ndarray | None = field(default=None, repr=False)
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "permuted", "rotated"):
            raise ParameterError(f"unknown task kind {self.kind!r}")
        if self.kind == "permuted":
            p = self.permutation
            if p is None or sorted(p.tolist()) != list(range(p.size)):
                raise ParameterError("permutation must be a bijection on pixel indices")
        if self.kind == "rotated":
            if self.angle is None or not 0.0 <= self.angle < np.pi:
                raise ParameterError(f"angle must lie in [0, pi), got {self.angle}")


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as probe:
        head = probe.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be_u32(f, path: Path, what: str) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise IdxParseError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", data)[0]


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse the standard big-endian IDX pair; pixels are scaled by 1/255.

    Counts in the two files are cross-checked; any malformed header fails
    closed with no partial dataset.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gzip(images_path) as f:
        magic = _read_be_u32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxParseError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        n = _read_be_u32(f, images_path, "image count")
        rows = _read_be_u32(f, images_path, "row count")
        cols = _read_be_u32(f, images_path, "column count")
        raw = f.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise IdxParseError(
                f"{images_path}: truncated pixel data at offset {16 + len(raw)}: "
                f"expected {n * rows * cols} bytes, found {len(raw)}"
            )
        pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    with _open_maybe_gzip(labels_path) as f:
        magic = _read_be_u32(f, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxParseError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        n_labels = _read_be_u32(f, labels_path, "label count")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise IdxParseError(
                f"{labels_path}: truncated label data at offset {8 + len(raw)}: "
                f"expected {n_labels} bytes, found {len(raw)}"
            )
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise IdxParseError(
            f"count mismatch: {images_path} has {n} images, {labels_path} has {n_labels} labels"
        )
    if rows != cols:
        raise IdxParseError(f"{images_path}: non-square images {rows}x{cols} unsupported")
    return Dataset(pixels.reshape(n, rows * cols), labels, side=rows)


def _task_rng(master_seed: int, task_id: int) -> np.random.Generator:
    # documented derivation: child seed = hash of (master_seed, TASK tag, task_id)
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(_TASK_KEY, task_id))
    )


def rotate_images(images: np.ndarray, angle: float, side: int) -> np.ndarray:
    """Rotate counter-clockwise about the grid center by inverse mapping with
    bilinear interpolation; points sampled outside the grid read as zero.
    Angle 0 is an exact identity."""
    if angle == 0.0:
        return images.copy()
    n = images.shape[0]
    center = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    xd = cc.reshape(-1) - center
    yd = center - rr.reshape(-1)  # y axis points up
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    xs = cos_t * xd + sin_t * yd
    ys = -sin_t * xd + cos_t * yd
    col_s = xs + center
    row_s = center - ys
    r0 = np.floor(row_s).astype(np.int64)
    c0 = np.floor(col_s).astype(np.int64)
    fr = row_s - r0
    fc = col_s - c0
    out = np.zeros((n, side * side), dtype=images.dtype)
    for dr, dc, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        r, c = r0 + dr, c0 + dc
        valid = (r >= 0) & (r < side) & (c >= 0) & (c < side)
        idx = np.clip(r, 0, side - 1) * side + np.clip(c, 0, side - 1)
        out += (w * valid) * images[:, idx]
    return out


def apply_task_spec(spec: TaskSpec, base: Dataset) -> Dataset:
    """Apply a task's fixed transform to any split of the base data."""
    if spec.kind == "identity":
        images = base.images.copy()
    elif spec.kind == "permuted":
        images = base.images[:, spec.permutation].copy()
    else:
        # clip: bilinear blends of [0,1] values can round a hair outside
        images = np.clip(rotate_images(base.images, spec.angle, base.side), 0.0, 1.0)
    return Dataset(images, base.labels.copy(), base.split, base.side)


def make_permutation_task(base: Dataset, seed: int, task_id: int = 0) -> tuple[TaskSpec, Dataset]:
    """One seeded pixel shuffle applied to every image; labels unchanged."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(base.side * base.side)
    spec = TaskSpec(task_id=task_id, kind="permuted", seed=seed, permutation=perm)
    return spec, apply_task_spec(spec, base)


def make_rotation_task(
    base: Dataset, seed: int | None = None, angle: float | None = None, task_id: int = 0
) -> tuple[TaskSpec, Dataset]:
    """Rotation by a seeded angle drawn uniformly on [0, pi), or an explicit one."""
    if angle is None:
        if seed is None:
            raise ParameterError("make_rotation_task needs a seed or an explicit angle")
        angle = float(np.random.default_rng(seed).uniform(0.0, np.pi))
    spec = TaskSpec(task_id=task_id, kind="rotated", seed=seed if seed is not None else 0,
                    angle=angle)
    return spec, apply_task_spec(spec, base)


@dataclass(frozen=True)
class ToyConfig:
    """Shrinks the base data for fast runs: subset rows, optionally average-pool
    images down to half resolution. Not a benchmark configuration."""

    max_images: int | None = None
    downsample: bool = False


def shrink_dataset(base: Dataset, toy: ToyConfig, master_seed: int) -> Dataset:
    out = base
    if toy.max_images is not None and toy.max_images < len(base):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=master_seed, spawn_key=(_SUBSET_KEY,))
        )
        picks = rng.choice(len(base), size=toy.max_images, replace=False)
        out = base.take(np.sort(picks))
    if toy.downsample:
        side = out.side
        if side % 2:
            raise ParameterError(f"cannot halve odd image side {side}")
        imgs = out.images.reshape(-1, side // 2, 2, side // 2, 2).mean(axis=(2, 4))
        out = Dataset(imgs.reshape(len(out), -1), out.labels.copy(), out.split, side // 2)
    return out


def make_task_specs(kind: str, n_tasks: int, master_seed: int, side: int = 28) -> list[TaskSpec]:
    if n_tasks < 1:
        raise ParameterError("n_tasks must be >= 1")
    specs = []
    for task_id in range(n_tasks):
        rng = _task_rng(master_seed, task_id)
        if kind == "permuted":
            perm = rng.permutation(side * side)
            specs.append(TaskSpec(task_id, "permuted", master_seed, permutation=perm))
        elif kind == "rotated":
            angle = float(rng.uniform(0.0, np.pi))
            specs.append(TaskSpec(task_id, "rotated", master_seed, angle=angle))
        elif kind == "identity":
            specs.append(TaskSpec(task_id, "identity", master_seed))
        else:
            raise ParameterError(f"unknown task kind {kind!r}")
    return specs


def make_task_stream(
    kind: str,
    n_tasks: int,
    master_seed: int,
    base: Dataset,
    toy: ToyConfig | None = None,
) -> list[tuple[TaskSpec, Dataset]]:
    """n_tasks independent tasks over one base split, seeds derived per task."""
    if toy is not None:
        base = shrink_dataset(base, toy, master_seed)
    specs = make_task_specs(kind, n_tasks, master_seed, base.side)
    return [(spec, apply_task_spec(spec, base)) for spec in specs]


class TaskStream:
    """Train/test pairs for a spec list, materialized lazily per task.

    Keeps at most one transformed copy per (task, split) in a small cache so
    paper-scale runs do not hold every task's 60k-image matrix at once.
    """

    def __init__(self, specs: list[TaskSpec], train_base: Dataset, test_base: Dataset,
                 cache_size: int = 4):
        self.specs = specs
        self._train_base = train_base
        self._test_base = test_base
        self._cache: dict[tuple[int, str], Dataset] = {}
        self._cache_size = cache_size

    def __len__(self) -> int:
        return len(self.specs)

    def _get(self, task_id: int, split: str) -> Dataset:
        key = (task_id, split)
        if key not in self._cache:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            base = self._train_base if split == "train" else self._test_base
            self._cache[key] = apply_task_spec(self.specs[task_id], base)
        return self._cache[key]

    def train(self, task_id: int) -> Dataset:
        return self._get(task_id, "train")

    def test(self, task_id: int) -> Dataset:
        return self._get(task_id, "test")
