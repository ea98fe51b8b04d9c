"""Synthetic stand-ins for the reconstruction and downstream datasets.

Each task kind draws an elliptical "head" with its own intensity profile so the
kinds differ in global statistics (a controllable domain gap). Segmentation
kinds add a labelled structure; classification kinds add a feature whose shape
depends on the binary label.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .kspace import SamplingMask, kspace_np, zero_filled_np


class TaskKind(str, enum.Enum):
    RECONSTRUCTION = "reconstruction"
    SEGMENTATION_A = "segmentation_A"
    SEGMENTATION_B = "segmentation_B"
    CLASSIFICATION_A = "classification_A"
    CLASSIFICATION_B = "classification_B"

    @property
    def is_segmentation(self) -> bool:
        return self in (TaskKind.SEGMENTATION_A, TaskKind.SEGMENTATION_B)

    @property
    def is_classification(self) -> bool:
        return self in (TaskKind.CLASSIFICATION_A, TaskKind.CLASSIFICATION_B)

    @property
    def produces_image(self) -> bool:
        """Segmentation and reconstruction outputs are images; classification is a scalar."""
        return not self.is_classification

    @property
    def metric(self) -> str:
        if self is TaskKind.RECONSTRUCTION:
            return "SSIM"
        return "DICE" if self.is_segmentation else "AUC"

    @property
    def short(self) -> str:
        return _SHORT[self]


_SHORT = {
    TaskKind.RECONSTRUCTION: "recon",
    TaskKind.SEGMENTATION_A: "seg_A",
    TaskKind.SEGMENTATION_B: "seg_B",
    TaskKind.CLASSIFICATION_A: "cls_A",
    TaskKind.CLASSIFICATION_B: "cls_B",
}


def parse_kind(name: str) -> TaskKind:
    for kind in TaskKind:
        if name in (kind.value, kind.short):
            return kind
    raise ValueError(f"unknown task kind {name!r}")


@dataclass
class Sample:
    x: np.ndarray  # aliased zero-filled image, H×W
    y: np.ndarray  # aliasing-free image, H×W in [0, 1]
    z: np.ndarray | float  # binary mask (H×W) or scalar label
    subject_id: int
    k: np.ndarray | None = None  # measured (masked) k-space, complex H×W


@dataclass
class TaskDataset:
    kind: TaskKind
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def all_samples(self) -> list[Sample]:
        return self.train + self.val + self.test


# per-kind intensity of the head and of the inner "tissue" region
_PROFILE = {
    TaskKind.RECONSTRUCTION: (0.60, 0.85),
    TaskKind.SEGMENTATION_A: (0.35, 0.45),
    TaskKind.SEGMENTATION_B: (0.68, 0.55),
    TaskKind.CLASSIFICATION_A: (0.25, 0.30),
    TaskKind.CLASSIFICATION_B: (1.00, 0.98),
}

_DEFAULT_FRACTIONS = (0.5, 0.25, 0.25)


def _ellipse(yy, xx, cy, cx, ay, ax, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _head(rng, size, kind):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 64.0
    cy = size / 2 + rng.uniform(-2, 2) * s
    cx = size / 2 + rng.uniform(-2, 2) * s
    ay = rng.uniform(24, 28) * s
    ax = rng.uniform(19, 23) * s
    ang = rng.uniform(-0.2, 0.2)
    outer = _ellipse(yy, xx, cy, cx, ay, ax, ang)
    inner = _ellipse(yy, xx, cy, cx, ay - 3 * s, ax - 3 * s, ang)
    skull, tissue = _PROFILE[kind]
    img = np.zeros((size, size))
    img[outer] = skull
    img[inner] = tissue
    # a few low-contrast structures so every image has texture to reconstruct
    for _ in range(rng.integers(2, 5)):
        r = rng.uniform(0.2, 0.6)
        by = cy + rng.uniform(-ay, ay) * r
        bx = cx + rng.uniform(-ax, ax) * r
        blob = _ellipse(yy, xx, by, bx, rng.uniform(2, 6) * s, rng.uniform(2, 6) * s, rng.uniform(0, np.pi))
        img[blob & inner] += rng.uniform(-0.15, 0.15)
    return img, inner, (yy, xx, cy, cx, ay, ax)


def _ribbons(rng, inner, geom, size):
    yy, xx, cy, cx, ay, ax = geom
    s = size / 64.0
    label = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(2, 4)):
        # sinusoidal band, thickness ~2 px
        amp = rng.uniform(2, 6) * s
        freq = rng.uniform(0.08, 0.2) / s
        phase = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(-0.5, 0.5) * ay
        if rng.random() < 0.5:
            centre = cy + off + amp * np.sin(freq * xx + phase)
            band = np.abs(yy - centre) <= 1.0 * s
        else:
            centre = cx + off * ax / ay + amp * np.sin(freq * yy + phase)
            band = np.abs(xx - centre) <= 1.0 * s
        label |= band
    label &= _ellipse(yy, xx, cy, cx, ay - 6 * s, ax - 6 * s)
    return label


def _render(kind: TaskKind, rng: np.random.Generator, size: int, z_label: int):
    img, inner, geom = _head(rng, size, kind)
    yy, xx, cy, cx, ay, ax = geom
    s = size / 64.0
    z: np.ndarray | float
    if kind is TaskKind.SEGMENTATION_A:
        label = _ribbons(rng, inner, geom, size)
        img[label] = _PROFILE[kind][1] + 0.35
        z = label.astype(np.float64)
    elif kind is TaskKind.SEGMENTATION_B:
        by = cy + rng.uniform(-0.45, 0.45) * ay
        bx = cx + rng.uniform(-0.45, 0.45) * ax
        label = _ellipse(yy, xx, by, bx, rng.uniform(6, 9) * s, rng.uniform(6, 9) * s, rng.uniform(0, np.pi))
        img[label] = _PROFILE[kind][1] + rng.uniform(0.3, 0.45)
        z = label.astype(np.float64)
    elif kind is TaskKind.CLASSIFICATION_A:
        # positive: a cluster of small bright foci; negative: none
        if z_label:
            by = cy + rng.uniform(-0.35, 0.35) * ay
            bx = cx + rng.uniform(-0.35, 0.35) * ax
            for _ in range(rng.integers(3, 6)):
                fy = by + rng.uniform(-6, 6) * s
                fx = bx + rng.uniform(-6, 6) * s
                r = rng.uniform(1.2, 2.0) * s
                img[((yy - fy) ** 2 + (xx - fx) ** 2 <= r * r) & inner] = _PROFILE[kind][1] + 0.45
        z = float(z_label)
    elif kind is TaskKind.CLASSIFICATION_B:
        # patch of fine vertical stripes (positive) or a flat patch of the same mean
        by = cy + rng.uniform(-0.3, 0.3) * ay
        bx = cx + rng.uniform(-0.3, 0.3) * ax
        half = rng.uniform(5, 8) * s
        patch = (np.abs(yy - by) <= half) & (np.abs(xx - bx) <= half) & inner
        base = _PROFILE[kind][1] - 0.3
        if z_label:
            period = rng.integers(2, 4)
            stripes = ((xx.astype(int) // period) % 2).astype(float)
            img[patch] = base - 0.2 + 0.4 * stripes[patch]
        else:
            img[patch] = base
        z = float(z_label)
    else:
        z = 0.0
    return np.clip(img, 0.0, 1.0), z


def _check_size(size):
    if size < 8 or size & (size - 1):
        raise ValueError(f"image size must be a power of two >= 8, got {size}")


def gen_task_dataset(
    kind: TaskKind,
    n: int,
    size: int = 64,
    seed: int = 0,
    fractions: tuple[float, float, float] = _DEFAULT_FRACTIONS,
) -> TaskDataset:
    """Generate ``n`` samples of ``kind`` and split them into train/val/test.

    ``x`` is left equal to ``y`` until :func:`undersample_dataset` is applied.
    """
    kind = TaskKind(kind)
    if n < 12:
        raise ValueError(f"need n >= 12 samples for train/val/test, got {n}")
    _check_size(size)
    ss = np.random.SeedSequence([seed, list(TaskKind).index(kind), size])
    rng = np.random.default_rng(ss)
    labels = np.zeros(n, dtype=int)
    if kind.is_classification:
        labels[: n // 2] = 1
        rng.shuffle(labels)
    samples = []
    for i in range(n):
        y, z = _render(kind, rng, size, labels[i])
        samples.append(Sample(x=y.copy(), y=y, z=z, subject_id=i))
    ds = TaskDataset(kind, train=samples)
    return split(ds, fractions, seed=seed)


def split(ds: TaskDataset, fractions=_DEFAULT_FRACTIONS, seed: int = 0) -> TaskDataset:
    """Re-partition all samples of ``ds`` by subject into train/val/test.

    Classification datasets are stratified by label.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr <= 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    samples = sorted(ds.all_samples(), key=lambda s: s.subject_id)
    n = len(samples)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} samples with {tuple(fractions)} leaves an empty partition")
    rng = np.random.default_rng([seed, 7919])
    if ds.kind.is_classification:
        # interleave the shuffled classes so every partition of two or more samples sees both labels
        pos = [i for i in rng.permutation(n) if samples[i].z >= 0.5]
        neg = [i for i in rng.permutation(n) if samples[i].z < 0.5]
        m = min(len(pos), len(neg))
        order = [i for pair in zip(pos[:m], neg[:m]) for i in pair] + pos[m:] + neg[m:]
    else:
        order = rng.permutation(n)
    picked = [samples[i] for i in order]
    return TaskDataset(
        ds.kind,
        train=picked[:n_train],
        val=picked[n_train:n_train + n_val],
        test=picked[n_train + n_val:],
    )


def undersample_dataset(ds: TaskDataset, mask: SamplingMask) -> TaskDataset:
    """Recompute every ``x`` (and measured ``k``) from ``y`` under ``mask``."""

    def redo(s: Sample) -> Sample:
        if s.y.shape[-1] != mask.width:
            raise ValueError(f"image width {s.y.shape[-1]} does not match mask width {mask.width}")
        k = kspace_np(s.y, mask)
        return replace(s, x=zero_filled_np(k, mask), k=k)

    return TaskDataset(
        ds.kind,
        train=[redo(s) for s in ds.train],
        val=[redo(s) for s in ds.val],
        test=[redo(s) for s in ds.test],
    )


def stack(samples: list[Sample], dtype=np.float64):
    """Batch arrays: x, y as N×1×H×W, k as complex N×1×H×W, z as N×1×H×W or N×1."""
    x = np.stack([s.x for s in samples])[:, None].astype(dtype)
    y = np.stack([s.y for s in samples])[:, None].astype(dtype)
    k = np.stack([s.k for s in samples])[:, None] if samples[0].k is not None else None
    z0 = samples[0].z
    if np.ndim(z0) == 2:
        z = np.stack([s.z for s in samples])[:, None].astype(dtype)
    else:
        z = np.asarray([[float(s.z)] for s in samples], dtype=dtype)
    return x, y, k, z
