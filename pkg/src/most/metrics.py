"""Losses and evaluation metrics: SSIM, binary cross-entropy, DICE, AUC, LM, FM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

SSIM_WINDOW = 7
K1, K2 = 0.01, 0.03


def _as_batch(t: Tensor) -> Tensor:
    if t.ndim == 2:
        return T.reshape(t, (1, 1) + t.shape)
    if t.ndim == 3:
        return T.reshape(t, (t.shape[0], 1) + t.shape[1:])
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"ssim expects H×W, N×H×W or N×1×H×W images, got {t.shape}")
    return t


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Mean SSIM of ``a`` against reference ``b`` with a 7×7 uniform window.

    The data range ``L`` is ``max(b)`` per image, treated as a constant. Only
    window positions fully inside the image contribute.
    """
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    a4, b4 = _as_batch(a), _as_batch(b)
    n = a4.shape[0]
    L = b4.data.reshape(n, -1).max(axis=1)
    if np.any(L <= 0):
        raise ValueError("ssim: data range max(reference) must be positive")

    dtype = a4.dtype

    def wmean(t):
        return T.box_mean(t, SSIM_WINDOW)

    mu_a, mu_b = wmean(a4), wmean(b4)
    e_aa = wmean(T.square(a4))
    e_bb = wmean(T.square(b4))
    e_ab = wmean(a4 * b4)
    mu_aa, mu_bb, mu_ab = T.square(mu_a), T.square(mu_b), mu_a * mu_b
    var_a, var_b, cov = e_aa - mu_aa, e_bb - mu_bb, e_ab - mu_ab

    shape = mu_a.shape
    c1 = Tensor(np.broadcast_to(((K1 * L) ** 2).reshape(n, 1, 1, 1), shape).astype(dtype))
    c2 = Tensor(np.broadcast_to(((K2 * L) ** 2).reshape(n, 1, 1, 1), shape).astype(dtype))
    num = (T.scalar_mul(mu_ab, 2.0) + c1) * (T.scalar_mul(cov, 2.0) + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return T.reduce_mean(num / den)


def ssim_loss(a: Tensor, b: Tensor) -> Tensor:
    return T.scalar_mul(ssim(a, b), -1.0) + Tensor(np.ones((), dtype=a.dtype))


def ssim_per_image(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM for each pair in an N×1×H×W batch (no tape)."""
    return np.array([ssim(Tensor(a[i:i + 1]), Tensor(b[i:i + 1])).item() for i in range(a.shape[0])])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy on logits, mean over all elements.

    Uses ``softplus(l) - z*l``, which is the stable form of
    ``-z log σ(l) - (1-z) log(1-σ(l))``.
    """
    z = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=logits.dtype)
    if z.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {z.shape}")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("cross_entropy: labels must be 0 or 1")
    zt = Tensor(z.astype(logits.dtype))
    return T.reduce_mean(T.softplus(logits) - zt * logits)


def soft_cross_entropy(logits: Tensor, target_logits: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Distillation distance between sigmoid outputs of ``logits`` and fixed ``target_logits``.

    Binary cross-entropy against the soft target minus the target's entropy,
    so the value is exactly zero when ``logits`` equals ``target_logits``.
    """
    tau = float(temperature)
    tl = np.asarray(target_logits, dtype=logits.dtype) / tau
    p = 1.0 / (1.0 + np.exp(-tl))
    scaled = T.scalar_mul(logits, 1.0 / tau)
    pt = Tensor(p)
    ref = Tensor(T._softplus(tl) - p * tl)
    return T.reduce_mean(T.softplus(scaled) - pt * scaled - ref)


def dice(pred_mask, label) -> float:
    """2|A∩B| / (|A|+|B|) for binary maps; 1.0 when both are empty."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(label).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"dice: shapes differ {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def dice_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-image DICE of sigmoid(logits) > 0.5 against labels (N×1×H×W)."""
    pred = logits > 0.0
    return float(np.mean([dice(pred[i], labels[i]) for i in range(pred.shape[0])]))


def auc(scores, labels) -> float:
    """Rank-based (Mann–Whitney) AUC; tied pairs count one half."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"auc: {s.size} scores vs {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("auc: labels must be 0 or 1")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc: both classes must be present")
    # average ranks handle ties exactly
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class MetricTrace:
    """Evaluations of one task, one per completed stage since it was learned."""

    task: str
    metric: str = ""
    entries: list[tuple[int, float]] = field(default_factory=list)

    def append(self, stage: int, value: float) -> None:
        if self.entries and stage <= self.entries[-1][0]:
            raise ValueError(f"stage indices must increase: {stage} after {self.entries[-1][0]}")
        if not np.isfinite(value):
            raise ValueError(f"non-finite metric value for {self.task} at stage {stage}")
        self.entries.append((int(stage), float(value)))

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.entries]

    def since(self, stage: int) -> "MetricTrace":
        return MetricTrace(self.task, self.metric, [(s, v) for s, v in self.entries if s >= stage])


def last_metric(trace: MetricTrace) -> float:
    if not trace.entries:
        raise ValueError(f"empty trace for task {trace.task!r}")
    return trace.entries[-1][1]


def forgetting_measure(trace: MetricTrace) -> float | None:
    """Best minus worst value along the trace; ``None`` with fewer than two entries."""
    vals = trace.values
    if len(vals) < 2:
        return None
    return max(vals) - min(vals)
