"""Reconstruction network (unrolled data-consistency cascades) and downstream nets."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .kspace import ComplexImage, SamplingMask, dc_gradient
from .tensor import Tensor, ShapeError, NonFiniteError

REG_CHANNELS = 8


class Module:
    """Ordered collection of named parameter tensors."""

    kind = "module"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen = False

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def _add(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=not self.frozen)


def _uniform_fan_in(rng, shape, gain=1.0, dtype=np.float64):
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ReconNet(Module):
    """``C`` cascades of ``x <- x - eta_c * A^H(Ax - k0) - CNN_c(x)``.

    Each regularizer CNN is conv3×3(1→8) → relu → conv3×3(8→1).
    """

    kind = "recon"

    def __init__(self, cascades: int = 3, channels: int = REG_CHANNELS, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.cascades = cascades
        rng = np.random.default_rng([seed, 101])
        for c in range(cascades):
            self._add(f"c{c}.conv1.w", _uniform_fan_in(rng, (channels, 1, 3, 3), dtype=dtype))
            self._add(f"c{c}.conv1.b", np.zeros(channels, dtype=dtype))
            # small output layer so an untrained net starts close to plain DC steps
            self._add(f"c{c}.conv2.w", _uniform_fan_in(rng, (1, channels, 3, 3), gain=0.1, dtype=dtype))
            self._add(f"c{c}.conv2.b", np.zeros(1, dtype=dtype))
            self._add(f"c{c}.eta", np.ones(1, dtype=dtype))

    def forward(self, x0: Tensor, k0: ComplexImage, mask: SamplingMask) -> Tensor:
        if x0.shape != k0.shape:
            raise ShapeError(f"recon_forward: image {x0.shape} vs k-space {k0.shape}")
        if x0.shape[-1] != mask.width:
            raise ShapeError(f"recon_forward: image width {x0.shape[-1]} vs mask width {mask.width}")
        p = self.params
        x = x0
        for c in range(self.cascades):
            dc = dc_gradient(x, k0, mask)
            h = T.relu(T.conv2d(x, p[f"c{c}.conv1.w"], p[f"c{c}.conv1.b"]))
            reg = T.conv2d(h, p[f"c{c}.conv2.w"], p[f"c{c}.conv2.b"])
            x = x - T.scalar_mul(dc, p[f"c{c}.eta"]) - reg
        return x

    __call__ = forward


class SegmentationNet(Module):
    """Two-level encoder-decoder with one skip connection, 8→16 channels."""

    kind = "segmentation"

    def __init__(self, seed: int = 0, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng([seed, 202])
        shapes = {
            "enc1": (8, 1, 3, 3),
            "enc2": (16, 8, 3, 3),
            "dec1": (8, 24, 3, 3),
            "head": (1, 8, 1, 1),
        }
        for name, shape in shapes.items():
            self._add(f"{name}.w", _uniform_fan_in(rng, shape, dtype=dtype))
            self._add(f"{name}.b", np.zeros(shape[0], dtype=dtype))

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != 1:
            raise ShapeError(f"segmentation net expects N×1×H×W input, got {img.shape}")
        p = self.params
        e1 = T.relu(T.conv2d(img, p["enc1.w"], p["enc1.b"]))
        e2 = T.relu(T.conv2d(T.avg_pool2d(e1), p["enc2.w"], p["enc2.b"]))
        d1 = T.relu(T.conv2d(T.concat_channels(T.upsample2x(e2), e1), p["dec1.w"], p["dec1.b"]))
        return T.conv2d(d1, p["head.w"], p["head.b"])

    __call__ = forward


class ClassificationNet(Module):
    """Three conv+pool blocks (8/16/32), global average pool, dense → 1 logit."""

    kind = "classification"

    def __init__(self, seed: int = 0, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng([seed, 303])
        cin = 1
        for i, cout in enumerate((8, 16, 32)):
            self._add(f"block{i}.w", _uniform_fan_in(rng, (cout, cin, 3, 3), dtype=dtype))
            self._add(f"block{i}.b", np.zeros(cout, dtype=dtype))
            cin = cout
        bound = np.sqrt(1.0 / 32)
        self._add("dense.w", rng.uniform(-bound, bound, size=(32, 1)).astype(dtype))
        self._add("dense.b", np.zeros(1, dtype=dtype))

    def forward(self, img: Tensor) -> Tensor:
        if img.ndim != 4 or img.shape[1] != 1:
            raise ShapeError(f"classification net expects N×1×H×W input, got {img.shape}")
        p = self.params
        h = img
        for i in range(3):
            h = T.avg_pool2d(T.relu(T.conv2d(h, p[f"block{i}.w"], p[f"block{i}.b"])))
        pooled = T.reduce_mean(h, axis=(2, 3))
        return T.bias_add(pooled @ p["dense.w"], p["dense.b"])

    __call__ = forward


DownstreamNet = SegmentationNet | ClassificationNet


def init_model(kind: str, seed: int = 0, cascades: int = 3, dtype=np.float64) -> Module:
    if kind == "recon":
        return ReconNet(cascades=cascades, seed=seed, dtype=dtype)
    if kind == "segmentation":
        return SegmentationNet(seed=seed, dtype=dtype)
    if kind == "classification":
        return ClassificationNet(seed=seed, dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def recon_forward(net: ReconNet, x0, k0, mask: SamplingMask) -> Tensor:
    """``f_R(x0; θ)`` for batched N×1×H×W inputs (numpy or Tensor)."""
    if not isinstance(x0, Tensor):
        x0 = Tensor(x0)
    if not isinstance(k0, ComplexImage):
        k0 = ComplexImage.from_numpy(np.asarray(k0), dtype=x0.dtype)
    try:
        return net.forward(x0, k0, mask)
    except NonFiniteError as exc:
        raise NonFiniteError(f"recon_forward: non-finite intermediate ({exc})") from exc


def downstream_forward(net: Module, img) -> Tensor:
    if not isinstance(img, Tensor):
        img = Tensor(img)
    return net.forward(img)
