"""Single-coil Cartesian forward model ``A = M ∘ F`` and its adjoint.

k-space is kept centred (DC at ``(H/2, W/2)``) and the DFT is unitary, so the
adjoint of the forward transform is exactly the inverse transform. The mask
selects phase-encode columns (last axis).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError, centered_fft2


@dataclass
class ComplexImage:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"ComplexImage: real {self.re.shape} vs imaginary {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    @classmethod
    def from_numpy(cls, z: np.ndarray, dtype=None) -> "ComplexImage":
        dtype = dtype or z.real.dtype
        return cls(Tensor(z.real.astype(dtype)), Tensor(z.imag.astype(dtype)))

    def to_numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


@dataclass(frozen=True)
class SamplingMask:
    columns: np.ndarray  # (W,) of 0/1
    acceleration: int
    center_columns: int

    @property
    def width(self) -> int:
        return self.columns.shape[0]

    def expand(self, shape, dtype=np.float64) -> np.ndarray:
        """Broadcast the column indicator to a full array of ``shape``."""
        if shape[-1] != self.width:
            raise ShapeError(f"mask width {self.width} does not match image width {shape[-1]}")
        return np.broadcast_to(self.columns.astype(dtype), shape).copy()


def _check_pow2(n, what):
    if n < 1 or n & (n - 1):
        raise ShapeError(f"{what} ({n}) is not a power of two")


def dft2(img: ComplexImage, direction: str = "forward") -> ComplexImage:
    """Unitary centred 2-D DFT over the last two axes; differentiable."""
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    inverse = direction == "inverse"
    ins = [img.re, img.im]
    return ComplexImage(
        T.apply_primitive("dft2", ins, inverse=inverse, part="re"),
        T.apply_primitive("dft2", ins, inverse=inverse, part="im"),
    )


def make_cartesian_mask(width: int, acceleration: int, center: int) -> SamplingMask:
    """Equispaced column mask with a fully sampled centre block.

    ``width // acceleration`` columns are sampled: ``center`` contiguous columns
    around ``width/2`` plus the rest spread evenly over the remaining columns.
    """
    if width < 1 or acceleration < 1 or center < 0:
        raise ValueError("width and acceleration must be positive, center non-negative")
    budget = width // acceleration
    if center > budget:
        raise ValueError(f"center={center} exceeds the sampling budget {budget} (W={width}, R={acceleration})")
    cols = np.zeros(width, dtype=np.int8)
    start = width // 2 - center // 2
    cols[start:start + center] = 1
    rest = np.flatnonzero(cols == 0)
    extra = budget - center
    if extra:
        picks = np.floor((np.arange(extra) + 0.5) * rest.size / extra).astype(int)
        cols[rest[picks]] = 1
    return SamplingMask(cols, acceleration, center)


def _mask_const(mask: SamplingMask, like: Tensor) -> Tensor:
    return Tensor(mask.expand(like.shape, like.dtype))


def forward_op(x: Tensor, mask: SamplingMask) -> ComplexImage:
    """``A x``: masked centred k-space of a real image."""
    if x.shape[-1] != mask.width:
        raise ShapeError(f"mask width {mask.width} does not match image width {x.shape[-1]}")
    m = _mask_const(mask, x)
    k_re = T.apply_primitive("dft2", [x], inverse=False, part="re")
    k_im = T.apply_primitive("dft2", [x], inverse=False, part="im")
    return ComplexImage(k_re * m, k_im * m)


def adjoint_op(k: ComplexImage, mask: SamplingMask) -> Tensor:
    """``A^H k``: real part of the unitary inverse DFT of masked k-space."""
    if k.shape[-1] != mask.width:
        raise ShapeError(f"mask width {mask.width} does not match k-space width {k.shape[-1]}")
    m = _mask_const(mask, k.re)
    return T.apply_primitive("dft2", [k.re * m, k.im * m], inverse=True, part="re")


def apply_forward_model(x, mask: SamplingMask, mode: str = "A"):
    """Dispatch to :func:`forward_op` (``mode='A'``) or :func:`adjoint_op` (``'A_adjoint'``)."""
    if mode == "A":
        return forward_op(x, mask)
    if mode == "A_adjoint":
        return adjoint_op(x, mask)
    raise ValueError(f"mode must be 'A' or 'A_adjoint', got {mode!r}")


def dc_gradient(x: Tensor, k0: ComplexImage, mask: SamplingMask) -> Tensor:
    """Data-consistency gradient ``A^H (A x - k0)``."""
    if x.shape != k0.shape:
        raise ShapeError(f"dc_gradient: image {x.shape} vs k-space {k0.shape}")
    ax = forward_op(x, mask)
    return adjoint_op(ComplexImage(ax.re - k0.re, ax.im - k0.im), mask)


# numpy fast paths for data synthesis (no tape)


def kspace_np(y: np.ndarray, mask: SamplingMask) -> np.ndarray:
    if y.shape[-1] != mask.width:
        raise ShapeError(f"mask width {mask.width} does not match image width {y.shape[-1]}")
    _check_pow2(y.shape[-1], "width")
    _check_pow2(y.shape[-2], "height")
    return centered_fft2(y.astype(np.complex128)) * mask.columns


def zero_filled_np(k: np.ndarray, mask: SamplingMask) -> np.ndarray:
    return centered_fft2(k * mask.columns, inverse=True).real
