"""Hand-crafted smoothing baselines over the T x C feature plane.

All three filters use a square ``window`` and replicate the border values.
Mean and Gaussian filters are separable and linear, so they are also offered as
differentiable stages (``T``-side and ``C``-side band matrices).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import numcore as nc

KINDS = ("gaussian", "median", "mean")


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "gaussian"
    window: int = 3
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}; expected one of {KINDS}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"filter window must be a positive odd integer, got {self.window}")
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError(f"sigma must be finite and positive, got {self.sigma}")

    @property
    def name(self) -> str:
        return self.kind

    @property
    def differentiable(self) -> bool:
        return self.kind != "median"


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = np.arange(window, dtype=np.float64) - window // 2
    w = np.exp(-0.5 * (k / sigma) ** 2)
    w /= w.sum()
    return 0.5 * (w + w[::-1])  # exact symmetry


def _kernel(spec: FilterSpec) -> np.ndarray:
    if spec.kind == "gaussian":
        return gaussian_kernel(spec.window, spec.sigma)
    return np.full(spec.window, 1.0 / spec.window)


def _check(spec: FilterSpec, x: np.ndarray) -> None:
    if x.ndim != 2:
        raise ValueError(f"expected a T x C matrix, got shape {x.shape}")
    if spec.window > 2 * min(x.shape) - 1:
        raise ValueError(f"window {spec.window} too large for a {x.shape[0]}x{x.shape[1]} input")


def apply_filter(spec: FilterSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check(spec, x)
    if spec.window == 1:
        return x.copy()
    if spec.kind == "median":
        return ndimage.median_filter(x, size=spec.window, mode="nearest")
    k = _kernel(spec)
    return _smooth_axis(_smooth_axis(x, k, 0), k, 1)


def _smooth_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Replicate-edge correlation written as x + sum_k w_k (x_shifted - x).

    Same linear map as a plain correlation up to rounding, but the neighbour
    differences vanish exactly on constant input, so constants survive
    bit-for-bit even though the kernel sums to 1 only within an ulp.
    """
    half = len(kernel) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (half, half)
    xp = np.pad(x, pad, mode="edge")
    n = x.shape[axis]
    acc = np.zeros_like(x)
    for o, w in enumerate(kernel):
        acc += w * (np.take(xp, np.arange(o, o + n), axis=axis) - x)
    return x + acc


def smoothing_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    """n x n matrix M with (M @ v) = replicate-edge correlation of v with ``kernel``."""
    half = len(kernel) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for o, w in enumerate(kernel):
            j = min(max(i + o - half, 0), n - 1)
            m[i, j] += w
    return m


class LinearFilterStage:
    """Differentiable mean/Gaussian filter: y = A_T @ x @ A_C^T."""

    def __init__(self, spec: FilterSpec, T: int, C: int):
        if not spec.differentiable:
            raise ValueError(f"{spec.kind} filter is not differentiable")
        k = _kernel(spec)
        self.spec = spec
        self.name = spec.kind
        self.time_mat = nc.Tensor(smoothing_matrix(T, k))
        self.chan_mat_t = nc.Tensor(smoothing_matrix(C, k).T)

    def __call__(self, x: nc.Tensor) -> nc.Tensor:
        return nc.matmul(nc.matmul(self.time_mat, x), self.chan_mat_t)


class FilterStage:
    """Non-differentiable wrapper applying ``apply_filter`` to a batch of utterances."""

    differentiable = False

    def __init__(self, spec: FilterSpec):
        self.spec = spec
        self.name = spec.kind

    def __call__(self, x):
        arr = x.data if isinstance(x, nc.Tensor) else np.asarray(x)
        if arr.ndim == 2:
            return nc.Tensor(apply_filter(self.spec, arr))
        return nc.Tensor(np.stack([apply_filter(self.spec, a) for a in arr]))
