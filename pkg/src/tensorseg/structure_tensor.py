"""Multi-orientation structure tensors and coherency analysis.

The conventional 2x2 structure tensor summarizes local gradient orientation
from the x/y gradients only.  The generalized form used here takes M
directional gradients at angles 2*pi*tau/M, forms the M(M+1)/2 unique
smoothed gradient products, ranks them by energy, and sums the top K into a
single coherent representation that highlights object transitions in any
orientation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import as_gray, convolve2d, correlate2d

# Sobel kernels scaled so a unit-slope ramp has gradient exactly 1.
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class GaussianSpec:
    """Smoothing window: ``sigma`` in pixels, truncated at ``radius``."""

    sigma: float = 1.0
    radius: int = 3

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")

    @classmethod
    def from_sigma(cls, sigma: float) -> "GaussianSpec":
        return cls(sigma=sigma, radius=max(1, math.ceil(3 * sigma)))


@dataclass
class GradientStack:
    """M directional gradients of one image at angles 2*pi*tau/M."""

    gradients: list[np.ndarray]
    angles: list[float]
    order: int


@dataclass
class StructureTensorField:
    """Per-pixel entries of the smoothed 2x2 gradient-product matrix."""

    jxx: np.ndarray
    jxy: np.ndarray
    jyy: np.ndarray


@dataclass
class TensorSet:
    """The M(M+1)/2 unique smoothed gradient products, one per (m, n) pair."""

    tensors: list[np.ndarray]
    pairs: list[tuple[int, int]]
    order: int


@dataclass
class CoherentRepresentation:
    """Min-max normalized sum of the K most energetic tensors."""

    values: np.ndarray
    selected_pairs: list[tuple[int, int]] = field(default_factory=list)
    k: int = 0


def gaussian_kernel(spec: GaussianSpec) -> np.ndarray:
    """(2r+1)^2 Gaussian window, normalized to sum exactly 1."""
    r = spec.radius
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g1 = np.exp(-(ax * ax) / (2.0 * spec.sigma * spec.sigma))
    k = np.outer(g1, g1)
    return k / k.sum()


def directional_gradient(img: np.ndarray, theta: float) -> np.ndarray:
    """Image gradient along direction ``theta``: cos(t)*dI/dx + sin(t)*dI/dy."""
    gx = correlate2d(img, SOBEL_X)
    gy = correlate2d(img, SOBEL_Y)
    return math.cos(theta) * gx + math.sin(theta) * gy


def gradient_stack(img: np.ndarray, m: int) -> GradientStack:
    """Gradients at the M evenly spaced orientations 2*pi*tau/M, tau=0..M-1."""
    if m < 1:
        raise ValueError(f"number of gradient orientations must be >= 1, got {m}")
    arr = as_gray(img)
    gx = correlate2d(arr, SOBEL_X)
    gy = correlate2d(arr, SOBEL_Y)
    angles = [2.0 * math.pi * tau / m for tau in range(m)]
    gradients = [math.cos(a) * gx + math.sin(a) * gy for a in angles]
    return GradientStack(gradients=gradients, angles=angles, order=m)


def conventional_structure_tensor(
    img: np.ndarray, spec: GaussianSpec = GaussianSpec()
) -> StructureTensorField:
    """Smoothed outer products of the x/y gradients."""
    arr = as_gray(img)
    gx = correlate2d(arr, SOBEL_X)
    gy = correlate2d(arr, SOBEL_Y)
    k = gaussian_kernel(spec)
    return StructureTensorField(
        jxx=convolve2d(gx * gx, k),
        jxy=convolve2d(gx * gy, k),
        jyy=convolve2d(gy * gy, k),
    )


def coherency_map(field: StructureTensorField, eps: float = 1e-12) -> np.ndarray:
    """Squared eigenvalue contrast ((l1-l2)/(l1+l2))^2 of the tensor field.

    1 at a perfect one-directional edge, 0 in isotropic or flat regions.
    Pixels whose eigenvalue sum is at most ``eps`` are defined as 0.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    trace = field.jxx + field.jyy
    # l1 - l2 == 2 * sqrt(((jxx - jyy)/2)^2 + jxy^2) for a symmetric 2x2 matrix
    half_gap = np.sqrt(((field.jxx - field.jyy) / 2.0) ** 2 + field.jxy**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(trace > eps, (2.0 * half_gap) / np.where(trace > eps, trace, 1.0), 0.0)
    return np.clip(ratio * ratio, 0.0, 1.0)


def modified_tensor_set(
    stack: GradientStack, spec: GaussianSpec = GaussianSpec()
) -> TensorSet:
    """All unique smoothed products g_m * g_n, 0 <= m <= n < M.

    The full M x M product matrix is symmetric, so only the upper triangle
    is materialized.
    """
    k = gaussian_kernel(spec)
    tensors = []
    pairs = []
    for m in range(stack.order):
        for n in range(m, stack.order):
            tensors.append(convolve2d(stack.gradients[m] * stack.gradients[n], k))
            pairs.append((m, n))
    return TensorSet(tensors=tensors, pairs=pairs, order=stack.order)


def tensor_norms(tset: TensorSet) -> list[float]:
    """Frobenius norm (root sum of squared pixels) of each tensor image."""
    return [float(np.sqrt(np.sum(t * t))) for t in tset.tensors]


def _sig_round(x: float, digits: int = 12) -> float:
    """Round to ``digits`` significant digits (for stable norm grouping)."""
    if x == 0.0 or not math.isfinite(x):
        return x
    scale = 10.0 ** (digits - 1 - math.floor(math.log10(abs(x))))
    return round(x * scale) / scale


def select_coherent(tset: TensorSet, k: int) -> list[tuple[int, int]]:
    """Pairs of the k largest-norm tensors, collapsing sign-flipped copies.

    Antipodal gradient pairs (present whenever M is even) make several
    tensors equal up to sign: for M=4, g2 = -g0 so the products (0,0),
    (0,2) and (2,2) are one underlying image.  Ranking purely by norm would
    spend the whole selection budget on such copies (or worse, sum a tensor
    with its own negation and cancel to zero), so candidates that duplicate
    an already-selected tensor up to sign are passed over while distinct
    tensors remain.  Ordering is by norm (compared at 12 significant
    digits), then larger pixel sum, then smaller pair index; if every
    remaining candidate is a duplicate, the budget is filled in that same
    order, which keeps the all-equal case (e.g. all-zero tensors) on the
    plain lexicographic ranking.
    """
    n = len(tset.tensors)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    norms = tensor_norms(tset)
    sums = [float(t.sum()) for t in tset.tensors]
    order = sorted(
        range(n),
        key=lambda i: (-_sig_round(norms[i]), -_sig_round(sums[i]), tset.pairs[i]),
    )

    def duplicates(i: int, j: int) -> bool:
        tol = 1e-9 * max(norms[i], norms[j], 1e-300)
        diff = tset.tensors[i] - tset.tensors[j]
        if float(np.sqrt(np.sum(diff * diff))) <= tol:
            return True
        anti = tset.tensors[i] + tset.tensors[j]
        return float(np.sqrt(np.sum(anti * anti))) <= tol

    chosen: list[int] = []
    skipped: list[int] = []
    for i in order:
        if len(chosen) == k:
            break
        if any(duplicates(i, j) for j in chosen):
            skipped.append(i)
        else:
            chosen.append(i)
    for i in skipped:
        if len(chosen) == k:
            break
        chosen.append(i)
    return [tset.pairs[i] for i in chosen]


def coherent_representation(tset: TensorSet, k: int) -> CoherentRepresentation:
    """Sum of the k most energetic tensors, min-max normalized to [0, 1].

    A constant sum (e.g. from a constant input image) maps to all zeros.
    """
    selected = select_coherent(tset, k)
    index = {pair: i for i, pair in enumerate(tset.pairs)}
    total = np.zeros_like(tset.tensors[0])
    for pair in selected:
        total = total + tset.tensors[index[pair]]
    lo = total.min()
    rng = total.max() - lo
    if rng <= 0:
        values = np.zeros_like(total)
    else:
        values = (total - lo) / rng
    return CoherentRepresentation(values=values, selected_pairs=selected, k=k)
