"""Shared raster utilities.

Images are plain numpy arrays: ``(H, W)`` float grayscale or ``(H, W, 3)``
float RGB, intensities in [0, 1].  Binary masks are ``(H, W)`` bool arrays.
Point/geometry helpers use (x, y) coordinates where x is the column index
and y is the row index; integer coordinates are pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


# ---------------------------------------------------------------------------
# buffers


def as_gray(img: np.ndarray) -> np.ndarray:
    """Validate a single-channel image and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty image")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def to_luminance(img: np.ndarray) -> np.ndarray:
    """Reduce an RGB image to luminance (0.299 R + 0.587 G + 0.114 B).

    Grayscale input is returned unchanged (as float64).
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return as_gray(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        w = np.asarray(LUMA_WEIGHTS)
        return arr @ w
    raise ValueError(f"expected (H,W) or (H,W,3) image, got shape {arr.shape}")


def resize(img: np.ndarray, shape: tuple[int, int], *, order: int = 1) -> np.ndarray:
    """Resample to ``shape`` (H, W); order=1 bilinear, order=0 nearest.

    Uses the pixel-center convention, edge values clamped.
    """
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError(f"invalid target shape {shape}")
    src = np.asarray(img, dtype=np.float64)
    if src.ndim == 3:
        return np.stack(
            [resize(src[..., c], shape, order=order) for c in range(src.shape[2])],
            axis=-1,
        )
    sh, sw = src.shape
    if (sh, sw) == (h, w):
        return src.copy()
    yy = (np.arange(h) + 0.5) * (sh / h) - 0.5
    xx = (np.arange(w) + 0.5) * (sw / w) - 0.5
    grid = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(src, grid, order=order, mode="nearest")


def resize_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of a binary mask (stays binary)."""
    return resize(mask.astype(np.float64), shape, order=0) > 0.5


# ---------------------------------------------------------------------------
# convolution


def convolve2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2D convolution with reflect padding.

    The kernel must have odd dimensions.
    """
    arr = as_gray(img)
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2D with odd dimensions, got {k.shape}")
    return ndimage.convolve(arr, k, mode="reflect")


def correlate2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2D cross-correlation with reflect padding (odd kernel)."""
    arr = as_gray(img)
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2D with odd dimensions, got {k.shape}")
    return ndimage.correlate(arr, k, mode="reflect")


# ---------------------------------------------------------------------------
# binary morphology


def structuring_element(radius: int, shape: str = "disk") -> np.ndarray:
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if shape == "square":
        return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    if shape == "disk":
        yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
        return yy * yy + xx * xx <= radius * radius
    raise ValueError(f"unknown structuring element shape {shape!r}")


def _as_mask(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {arr.shape}")
    return arr.astype(bool)


def erosion(mask: np.ndarray, radius: int, shape: str = "disk") -> np.ndarray:
    """Minkowski erosion; outside the frame counts as background."""
    el = structuring_element(radius, shape)
    return ndimage.binary_erosion(_as_mask(mask), structure=el, border_value=0)


def dilation(mask: np.ndarray, radius: int, shape: str = "disk") -> np.ndarray:
    """Minkowski dilation, cropped to the frame."""
    el = structuring_element(radius, shape)
    return ndimage.binary_dilation(_as_mask(mask), structure=el, border_value=0)


def opening(mask: np.ndarray, radius: int, shape: str = "disk") -> np.ndarray:
    return dilation(erosion(mask, radius, shape), radius, shape)


def closing(mask: np.ndarray, radius: int, shape: str = "disk") -> np.ndarray:
    return erosion(dilation(mask, radius, shape), radius, shape)


# ---------------------------------------------------------------------------
# connected components


@dataclass
class Component:
    """One connected region: ``pixels`` is an (N, 2) array of (row, col)."""

    label: int
    pixels: np.ndarray
    area: int


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[Component]:
    """Label connected regions of set pixels.

    Components are numbered 1.. in raster order of their first pixel.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    m = _as_mask(mask)
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(m, structure=structure)
    if n == 0:
        return []
    flat = labels.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    # first occurrence per label, scanning backwards so earlier indices win
    first[flat[nz[::-1]]] = nz[::-1]
    order = np.argsort(first[1:], kind="stable")
    out = []
    for new_label, old in enumerate(order + 1, start=1):
        pixels = np.argwhere(labels == old)
        out.append(Component(label=new_label, pixels=pixels, area=len(pixels)))
    return out


# ---------------------------------------------------------------------------
# convex hull and minimum bounding rectangle


def convex_hull(points) -> list[tuple[float, float]]:
    """Counter-clockwise convex hull (monotone chain), collinear points dropped.

    Degenerate inputs return fewer than 3 vertices: a single point for
    coincident input, the two extremes for collinear input.
    """
    pts = sorted({(float(x), float(y)) for x, y in np.asarray(points, dtype=float)})
    if not pts:
        raise ValueError("convex hull of empty point set")
    if len(pts) == 1:
        return pts
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    lower: list[tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    # collinear inputs collapse to [min, max] because <= pops interior points
    return lower[:-1] + upper[:-1]


@dataclass(frozen=True)
class RotatedRect:
    """Rotated rectangle: center (x, y), size (w, h), angle in [0, pi)."""

    center: tuple[float, float]
    size: tuple[float, float]
    angle: float

    @property
    def area(self) -> float:
        return self.size[0] * self.size[1]

    def corners(self) -> np.ndarray:
        """The 4 corners, ordered around the rectangle, as an (4, 2) array."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = np.array([c, s])
        v = np.array([-s, c])
        hw, hh = self.size[0] / 2.0, self.size[1] / 2.0
        ctr = np.asarray(self.center, dtype=float)
        return np.array(
            [ctr - hw * u - hh * v, ctr + hw * u - hh * v,
             ctr + hw * u + hh * v, ctr - hw * u + hh * v]
        )

    def aabb(self) -> tuple[float, float, float, float]:
        """Tight axis-aligned envelope as (x, y, w, h)."""
        cs = self.corners()
        x0, y0 = cs.min(axis=0)
        x1, y1 = cs.max(axis=0)
        return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def min_bounding_rectangle(points) -> RotatedRect:
    """Minimum-area enclosing rectangle via a caliper scan over hull edges.

    The optimal rectangle has one side collinear with a hull edge, so
    scanning edge directions is exact.  Degenerate inputs (single point or
    collinear set) yield zero-width/height rectangles.
    """
    hull = convex_hull(points)
    if len(hull) == 1:
        return RotatedRect(center=hull[0], size=(0.0, 0.0), angle=0.0)
    hp = np.asarray(hull, dtype=float)
    n = len(hp)
    best = None
    for i in range(n):
        dx, dy = hp[(i + 1) % n] - hp[i]
        norm = math.hypot(dx, dy)
        if norm == 0.0:
            continue
        ux, uy = dx / norm, dy / norm
        s = hp @ (ux, uy)
        t = hp @ (-uy, ux)
        w = s.max() - s.min()
        h = t.max() - t.min()
        area = w * h
        if best is None or area < best[0] - 1e-12:
            cs = (s.min() + s.max()) / 2.0
            ct = (t.min() + t.max()) / 2.0
            cx = cs * ux - ct * uy
            cy = cs * uy + ct * ux
            angle = math.atan2(uy, ux) % math.pi
            best = (area, RotatedRect(center=(cx, cy), size=(float(w), float(h)), angle=angle))
    assert best is not None
    return best[1]


# ---------------------------------------------------------------------------
# contour filling and polygon rasterization


def fill_closed_contour(contour: np.ndarray, close_radius: int = 3) -> np.ndarray:
    """Fill the interior of a (possibly slightly broken) contour.

    The contour is morphologically closed to bridge small gaps, then the
    background is flooded from the frame border: pixels the flood cannot
    reach are interior and get set.  An open contour that encloses nothing
    comes back as just its closed self.
    """
    m = _as_mask(contour)
    if not m.any():
        return m.copy()
    closed = closing(m, close_radius, "disk")
    return ndimage.binary_fill_holes(closed) | m


def rasterize_polygon(vertices, shape: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline fill of a polygon, sampled at integer pixel centers.

    Scanline crossings use the half-open rule (min-y inclusive, max-y
    exclusive) so shared vertices are counted once.
    """
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(vertices, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        return mask
    x1 = pts[:, 0]
    y1 = pts[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    keep = y1 != y2
    if not keep.any():
        return mask
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    row0 = max(0, int(math.ceil(min(y1.min(), y2.min()))))
    row1 = min(h - 1, int(math.floor(max(y1.max(), y2.max()))))
    if row0 > row1:
        return mask
    rows = np.arange(row0, row1 + 1, dtype=float)[:, None]
    lo = np.minimum(y1, y2)[None, :]
    hi = np.maximum(y1, y2)[None, :]
    hit = (rows >= lo) & (rows < hi)
    t = (rows - y1[None, :]) / (y2 - y1)[None, :]
    xs = np.where(hit, x1[None, :] + t * (x2 - x1)[None, :], np.inf)
    xs.sort(axis=1)
    counts = hit.sum(axis=1)
    for r in range(len(rows)):
        c = counts[r]
        for p in range(0, c - 1, 2):
            a, b = xs[r, p], xs[r, p + 1]
            j0 = max(0, int(math.ceil(a)))
            j1 = min(w - 1, int(math.ceil(b)) - 1)
            if j0 <= j1:
                mask[row0 + r, j0 : j1 + 1] = True
    return mask


def bbox_of_points(points) -> tuple[float, float, float, float]:
    """Tight axis-aligned (x, y, w, h) envelope of a point set."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise ValueError("bbox of empty point set")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


# ---------------------------------------------------------------------------
# image file I/O (8-bit PNG / PGM)


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PGM into a float image in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("P", "RGBA", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def write_image(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit grayscale or RGB."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    elif data.ndim == 3 and data.shape[2] == 3:
        Image.fromarray(data, mode="RGB").save(path)
    else:
        raise ValueError(f"cannot write image of shape {arr.shape}")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def write_mask(path, mask: np.ndarray) -> None:
    data = np.where(_as_mask(mask), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)
