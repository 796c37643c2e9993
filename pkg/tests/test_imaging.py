import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorseg.imaging import (
    closing,
    connected_components,
    convex_hull,
    convolve2d,
    dilation,
    erosion,
    fill_closed_contour,
    min_bounding_rectangle,
    opening,
    rasterize_polygon,
    read_image,
    read_mask,
    resize,
    resize_mask,
    to_luminance,
    write_image,
    write_mask,
)


# ---------------------------------------------------------------------------
# convolution


def test_convolve_identity_kernel():
    rng = np.random.default_rng(0)
    img = rng.random((12, 17))
    kernel = np.zeros((3, 3))
    kernel[1, 1] = 1.0
    assert np.allclose(convolve2d(img, kernel), img)


def test_convolve_box_on_constant():
    img = np.full((9, 9), 0.37)
    out = convolve2d(img, np.full((3, 3), 1.0 / 9.0))
    assert np.allclose(out, 0.37)


def test_convolve_impulse_reproduces_kernel():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    ax = np.arange(-3, 4)
    g = np.exp(-np.add.outer(ax**2, ax**2) / 2.0)
    g /= g.sum()
    out = convolve2d(img, g)
    assert np.allclose(out[4:11, 4:11], g, atol=1e-15)


def test_convolve_rejects_even_kernel():
    with pytest.raises(ValueError):
        convolve2d(np.zeros((5, 5)), np.ones((2, 3)))


def test_convolve_linearity():
    rng = np.random.default_rng(1)
    a, b = 1.7, -0.4
    i1, i2 = rng.random((10, 10)), rng.random((10, 10))
    k = rng.random((5, 5))
    lhs = convolve2d(a * i1 + b * i2, k)
    rhs = a * convolve2d(i1, k) + b * convolve2d(i2, k)
    assert np.abs(lhs - rhs).max() < 1e-9


# ---------------------------------------------------------------------------
# morphology


def test_erosion_all_ones_square():
    mask = np.ones((7, 9), dtype=bool)
    out = erosion(mask, 1, "square")
    expected = np.zeros_like(mask)
    expected[1:-1, 1:-1] = True
    assert np.array_equal(out, expected)


def test_opening_removes_isolated_pixel():
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 4] = True
    assert not opening(mask, 1, "square").any()
    assert not opening(mask, 1, "disk").any()


def test_closing_seals_crack():
    # 20x20 solid square with a one-pixel vertical crack
    mask = np.zeros((28, 28), dtype=bool)
    mask[4:24, 4:24] = True
    mask[4:24, 13] = False
    solid = np.zeros_like(mask)
    solid[4:24, 4:24] = True
    assert np.array_equal(closing(mask, 2, "square"), solid)
    # a disk cannot reach into the 1-px notch where the crack meets the
    # square's boundary, but it must seal the whole crack interior
    by_disk = closing(mask, 2, "disk")
    assert np.array_equal(by_disk[5:23], solid[5:23])
    assert int((solid & ~by_disk).sum()) <= 2


def test_morphological_duality():
    # exact set duality holds away from the frame border, so embed the mask
    # inside a background margin at least as wide as the radius
    rng = np.random.default_rng(2)
    for radius, shape in [(1, "square"), (2, "disk"), (3, "disk")]:
        mask = np.zeros((24, 24), dtype=bool)
        mask[radius:-radius, radius:-radius] = rng.random((24 - 2 * radius,) * 2) < 0.45
        lhs = erosion(mask, radius, shape)
        rhs = ~dilation(~mask, radius, shape)
        assert np.array_equal(lhs[radius:-radius, radius:-radius],
                              rhs[radius:-radius, radius:-radius])


def test_open_close_idempotent():
    rng = np.random.default_rng(3)
    mask = rng.random((30, 30)) < 0.5
    for op in (opening, closing):
        once = op(mask, 2, "disk")
        assert np.array_equal(op(once, 2, "disk"), once)


def test_morphology_rejects_bad_radius():
    with pytest.raises(ValueError):
        erosion(np.ones((4, 4), dtype=bool), 0)


# ---------------------------------------------------------------------------
# connected components


def test_components_empty():
    assert connected_components(np.zeros((5, 5), dtype=bool)) == []


def test_components_two_squares():
    mask = np.zeros((12, 12), dtype=bool)
    mask[1:4, 1:4] = True
    mask[7:10, 7:10] = True
    comps = connected_components(mask)
    assert [c.area for c in comps] == [9, 9]
    assert [c.label for c in comps] == [1, 2]
    # raster order: component containing (1,1) first
    assert tuple(comps[0].pixels[0]) == (1, 1)


def test_components_connectivity_semantics():
    mask = np.zeros((6, 6), dtype=bool)
    for i in range(5):
        mask[i, i] = True
    assert len(connected_components(mask, connectivity=8)) == 1
    assert len(connected_components(mask, connectivity=4)) == 5


def test_components_areas_sum_to_population():
    rng = np.random.default_rng(4)
    mask = rng.random((20, 20)) < 0.4
    comps = connected_components(mask)
    assert sum(c.area for c in comps) == int(mask.sum())


# ---------------------------------------------------------------------------
# convex hull


def test_hull_square_with_center():
    pts = [(0, 0), (2, 0), (2, 2), (0, 2), (1, 1)]
    hull = convex_hull(pts)
    assert sorted(hull) == [(0.0, 0.0), (0.0, 2.0), (2.0, 0.0), (2.0, 2.0)]


def test_hull_collinear():
    pts = [(0, 0), (1, 1), (2, 2), (3, 3)]
    assert sorted(convex_hull(pts)) == [(0.0, 0.0), (3.0, 3.0)]


def test_hull_empty_raises():
    with pytest.raises(ValueError):
        convex_hull([])


@settings(max_examples=80, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-50, 50, allow_nan=False), st.floats(-50, 50, allow_nan=False)
        ),
        min_size=1,
        max_size=100,
    )
)
def test_hull_contains_all_points(pts):
    hull = convex_hull(pts)
    if len(hull) < 3:
        return
    n = len(hull)
    for x, y in pts:
        for i in range(n):
            ax, ay = hull[i]
            bx, by = hull[(i + 1) % n]
            cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
            assert cross >= -1e-7 * max(1.0, abs(cross))


# ---------------------------------------------------------------------------
# minimum bounding rectangle


def brute_force_min_area(pts, n_angles=3600):
    """Oracle: smallest axis-aligned bounding area over a dense rotation scan."""
    pts = np.asarray(pts, dtype=float)
    best = np.inf
    for theta in np.linspace(0.0, math.pi / 2.0, n_angles, endpoint=False):
        c, s = math.cos(theta), math.sin(theta)
        xs = pts @ (c, s)
        ys = pts @ (-s, c)
        best = min(best, (xs.max() - xs.min()) * (ys.max() - ys.min()))
    return best


def test_mbr_axis_aligned_square():
    rect = min_bounding_rectangle([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert rect.area == pytest.approx(1.0)
    assert sorted(rect.size) == pytest.approx([1.0, 1.0])
    assert rect.angle % (math.pi / 2) == pytest.approx(0.0, abs=1e-12)


def test_mbr_rotated_square_beats_aabb():
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    pts = [(c * x - s * y, s * x + c * y) for x, y in [(0, 0), (1, 0), (1, 1), (0, 1)]]
    rect = min_bounding_rectangle(pts)
    assert rect.area == pytest.approx(1.0, abs=1e-9)
    assert rect.area <= brute_force_min_area(pts) + 1e-3


def test_mbr_single_point():
    rect = min_bounding_rectangle([(3.5, -2.0)])
    assert rect.area == 0.0
    assert rect.center == (3.5, -2.0)


def test_mbr_corners_roundtrip():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(10, 2)) * 7
    rect = min_bounding_rectangle(pts)
    again = min_bounding_rectangle(rect.corners())
    assert again.area == pytest.approx(rect.area, abs=1e-6)
    assert np.allclose(sorted(again.size), sorted(rect.size), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-30, 30, allow_nan=False), st.floats(-30, 30, allow_nan=False)
        ),
        min_size=3,
        max_size=12,
    )
)
def test_mbr_optimal_and_contains(pts):
    rect = min_bounding_rectangle(pts)
    assert rect.area <= brute_force_min_area(pts, n_angles=720) + 1e-6
    c, s = math.cos(rect.angle), math.sin(rect.angle)
    ctr = np.asarray(rect.center)
    rel = np.asarray(pts, dtype=float) - ctr
    u = rel @ (c, s)
    v = rel @ (-s, c)
    assert np.all(np.abs(u) <= rect.size[0] / 2 + 1e-6)
    assert np.all(np.abs(v) <= rect.size[1] / 2 + 1e-6)


# ---------------------------------------------------------------------------
# contour filling


def disk_mask(shape, center, r_out, r_in=None):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    mask = d2 <= r_out**2
    if r_in is not None:
        mask &= d2 > r_in**2
    return mask


def test_fill_ring_gives_disk():
    ring = disk_mask((40, 40), (20, 20), 10, 9)
    filled = fill_closed_contour(ring)
    assert abs(filled.sum() - math.pi * 100) / (math.pi * 100) < 0.05


def test_fill_solid_square_unchanged():
    mask = np.zeros((30, 30), dtype=bool)
    mask[8:22, 8:22] = True
    assert np.array_equal(fill_closed_contour(mask), mask)


def test_fill_open_arc_creates_no_interior():
    yy, xx = np.mgrid[:48, :48]
    d2 = (yy - 24) ** 2 + (xx - 24) ** 2
    arc = (d2 <= 15**2) & (d2 > 14**2) & (xx > 24)  # half ring
    out = fill_closed_contour(arc)
    assert out.sum() < 2 * arc.sum()


# ---------------------------------------------------------------------------
# polygon rasterization


def test_rasterize_rectangle_area():
    w, h = 11, 7
    poly = [(5, 5), (5 + w, 5), (5 + w, 5 + h), (5, 5 + h)]
    mask = rasterize_polygon(poly, (24, 24))
    assert abs(int(mask.sum()) - w * h) <= 2 * (w + h)


def test_rasterize_triangle_inside_only():
    mask = rasterize_polygon([(1, 1), (9, 1), (1, 9)], (12, 12))
    assert mask[2, 2]
    assert not mask[9, 9]


def test_rasterize_degenerate_is_empty():
    assert not rasterize_polygon([(1, 1), (2, 2)], (5, 5)).any()


# ---------------------------------------------------------------------------
# resize and I/O


def test_resize_preserves_constant():
    img = np.full((16, 16), 0.42)
    assert np.allclose(resize(img, (8, 8)), 0.42)
    assert np.allclose(resize(img, (32, 32)), 0.42)


def test_resize_mask_stays_binary():
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:12, 4:12] = True
    out = resize_mask(mask, (32, 32))
    assert out.dtype == bool
    assert abs(out.sum() - 4 * mask.sum()) < 0.3 * 4 * mask.sum()


def test_to_luminance_weights():
    img = np.zeros((2, 2, 3))
    img[..., 0] = 1.0
    assert np.allclose(to_luminance(img), 0.299)
    gray = np.full((3, 3), 0.5)
    assert np.allclose(to_luminance(gray), 0.5)


def test_image_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    img = np.round(rng.random((9, 13)) * 255) / 255
    for name in ("a.png", "a.pgm"):
        path = tmp_path / name
        write_image(path, img)
        back = read_image(path)
        assert np.allclose(back, img, atol=1 / 255 + 1e-9)
    rgb = np.round(rng.random((6, 5, 3)) * 255) / 255
    write_image(tmp_path / "c.png", rgb)
    assert np.allclose(read_image(tmp_path / "c.png"), rgb, atol=1 / 255 + 1e-9)


def test_mask_roundtrip(tmp_path):
    mask = np.random.default_rng(7).random((8, 8)) < 0.5
    write_mask(tmp_path / "m.png", mask)
    assert np.array_equal(read_mask(tmp_path / "m.png"), mask)
