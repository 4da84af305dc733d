"""Classical imaging primitives against independent oracles: exhaustive
Otsu search, BFS flood fill, reflect-index patch extraction, coverage
counting for the tile grid, and cluster-rule micro-cases."""

import numpy as np
import pytest

from mcseg.imaging import (
    GrayImage,
    axis_origins,
    connected_components,
    detect_clusters,
    extract_patch,
    extract_patches,
    otsu_threshold,
    render_report_text,
    tile_image,
)


# ----------------------------------------------------------------- otsu

def otsu_exhaustive(px):
    """Per-threshold scan of between-class variance; ties keep the lowest."""
    levels = 65536 if px.dtype == np.uint16 else 256
    hist = np.bincount(px.reshape(-1), minlength=levels).astype(np.float64)
    if np.count_nonzero(hist) == 1:
        return int(px.flat[0]), True
    total = float(px.size)
    s_all = float((np.arange(levels) * hist).sum())
    best_t, best_sigma = 0, -np.inf
    w0 = 0.0
    s0 = 0.0
    for t in range(levels):
        w0 += hist[t]
        s0 += t * hist[t]
        w1 = total - w0
        if w0 <= 0.0 or w1 <= 0.0:
            continue
        mu0 = s0 / w0
        mu1 = (s_all - s0) / w1
        d = mu0 - mu1
        sigma = (w0 * w1) * (d * d)
        if sigma > best_sigma:
            best_sigma, best_t = sigma, t
    return best_t, False


def test_otsu_matches_exhaustive_search_on_random_images():
    rng = np.random.default_rng(200)
    for _ in range(120):
        px = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
        got = otsu_threshold(px)
        want_t, want_deg = otsu_exhaustive(px)
        assert got.threshold == want_t and got.degenerate == want_deg


def test_otsu_bimodal_and_degenerate():
    px = np.zeros((10, 10), dtype=np.uint8)
    px[:, 5:] = 200
    got = otsu_threshold(px)
    assert not got.degenerate
    fg = px > got.threshold
    assert fg.sum() == 50 and np.all(px[fg] == 200)

    const = np.full((4, 4), 7, dtype=np.uint8)
    got = otsu_threshold(const)
    assert got.degenerate and got.threshold == 7
    assert not (const > got.threshold).any()  # empty foreground


def test_otsu_supports_uint16():
    rng = np.random.default_rng(201)
    px = rng.integers(0, 4096, size=(16, 16)).astype(np.uint16)
    got = otsu_threshold(px)
    want_t, _ = otsu_exhaustive(px)
    assert got.threshold == want_t


def test_otsu_rejects_float_images():
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros((4, 4), dtype=np.float64))


# ----------------------------------------------------------------- tiling

def test_axis_origins_examples():
    assert axis_origins(98, 49, 24) == [0, 24, 48, 49]
    assert axis_origins(49, 49, 24) == [0]
    assert axis_origins(50, 49, 24) == [0, 1]
    with pytest.raises(ValueError):
        axis_origins(48, 49, 24)


def test_tile_grid_covers_every_pixel():
    rng = np.random.default_rng(202)
    for _ in range(25):
        n = int(rng.integers(3, 30)) * 2 + 1
        h = int(rng.integers(n, 3 * n))
        w = int(rng.integers(n, 3 * n))
        grid = tile_image(np.zeros((h, w), dtype=np.uint8), n)
        assert grid.stride == max(1, n // 2)
        cover = np.zeros((h, w), dtype=np.int64)
        for r, c in grid.origins:
            assert 0 <= r <= h - n and 0 <= c <= w - n
            cover[r:r + n, c:c + n] += 1
        assert cover.min() >= 1
        s = grid.stride
        interior = cover[s:h - s, s:w - s]
        if interior.size:
            assert interior.min() >= 4
        assert len(grid) == len(grid.row_origins) * len(grid.col_origins)


def test_tile_grid_for_49_patch():
    grid = tile_image(np.zeros((98, 98), dtype=np.uint8), 49)
    assert grid.stride == 24
    assert grid.row_origins == (0, 24, 48, 49)
    assert len(grid) == 16


# ----------------------------------------------------------------- patches

def _reflect_index(i, n):
    period = 2 * n - 2
    m = i % period
    return m if m < n else period - m


def test_extract_patch_matches_reflect_oracle():
    rng = np.random.default_rng(203)
    px = rng.integers(0, 256, size=(12, 15), dtype=np.uint8)
    n, half = 9, 4
    centers = [(0, 0), (11, 14), (0, 14), (11, 0), (5, 7), (3, 0), (0, 9)]
    for r, c in centers:
        got = extract_patch(px, (r, c), n)
        want = np.empty((n, n), dtype=px.dtype)
        for u in range(n):
            for v in range(n):
                want[u, v] = px[_reflect_index(r - half + u, 12),
                                _reflect_index(c - half + v, 15)]
        assert np.array_equal(got, want), (r, c)


def test_extract_patches_equals_per_center_extraction():
    rng = np.random.default_rng(204)
    px = rng.integers(0, 256, size=(20, 17), dtype=np.uint8)
    centers = [(int(r), int(c)) for r, c in
               zip(rng.integers(0, 20, 40), rng.integers(0, 17, 40))]
    centers += [(0, 0), (19, 16), (0, 16), (19, 0)]
    bulk = extract_patches(px, centers, 11)
    assert bulk.shape == (len(centers), 11, 11)
    for row, center in zip(bulk, centers):
        assert np.array_equal(row, extract_patch(px, center, 11))


def test_patch_extraction_validation():
    px = np.zeros((10, 10), dtype=np.uint8)
    with pytest.raises(ValueError):
        extract_patch(px, (0, 0), 8)  # even size
    with pytest.raises(ValueError):
        extract_patch(px, (10, 0), 9)  # center outside
    with pytest.raises(ValueError):
        extract_patch(np.zeros((4, 30), dtype=np.uint8), (0, 0), 9)  # reflect room
    with pytest.raises(ValueError):
        extract_patches(px, [(0, 0), (3, 10)], 9)


# ----------------------------------------------------------------- components

def flood_fill_components(mask):
    """Pure-python BFS labeling with 8-connectivity."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    count = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j] and labels[i, j] == 0:
                count += 1
                stack = [(i, j)]
                labels[i, j] = count
                while stack:
                    r, c = stack.pop()
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            rr, cc = r + dr, c + dc
                            if (0 <= rr < h and 0 <= cc < w and mask[rr, cc]
                                    and labels[rr, cc] == 0):
                                labels[rr, cc] = count
                                stack.append((rr, cc))
    return labels, count


def assert_labelings_equivalent(got, want_labels, want_count):
    regions_equal = got.labels != 0
    assert np.array_equal(regions_equal, want_labels != 0)
    assert got.count == want_count
    if want_count == 0:
        return
    pairs = set(zip(got.labels[regions_equal].tolist(),
                    want_labels[regions_equal].tolist()))
    assert len(pairs) == want_count  # a bijection between label sets
    assert len({a for a, _ in pairs}) == want_count
    assert len({b for _, b in pairs}) == want_count
    for mine, theirs in pairs:
        sel = want_labels == theirs
        rows, cols = np.nonzero(sel)
        assert got.areas[mine - 1] == sel.sum()
        assert got.centroids[mine - 1, 0] == pytest.approx(rows.mean())
        assert got.centroids[mine - 1, 1] == pytest.approx(cols.mean())


def test_connected_components_matches_flood_fill_on_random_masks():
    rng = np.random.default_rng(205)
    for _ in range(120):
        p = rng.uniform(0.15, 0.7)
        mask = rng.random((24, 26)) < p
        got = connected_components(mask)
        want_labels, want_count = flood_fill_components(mask)
        assert_labelings_equivalent(got, want_labels, want_count)


def test_connected_components_diagonal_touch_is_one_component():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True
    got = connected_components(mask)
    assert got.count == 1 and got.areas.tolist() == [3]
    assert np.allclose(got.centroids[0], [1.0, 1.0])


def test_connected_components_empty_mask():
    got = connected_components(np.zeros((5, 5), dtype=bool))
    assert got.count == 0 and got.labels.max() == 0
    assert got.centroids.shape == (0, 2)


# ----------------------------------------------------------------- clusters

def _regions_from_points(points, shape):
    mask = np.zeros(shape, dtype=bool)
    for r, c in points:
        mask[r, c] = True
    return connected_components(mask)


def test_five_centroids_in_one_square_centimeter_is_no_cluster():
    # 0.05 mm spacing -> a 10 mm window is 200 px
    points = [(100, 100), (130, 160), (160, 120), (110, 180), (180, 180)]
    regions = _regions_from_points(points, (400, 400))
    report = detect_clusters(regions, 0.05)
    assert report.window_px == 200
    assert report.clusters == []


def test_six_centroids_in_one_square_centimeter_is_one_cluster():
    points = [(100, 100), (130, 160), (160, 120), (110, 180), (180, 180),
              (150, 150)]
    regions = _regions_from_points(points, (400, 400))
    report = detect_clusters(regions, 0.05)
    assert len(report.clusters) == 1
    box = report.clusters[0]
    assert box.centroid_count == 6
    for r, c in points:
        assert box.r0 <= r < box.r1 and box.c0 <= c < box.c1


def test_two_far_groups_are_two_clusters():
    group_a = [(60, 60), (80, 100), (100, 70), (70, 130), (120, 120), (90, 90)]
    group_b = [(r + 450, c + 450) for r, c in group_a]
    regions = _regions_from_points(group_a + group_b, (700, 700))
    report = detect_clusters(regions, 0.05)
    assert len(report.clusters) == 2
    counts = sorted(box.centroid_count for box in report.clusters)
    assert counts == [6, 6]


def test_cluster_detection_survives_translation():
    base = [(10, 10), (30, 60), (60, 20), (20, 80), (80, 80), (50, 50)]
    for dr, dc in [(0, 0), (37, 91), (113, 7), (151, 151)]:
        points = [(r + dr, c + dc) for r, c in base]
        regions = _regions_from_points(points, (420, 420))
        report = detect_clusters(regions, 0.05)
        assert len(report.clusters) == 1, (dr, dc)
        assert report.clusters[0].centroid_count == 6


def test_min_count_is_configurable():
    points = [(50, 50), (60, 80), (90, 60), (70, 100)]
    regions = _regions_from_points(points, (300, 300))
    assert detect_clusters(regions, 0.05, min_count=3).clusters
    assert not detect_clusters(regions, 0.05, min_count=4).clusters


def test_report_text_lists_components_and_clusters():
    points = [(100, 100), (130, 160), (160, 120), (110, 180), (180, 180),
              (150, 150)]
    regions = _regions_from_points(points, (400, 400))
    report = detect_clusters(regions, 0.05)
    text = render_report_text(report)
    lines = text.strip().split("\n")
    assert lines[0] == "components 6"
    assert "clusters 1" in lines
    assert text.endswith("\n")


# ----------------------------------------------------------------- image type

def test_gray_image_validation_and_properties():
    img = GrayImage(np.zeros((4, 6), dtype=np.uint8))
    assert img.height == 4 and img.width == 6 and img.max_value == 255
    assert img.pixel_spacing_mm == pytest.approx(0.05)
    img16 = GrayImage(np.zeros((4, 6), dtype=np.uint16), 0.1)
    assert img16.max_value == 65535
    with pytest.raises(ValueError):
        GrayImage(np.zeros((4, 6), dtype=np.float32))
    with pytest.raises(ValueError):
        GrayImage(np.zeros((0, 6), dtype=np.uint8))
    with pytest.raises(ValueError):
        GrayImage(np.zeros((4, 6), dtype=np.uint8), 0.0)
