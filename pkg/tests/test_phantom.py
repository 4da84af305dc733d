"""Phantom generator invariants: determinism, exact brightness margin,
mask/truth consistency, and recoverability of the planted cluster."""

import numpy as np
import pytest

from mcseg.imaging import (
    PhantomConfig,
    connected_components,
    detect_clusters,
    generate_phantom,
    write_truth_sidecar,
)

CFG = PhantomConfig()


def test_generation_is_deterministic():
    img_a, mask_a, truth_a = generate_phantom(CFG, seed=7)
    img_b, mask_b, truth_b = generate_phantom(CFG, seed=7)
    assert np.array_equal(img_a.pixels, img_b.pixels)
    assert np.array_equal(mask_a, mask_b)
    assert np.array_equal(truth_a.background, truth_b.background)
    assert [m.centroid for m in truth_a.mcs] == [m.centroid for m in truth_b.mcs]
    assert [m.area for m in truth_a.mcs] == [m.area for m in truth_b.mcs]
    assert [c.bbox for c in truth_a.clusters] == [c.bbox for c in truth_b.clusters]

    img_c, mask_c, _ = generate_phantom(CFG, seed=8)
    assert not np.array_equal(img_a.pixels, img_c.pixels)
    assert not np.array_equal(mask_a, mask_c)


def test_counts_and_mask_popcount_match_truth():
    _, mask, truth = generate_phantom(CFG, seed=11)
    want_mcs = CFG.isolated_mcs + sum(CFG.cluster_sizes)
    assert len(truth.mcs) == want_mcs
    assert len(truth.clusters) == len(CFG.cluster_sizes)
    for cluster, size in zip(truth.clusters, CFG.cluster_sizes):
        assert len(cluster.mc_indices) == size
    # blobs never overlap, so the mask popcount is the sum of areas
    assert int(mask.sum()) == sum(m.area for m in truth.mcs)


def test_planted_pixels_sit_exactly_margin_or_more_above_background():
    for seed in (3, 21):
        img, mask, truth = generate_phantom(CFG, seed=seed)
        diff = img.pixels.astype(np.int64) - truth.background.astype(np.int64)
        on = diff[mask]
        assert int(on.min()) == CFG.mc_margin  # dimmest blob pixel is exact
        assert int(on.max()) <= CFG.mc_margin + int(np.ceil(CFG.mc_peak))
        # everything off the mask is untouched background
        assert np.array_equal(img.pixels[~mask], truth.background[~mask])


def test_each_planted_blob_is_its_own_component():
    _, mask, truth = generate_phantom(CFG, seed=5)
    regions = connected_components(mask)
    assert regions.count == len(truth.mcs)
    # match truth records to labeled regions by centroid
    got = {(round(r, 6), round(c, 6), int(a))
           for (r, c), a in zip(regions.centroids, regions.areas)}
    want = {(round(m.centroid[0], 6), round(m.centroid[1], 6), m.area)
            for m in truth.mcs}
    assert got == want
    for m in truth.mcs:
        r0, c0, r1, c1 = m.bbox
        assert 0 <= r0 < r1 <= mask.shape[0]
        assert 0 <= c0 < c1 <= mask.shape[1]
        assert mask[r0:r1, c0:c1].sum() >= m.area


def test_truth_mask_recovers_the_planted_cluster():
    for seed in (2, 13, 40):
        img, mask, truth = generate_phantom(CFG, seed=seed)
        regions = connected_components(mask)
        report = detect_clusters(regions, img.pixel_spacing_mm)
        assert len(report.clusters) == len(CFG.cluster_sizes), seed
        box = report.clusters[0]
        members = truth.clusters[0].mc_indices
        for i in members:
            r, c = truth.mcs[i].centroid
            assert box.r0 <= r < box.r1 and box.c0 <= c < box.c1, (seed, i)
        assert box.centroid_count >= len(members)


def test_separation_rules_hold():
    _, _, truth = generate_phantom(CFG, seed=17)
    cents = np.array([m.centroid for m in truth.mcs])
    in_cluster = {i for cl in truth.clusters for i in cl.mc_indices}
    iso = [i for i in range(len(truth.mcs)) if i not in in_cluster]
    assert len(iso) == CFG.isolated_mcs
    # pairwise distances between planted *centers* respect the config; the
    # blob centroid can wobble a couple of pixels off its center, so allow
    # that much slack when checking from centroids.
    d = np.hypot(cents[:, None, 0] - cents[None, :, 0],
                 cents[:, None, 1] - cents[None, :, 1])
    np.fill_diagonal(d, np.inf)
    assert d.min() >= CFG.min_separation_px - 6
    d_iso = d[np.ix_(iso, iso)]
    if d_iso.size:
        assert d_iso.min() >= CFG.isolated_separation_px - 6


def test_many_seeds_generate_without_error():
    for seed in range(30):
        img, mask, truth = generate_phantom(CFG, seed=seed)
        assert img.pixels.dtype == np.uint8
        assert mask.any()
        assert len(truth.mcs) == CFG.isolated_mcs + sum(CFG.cluster_sizes)


def test_truth_sidecar_format(tmp_path):
    _, _, truth = generate_phantom(CFG, seed=1)
    path = tmp_path / "truth.txt"
    write_truth_sidecar(truth, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == f"mcs {len(truth.mcs)}"
    first = lines[1].split("\t")
    assert len(first) == 4 and first[0] == "1"
    assert f"clusters {len(truth.clusters)}" in lines
    tail = lines[-1].split("\t")
    assert len(tail) == 6 and int(tail[5]) == len(truth.clusters[-1].mc_indices)


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(height=100)
    with pytest.raises(ValueError):
        PhantomConfig(mc_diameter=(1, 9))
    with pytest.raises(ValueError):
        PhantomConfig(mc_margin=0)
    with pytest.raises(ValueError):
        PhantomConfig(cluster_sizes=(5,))
    with pytest.raises(ValueError):
        PhantomConfig(isolated_mcs=-1)
