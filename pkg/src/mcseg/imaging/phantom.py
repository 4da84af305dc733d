"""Synthetic phantom mammograms with planted microcalcifications.

Each phantom is a smooth low-frequency tissue background with additive
noise and a dark outside-the-tissue border, plus small bright irregular
blobs whose exact pixels form the ground-truth mask. Every planted blob
pixel sits at least `margin` gray levels above the background it replaced,
and planted blobs never touch, so each one is its own 8-connected
component. Generation is deterministic given (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .core import DEFAULT_PIXEL_SPACING_MM, EIGHT_CONN, GrayImage


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 384
    width: int = 384
    pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM
    # background texture
    base_level: float = 95.0
    blob_count: int = 7
    blob_amplitude: float = 32.0
    blob_sigma: tuple = (30.0, 85.0)
    border_level: float = 14.0
    noise_sigma: float = 5.0
    # microcalcifications
    isolated_mcs: int = 3
    cluster_sizes: tuple = (7,)
    cluster_extent_px: int = 130
    mc_diameter: tuple = (3, 9)
    mc_margin: int = 22
    mc_peak: float = 55.0
    min_separation_px: int = 16
    isolated_separation_px: int = 80
    isolated_cluster_clearance_px: int = 150
    max_attempts: int = 400

    def __post_init__(self):
        if self.height < 256 or self.width < 256:
            raise ValueError(f"phantom must be at least 256x256, got {self.height}x{self.width}")
        if self.mc_diameter[0] < 2 or self.mc_diameter[0] > self.mc_diameter[1]:
            raise ValueError(f"mc_diameter range must start >= 2, got {self.mc_diameter}")
        if self.mc_margin < 1:
            raise ValueError(f"mc_margin must be >= 1, got {self.mc_margin}")
        if any(s < 6 for s in self.cluster_sizes):
            raise ValueError("planted clusters need at least 6 members each")
        if self.isolated_mcs < 0 or self.noise_sigma < 0:
            raise ValueError("isolated_mcs and noise_sigma must be non-negative")


@dataclass(frozen=True)
class PlantedMC:
    centroid: tuple  # (row, col), pixel-mass mean
    area: int
    bbox: tuple      # half-open (r0, c0, r1, c1)


@dataclass(frozen=True)
class PlantedCluster:
    bbox: tuple      # half-open (r0, c0, r1, c1) around the member pixels
    mc_indices: tuple


@dataclass
class PhantomTruth:
    mcs: list = field(default_factory=list)
    clusters: list = field(default_factory=list)
    background: np.ndarray | None = None  # the image before blobs were painted


def _background(cfg: PhantomConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    bg = np.full((h, w), cfg.base_level)
    for _ in range(cfg.blob_count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        sig = rng.uniform(*cfg.blob_sigma)
        amp = rng.uniform(-cfg.blob_amplitude, cfg.blob_amplitude)
        bg += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    # dark border outside a jittered tissue ellipse
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h
    cx = w / 2 + rng.uniform(-0.04, 0.04) * w
    ry = rng.uniform(0.40, 0.46) * h
    rx = rng.uniform(0.40, 0.46) * w
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    inside = 1.0 / (1.0 + np.exp((d - 1.0) / 0.05))
    bg = cfg.border_level + (bg - cfg.border_level) * inside
    bg += rng.normal(0.0, cfg.noise_sigma, (h, w))
    headroom = 255 - cfg.mc_margin - int(math.ceil(cfg.mc_peak))
    base = np.clip(np.rint(bg), 0, headroom).astype(np.uint8)
    return base, inside


def _mc_blob(rng, diameter: int):
    """Irregular compact blob of roughly the requested diameter: a few
    summed Gaussian lobes thresholded to the target area, largest
    8-connected piece kept. Returns (mask, field) on a small square grid."""
    side = diameter + 5
    side += 1 - side % 2
    ax = np.arange(side, dtype=np.float64) - side // 2
    vv = ax[:, None]
    uu = ax[None, :]
    for _ in range(20):
        f = np.zeros((side, side))
        for _ in range(int(rng.integers(2, 4))):
            oy, ox = rng.uniform(-diameter / 4, diameter / 4, 2)
            sig = rng.uniform(diameter / 3.5, diameter / 2.2)
            f += rng.uniform(0.6, 1.0) * np.exp(
                -((vv - oy) ** 2 + (uu - ox) ** 2) / (2 * sig * sig))
        target = max(2, int(round(math.pi * (diameter / 2.0) ** 2 / 1.3)))
        order = np.argsort(f, axis=None)[::-1]
        blob = np.zeros((side, side), dtype=bool)
        blob.reshape(-1)[order[:target]] = True
        lab, k = ndi.label(blob, structure=EIGHT_CONN)
        if k > 1:
            areas = np.bincount(lab.reshape(-1))[1:]
            blob = lab == (int(np.argmax(areas)) + 1)
        if blob.sum() >= 2:
            return blob, f
    raise RuntimeError("could not shape a blob (degenerate random draw)")


def _place(rng, eligible: np.ndarray, taken: list, min_dists: list,
           attempts: int):
    """One position from `eligible` (n, 2) at least min_dists[i] away from
    taken[i] groups of points; None when attempts run out."""
    for _ in range(attempts):
        p = eligible[int(rng.integers(len(eligible)))]
        ok = True
        for pts, dmin in zip(taken, min_dists):
            if pts and np.any(np.hypot(*(np.asarray(pts) - p).T) < dmin):
                ok = False
                break
        if ok:
            return int(p[0]), int(p[1])
    return None


def generate_phantom(config: PhantomConfig, seed: int):
    """Returns (GrayImage, boolean mask, PhantomTruth)."""
    rng = np.random.default_rng([int(seed), 0x9E37])
    base, inside = _background(config, rng)
    h, w = base.shape
    inset = 12
    tissue = inside > 0.75
    tissue[:inset, :] = tissue[-inset:, :] = False
    tissue[:, :inset] = tissue[:, -inset:] = False

    half_ext = config.cluster_extent_px // 2
    deep = tissue.copy()
    m = half_ext + inset
    deep[:m, :] = deep[-m:, :] = False
    deep[:, :m] = deep[:, -m:] = False

    centers: list[tuple[int, int]] = []
    cluster_members: list[list[int]] = []
    cluster_centers: list[tuple[int, int]] = []
    deep_coords = np.argwhere(deep)
    tissue_coords = np.argwhere(tissue)
    if len(tissue_coords) == 0:
        raise ValueError("tissue region is empty; relax the config")

    # When isolated microcalcifications must keep a clearance from the
    # clusters, bias cluster placement toward one corner of the deep
    # region so enough far tissue remains for them.
    corner_coords = deep_coords
    if config.isolated_mcs and len(deep_coords):
        corner = int(rng.integers(4))
        sign_r = 1.0 if corner // 2 == 0 else -1.0
        sign_c = 1.0 if corner % 2 == 0 else -1.0
        proj = sign_r * deep_coords[:, 0] + sign_c * deep_coords[:, 1]
        k = max(1, len(deep_coords) // 10)
        cut = np.partition(proj, k - 1)[k - 1]
        corner_coords = deep_coords[proj <= cut]

    for size in config.cluster_sizes:
        if len(deep_coords) == 0:
            raise ValueError("no room for a planted cluster at this extent")
        ccenter = _place(rng, corner_coords, [cluster_centers],
                         [2.5 * config.cluster_extent_px], config.max_attempts)
        if ccenter is None and corner_coords is not deep_coords:
            ccenter = _place(rng, deep_coords, [cluster_centers],
                             [2.5 * config.cluster_extent_px], config.max_attempts)
        if ccenter is None:
            raise ValueError("cannot place a cluster center: region too crowded")
        cluster_centers.append(ccenter)
        members = []
        for _ in range(size):
            placed = None
            for _ in range(config.max_attempts):
                dr = int(rng.integers(-half_ext, half_ext + 1))
                dc = int(rng.integers(-half_ext, half_ext + 1))
                p = (ccenter[0] + dr, ccenter[1] + dc)
                if not tissue[p]:
                    continue
                if centers and np.any(np.hypot(*(np.asarray(centers) - p).T)
                                      < config.min_separation_px):
                    continue
                placed = p
                break
            if placed is None:
                raise ValueError("cannot place microcalcifications: cluster too crowded")
            members.append(len(centers))
            centers.append(placed)
        cluster_members.append(members)

    if config.isolated_mcs:
        far = tissue.copy()
        yy = np.arange(h, dtype=np.float64)[:, None]
        xx = np.arange(w, dtype=np.float64)[None, :]
        for cr, ccol in cluster_centers:
            far &= (np.hypot(yy - cr, xx - ccol)
                    >= config.isolated_cluster_clearance_px)
        far_coords = np.argwhere(far)
        if len(far_coords) == 0:
            raise ValueError(
                "no tissue far enough from the planted clusters for isolated "
                "microcalcifications; reduce the clearance or enlarge the image")
        for _ in range(config.isolated_mcs):
            iso = [c for i, c in enumerate(centers)
                   if not any(i in mm for mm in cluster_members)]
            p = _place(rng, far_coords, [iso, centers],
                       [config.isolated_separation_px,
                        config.min_separation_px],
                       config.max_attempts)
            if p is None:
                raise ValueError("cannot place an isolated microcalcification: "
                                 "image too crowded for the requested counts")
            centers.append(p)

    image = base.astype(np.int16)
    mask = np.zeros((h, w), dtype=bool)
    mcs: list[PlantedMC] = []
    for r, c in centers:
        dia = int(rng.integers(config.mc_diameter[0], config.mc_diameter[1] + 1))
        blob, fld = _mc_blob(rng, dia)
        half = blob.shape[0] // 2
        sl = (slice(r - half, r + half + 1), slice(c - half, c + half + 1))
        if mask[sl][blob].any():
            raise RuntimeError("planted blobs overlap; separation too small")
        lo = fld[blob].min()
        span = max(fld[blob].max() - lo, 1e-9)
        peak = config.mc_peak * rng.uniform(0.35, 1.0)
        bump = config.mc_margin + np.rint((fld[blob] - lo) / span * peak)
        image[sl][blob] = np.clip(base[sl][blob].astype(np.int16)
                                  + bump.astype(np.int16), 0, 255)
        mask[sl] |= blob
        rows, cols = np.nonzero(blob)
        rows = rows + (r - half)
        cols = cols + (c - half)
        mcs.append(PlantedMC(
            centroid=(float(rows.mean()), float(cols.mean())),
            area=int(blob.sum()),
            bbox=(int(rows.min()), int(cols.min()),
                  int(rows.max()) + 1, int(cols.max()) + 1)))

    clusters = []
    for members in cluster_members:
        boxes = np.array([mcs[i].bbox for i in members])
        clusters.append(PlantedCluster(
            bbox=(int(boxes[:, 0].min()), int(boxes[:, 1].min()),
                  int(boxes[:, 2].max()), int(boxes[:, 3].max())),
            mc_indices=tuple(members)))

    truth = PhantomTruth(mcs=mcs, clusters=clusters, background=base)
    return GrayImage(image.astype(np.uint8), config.pixel_spacing_mm), mask, truth


def write_truth_sidecar(truth: PhantomTruth, path):
    """Plain-text sidecar: planted centroids, then planted cluster boxes."""
    lines = [f"mcs {len(truth.mcs)}"]
    for i, mc in enumerate(truth.mcs, start=1):
        lines.append(f"{i}\t{mc.centroid[0]:.2f}\t{mc.centroid[1]:.2f}\t{mc.area}")
    lines.append(f"clusters {len(truth.clusters)}")
    for i, cl in enumerate(truth.clusters, start=1):
        r0, c0, r1, c1 = cl.bbox
        lines.append(f"{i}\t{r0}\t{c0}\t{r1}\t{c1}\t{len(cl.mc_indices)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
