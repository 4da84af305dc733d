"""End-to-end inference: tile triage, per-pixel segmentation over the
positive regions, cluster detection, and overlay rendering."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import network
from .imaging import (ClusterReport, GrayImage, LabeledRegions,
                      connected_components, detect_clusters, otsu_threshold,
                      tile_image)

POSITIVE_THRESHOLD = 0.5
SKIP_FOREGROUND_FRACTION = 0.01  # drop tiles that are >99% Otsu background


@dataclass
class RoiSet:
    """Tiles the detection head called positive."""

    patch_size: int
    image_shape: tuple
    origins: list = field(default_factory=list)        # (row, col) per ROI
    probabilities: list = field(default_factory=list)  # positive prob per ROI
    tiles_total: int = 0
    tiles_evaluated: int = 0  # == forward evaluations spent on triage


@dataclass
class SegmentationResult:
    """Per-pixel positive probabilities over the evaluated region."""

    probabilities: np.ndarray  # float64, 0 outside the evaluated set
    mask: np.ndarray           # bool, prob >= threshold inside the set
    evaluated: np.ndarray      # bool, union of the positive ROIs
    forward_evaluations: int = 0


@dataclass
class PipelineResult:
    roi_set: RoiSet
    segmentation: SegmentationResult
    regions: LabeledRegions
    clusters: ClusterReport
    forward_evaluations: int
    seconds: float


def _as_image(image) -> GrayImage:
    return image if isinstance(image, GrayImage) else GrayImage(np.asarray(image))


def run_detector(image, weights: network.NetworkWeights,
                 skip_threshold: float = SKIP_FOREGROUND_FRACTION,
                 chunk: int = 512) -> RoiSet:
    """Classifies every overlapped tile whose Otsu-foreground fraction
    reaches skip_threshold; keeps those with positive probability >= 0.5."""
    image = _as_image(image)
    px = image.pixels
    n = weights.spec.patch_size
    grid = tile_image(px, n)
    otsu = otsu_threshold(px)
    foreground = px > otsu.threshold
    origins = grid.origins
    keep = [o for o in origins
            if foreground[o[0]:o[0] + n, o[1]:o[1] + n].mean() >= skip_threshold]
    roi = RoiSet(patch_size=n, image_shape=px.shape, tiles_total=len(origins),
                 tiles_evaluated=len(keep))
    if not keep:
        return roi
    scale = float(image.max_value)
    for i in range(0, len(keep), chunk):
        part = keep[i:i + chunk]
        batch = np.stack([px[r:r + n, c:c + n] for r, c in part])
        batch = batch[:, None].astype(np.float64) / scale
        probs = network.forward(weights, batch)[0][:, 1]
        for (r, c), p in zip(part, probs):
            if p >= POSITIVE_THRESHOLD:
                roi.origins.append((r, c))
                roi.probabilities.append(float(p))
    return roi


def run_segmentator(image, roi_set: RoiSet, weights: network.NetworkWeights,
                    chunk: int = 1024) -> SegmentationResult:
    """Classifies the centered patch of every pixel in the ROI union, each
    pixel exactly once; borders reflect."""
    image = _as_image(image)
    px = image.pixels
    h, w = px.shape
    n = weights.spec.patch_size
    half = n // 2
    if h <= half or w <= half:
        raise ValueError(f"image {px.shape} too small for {n}-patches")
    evaluated = np.zeros((h, w), dtype=bool)
    m = roi_set.patch_size
    for r, c in roi_set.origins:
        evaluated[r:r + m, c:c + m] = True
    probs = np.zeros((h, w), dtype=np.float64)
    coords = np.argwhere(evaluated)
    count = len(coords)
    if count:
        padded = np.pad(px, half, mode="reflect") if half else px
        windows = sliding_window_view(padded, (n, n))
        scale = float(image.max_value)
        for i in range(0, count, chunk):
            part = coords[i:i + chunk]
            batch = windows[part[:, 0], part[:, 1]][:, None].astype(np.float64)
            batch /= scale
            out = network.forward(weights, batch)[0][:, 1]
            probs[part[:, 0], part[:, 1]] = out
    mask = evaluated & (probs >= POSITIVE_THRESHOLD)
    return SegmentationResult(probabilities=probs, mask=mask,
                              evaluated=evaluated, forward_evaluations=count)


def run_pipeline(image, detector_weights: network.NetworkWeights,
                 segmentator_weights: network.NetworkWeights,
                 skip_threshold: float = SKIP_FOREGROUND_FRACTION,
                 min_cluster_count: int = 5) -> PipelineResult:
    """Full pass: triage, segmentation, labeling, cluster rule."""
    image = _as_image(image)
    t0 = time.perf_counter()
    roi = run_detector(image, detector_weights, skip_threshold)
    seg = run_segmentator(image, roi, segmentator_weights)
    regions = connected_components(seg.mask)
    clusters = detect_clusters(regions, image.pixel_spacing_mm,
                               min_count=min_cluster_count)
    return PipelineResult(
        roi_set=roi, segmentation=seg, regions=regions, clusters=clusters,
        forward_evaluations=roi.tiles_evaluated + seg.forward_evaluations,
        seconds=time.perf_counter() - t0)


# --------------------------------------------------------------- overlay

MASK_TINT = np.array([235, 50, 40], dtype=np.float64)
BOX_COLOR = np.array([60, 220, 70], dtype=np.uint8)
MASK_BLEND = 0.6


def render_overlay(image, mask, report: ClusterReport | None = None) -> np.ndarray:
    """RGB overlay: grayscale base, mask pixels tinted red, cluster boxes
    outlined green. With an empty mask and no clusters this is exactly the
    grayscale promotion."""
    image = _as_image(image)
    px = image.pixels.astype(np.float64) * (255.0 / image.max_value)
    base = np.rint(px).astype(np.uint8)
    rgb = np.repeat(base[:, :, None], 3, axis=2)
    mask = np.asarray(mask).astype(bool, copy=False)
    if mask.shape != base.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {base.shape}")
    if mask.any():
        blended = (1.0 - MASK_BLEND) * base[mask, None] + MASK_BLEND * MASK_TINT
        rgb[mask] = np.rint(blended).astype(np.uint8)
    h, w = base.shape
    for box in (report.clusters if report is not None else []):
        r0, c0 = max(box.r0, 0), max(box.c0, 0)
        r1, c1 = min(box.r1, h), min(box.c1, w)
        rgb[r0, c0:c1] = BOX_COLOR
        rgb[r1 - 1, c0:c1] = BOX_COLOR
        rgb[r0:r1, c0] = BOX_COLOR
        rgb[r0:r1, c1 - 1] = BOX_COLOR
    return rgb
