"""Classical imaging primitives: Otsu thresholding, overlapped tiling,
reflected patch extraction, 8-connected labeling, and the cluster rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_PIXEL_SPACING_MM = 0.05
EIGHT_CONN = np.ones((3, 3), dtype=bool)


@dataclass
class GrayImage:
    """Single-channel image with its physical pixel spacing."""

    pixels: np.ndarray
    pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError(f"pixels must be a non-empty 2-d array, got shape {self.pixels.shape}")
        if self.pixels.dtype not in (np.uint8, np.uint16):
            raise ValueError(f"pixels must be uint8 or uint16, got {self.pixels.dtype}")
        if not self.pixel_spacing_mm > 0:
            raise ValueError(f"pixel_spacing_mm must be > 0, got {self.pixel_spacing_mm}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def max_value(self) -> int:
        """Largest representable intensity for the stored dtype."""
        return 255 if self.pixels.dtype == np.uint8 else 65535


def _as_pixels(image) -> np.ndarray:
    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    if px.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {px.shape}")
    return px


@dataclass(frozen=True)
class OtsuResult:
    threshold: int
    degenerate: bool  # constant image: empty foreground


def otsu_threshold(image) -> OtsuResult:
    """Histogram threshold maximizing between-class variance.

    Foreground is strictly above the threshold; ties resolve to the lowest
    threshold. A constant image returns its single value flagged degenerate.
    """
    px = _as_pixels(image)
    if not np.issubdtype(px.dtype, np.integer):
        raise ValueError(f"otsu needs an integer image, got {px.dtype}")
    levels = 65536 if px.dtype == np.uint16 else 256
    hist = np.bincount(px.reshape(-1), minlength=levels).astype(np.float64)
    if np.count_nonzero(hist) == 1:
        return OtsuResult(int(px.flat[0]), True)
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    lv = np.arange(levels, dtype=np.float64)
    s0 = np.cumsum(lv * hist)
    s1 = s0[-1] - s0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=valid)
    mu1 = np.divide(s1, w1, out=np.zeros_like(s1), where=valid)
    d = mu0 - mu1
    sigma = np.where(valid, (w0 * w1) * (d * d), 0.0)
    return OtsuResult(int(np.argmax(sigma)), False)


# --------------------------------------------------------------- tiling

@dataclass(frozen=True)
class TileGrid:
    """Origins of the N x N tiles covering an image at stride N//2."""

    patch_size: int
    stride: int
    row_origins: tuple
    col_origins: tuple
    image_shape: tuple

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def __len__(self):
        return len(self.row_origins) * len(self.col_origins)


def axis_origins(extent: int, window: int, stride: int) -> list[int]:
    """Stride-spaced window origins plus a clamped final one for the tail.

    Duplicates from the clamp are dropped; the windows cover every index
    in [0, extent)."""
    if window > extent:
        raise ValueError(f"window {window} exceeds extent {extent}")
    origins = list(range(0, extent - window + 1, stride))
    if origins[-1] != extent - window:
        origins.append(extent - window)
    return origins


def tile_image(image, patch_size: int) -> TileGrid:
    """N x N tiles at stride N//2 with clamped trailing row/column."""
    px = _as_pixels(image)
    n = int(patch_size)
    if n < 1:
        raise ValueError(f"patch_size must be >= 1, got {n}")
    h, w = px.shape
    if h < n or w < n:
        raise ValueError(f"image {px.shape} smaller than patch size {n}")
    stride = max(1, n // 2)
    return TileGrid(patch_size=n, stride=stride,
                    row_origins=tuple(axis_origins(h, n, stride)),
                    col_origins=tuple(axis_origins(w, n, stride)),
                    image_shape=(h, w))


# --------------------------------------------------------------- patches

def extract_patch(image, center: tuple[int, int], patch_size: int) -> np.ndarray:
    """N x N window (N odd) centered on (row, col); borders mirror-reflect.

    The reflection is about the image edge (edge pixel not duplicated), so
    image extents must exceed N//2."""
    px = _as_pixels(image)
    n = int(patch_size)
    if n < 1 or n % 2 == 0:
        raise ValueError(f"patch_size must be a positive odd int, got {n}")
    h, w = px.shape
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"center {center} outside image of shape {px.shape}")
    half = n // 2
    if h <= half or w <= half:
        raise ValueError(f"image {px.shape} too small to reflect a {n}-patch")
    r0, r1 = r - half, r + half + 1
    c0, c1 = c - half, c + half + 1
    if r0 >= 0 and c0 >= 0 and r1 <= h and c1 <= w:
        return px[r0:r1, c0:c1].copy()
    crop = px[max(r0, 0):min(r1, h), max(c0, 0):min(c1, w)]
    pads = ((max(-r0, 0), max(r1 - h, 0)), (max(-c0, 0), max(c1 - w, 0)))
    return np.pad(crop, pads, mode="reflect")


def extract_patches(image, centers, patch_size: int) -> np.ndarray:
    """Stacked patches for many centers, via one reflected pad of the image.

    Equivalent to extract_patch per center but far cheaper in bulk."""
    px = _as_pixels(image)
    n = int(patch_size)
    if n < 1 or n % 2 == 0:
        raise ValueError(f"patch_size must be a positive odd int, got {n}")
    half = n // 2
    h, w = px.shape
    if h <= half or w <= half:
        raise ValueError(f"image {px.shape} too small to reflect a {n}-patch")
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 2)
    if centers.size and (centers.min() < 0 or (centers[:, 0] >= h).any()
                         or (centers[:, 1] >= w).any()):
        raise ValueError("patch center outside the image")
    padded = np.pad(px, half, mode="reflect") if half else px
    windows = sliding_window_view(padded, (n, n))
    return windows[centers[:, 0], centers[:, 1]].copy()


# --------------------------------------------------------------- labeling

@dataclass
class LabeledRegions:
    """8-connected components: label map (0 = background, labels 1..K
    contiguous), float centroids (row, col), and pixel areas."""

    labels: np.ndarray
    centroids: np.ndarray
    areas: np.ndarray

    @property
    def count(self) -> int:
        return len(self.areas)


def connected_components(mask) -> LabeledRegions:
    """Labels 8-connected foreground components of a boolean mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    mask = mask.astype(bool, copy=False)
    labels, count = ndi.label(mask, structure=EIGHT_CONN)
    labels = labels.astype(np.int32, copy=False)
    if count == 0:
        return LabeledRegions(labels, np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    fg = labels[mask]
    rows, cols = np.nonzero(mask)
    areas = np.bincount(fg, minlength=count + 1)[1:]
    rsum = np.bincount(fg, weights=rows, minlength=count + 1)[1:]
    csum = np.bincount(fg, weights=cols, minlength=count + 1)[1:]
    centroids = np.stack([rsum / areas, csum / areas], axis=1)
    return LabeledRegions(labels, centroids, areas.astype(np.int64))


# --------------------------------------------------------------- clusters

@dataclass(frozen=True)
class ClusterBox:
    """Half-open pixel box [r0, r1) x [c0, c1) with its centroid count."""

    r0: int
    c0: int
    r1: int
    c1: int
    centroid_count: int


@dataclass
class ClusterReport:
    """Component centroids/areas plus the merged flagged-window boxes."""

    centroids: np.ndarray
    areas: np.ndarray
    clusters: list = field(default_factory=list)
    window_px: int = 0
    min_count: int = 5


def _window_origins(extent: int, window: int, stride: int) -> list[int]:
    if window >= extent:
        return [0]
    return axis_origins(extent, window, stride)


def detect_clusters(regions: LabeledRegions, pixel_spacing_mm: float,
                    min_count: int = 5, window_mm: float = 10.0) -> ClusterReport:
    """Flags every window_mm-sided square containing strictly more than
    min_count component centroids; overlapping flagged windows merge into
    one cluster box. Windows slide at a quarter-window stride."""
    if not pixel_spacing_mm > 0:
        raise ValueError(f"pixel_spacing_mm must be > 0, got {pixel_spacing_mm}")
    window = int(round(window_mm / pixel_spacing_mm))
    if window < 1:
        raise ValueError(f"window of {window_mm} mm collapses below one pixel")
    stride = max(1, window // 4)
    h, w = regions.labels.shape
    cent = regions.centroids
    report = ClusterReport(centroids=cent, areas=regions.areas,
                           window_px=window, min_count=min_count)
    if len(cent) <= min_count:
        return report
    flagged = np.zeros((h, w), dtype=bool)
    any_flag = False
    for r0 in _window_origins(h, window, stride):
        in_rows = (cent[:, 0] >= r0) & (cent[:, 0] < r0 + window)
        if in_rows.sum() <= min_count:
            continue
        rows_sel = cent[in_rows, 1]
        for c0 in _window_origins(w, window, stride):
            count = int(((rows_sel >= c0) & (rows_sel < c0 + window)).sum())
            if count > min_count:
                flagged[r0:min(r0 + window, h), c0:min(c0 + window, w)] = True
                any_flag = True
    if not any_flag:
        return report
    merged, k = ndi.label(flagged, structure=EIGHT_CONN)
    for sl in ndi.find_objects(merged, max_label=k):
        r0, r1 = sl[0].start, sl[0].stop
        c0, c1 = sl[1].start, sl[1].stop
        inside = ((cent[:, 0] >= r0) & (cent[:, 0] < r1)
                  & (cent[:, 1] >= c0) & (cent[:, 1] < c1))
        report.clusters.append(ClusterBox(r0, c0, r1, c1, int(inside.sum())))
    return report


def render_report_text(report: ClusterReport) -> str:
    """Structured text: component list, then cluster boxes."""
    lines = [f"components {len(report.areas)}"]
    for i, ((r, c), a) in enumerate(zip(report.centroids, report.areas), start=1):
        lines.append(f"{i}\t{r:.2f}\t{c:.2f}\t{int(a)}")
    lines.append(f"clusters {len(report.clusters)}")
    for i, box in enumerate(report.clusters, start=1):
        lines.append(f"{i}\t{box.r0}\t{box.c0}\t{box.r1}\t{box.c1}\t{box.centroid_count}")
    return "\n".join(lines) + "\n"
