"""Patch taxonomy, index construction, and balanced minibatch sampling.

A patch is classified by where the nearest annotated pixel sits relative
to its center: CENTER (the center pixel itself is annotated), NEAR (an
annotated pixel within Chebyshev distance 1..3 of the center), PERIPHERAL
(annotated pixels elsewhere in the window), BACKGROUND (none at all).
The detection head treats CENTER/NEAR/PERIPHERAL as positive; the
segmentation head treats only CENTER as positive.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .imaging import GrayImage, extract_patch, extract_patches, otsu_threshold, read_mask_pgm, read_pgm

NEAR_RADIUS = 3  # Chebyshev band around the center that makes a patch NEAR
TARGETS = ("detector", "segmentator")


class PatchClass(enum.Enum):
    CENTER = "center"
    NEAR = "near"
    PERIPHERAL = "peripheral"
    BACKGROUND = "background"


CLASS_ORDER = (PatchClass.CENTER, PatchClass.NEAR, PatchClass.PERIPHERAL,
               PatchClass.BACKGROUND)
POSITIVE_CLASSES = {
    "detector": (PatchClass.CENTER, PatchClass.NEAR, PatchClass.PERIPHERAL),
    "segmentator": (PatchClass.CENTER,),
}
NEGATIVE_CLASSES = {
    "detector": (PatchClass.BACKGROUND,),
    "segmentator": (PatchClass.NEAR, PatchClass.PERIPHERAL,
                    PatchClass.BACKGROUND),
}


def _check_target(target: str):
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")


def target_label(patch_class: PatchClass, target: str) -> int:
    """0 = negative, 1 = positive for the given head."""
    _check_target(target)
    return int(patch_class in POSITIVE_CLASSES[target])


def assign_patch_class(mask, center: tuple[int, int], patch_size: int) -> PatchClass:
    """Class of the patch centered at (row, col); windows clip at borders."""
    mask = np.asarray(mask).astype(bool, copy=False)
    h, w = mask.shape
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"center {center} outside mask of shape {mask.shape}")
    n = int(patch_size)
    if n < 1 or n % 2 == 0:
        raise ValueError(f"patch_size must be a positive odd int, got {n}")
    if mask[r, c]:
        return PatchClass.CENTER
    b = NEAR_RADIUS
    if mask[max(r - b, 0):r + b + 1, max(c - b, 0):c + b + 1].any():
        return PatchClass.NEAR
    half = n // 2
    if mask[max(r - half, 0):r + half + 1, max(c - half, 0):c + half + 1].any():
        return PatchClass.PERIPHERAL
    return PatchClass.BACKGROUND


def dihedral_augment(patch: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 square symmetries: k % 4 quarter turns, then a
    horizontal mirror when k >= 4. k = 0 is the identity."""
    if not 0 <= k < 8:
        raise ValueError(f"transform index must be in 0..7, got {k}")
    patch = np.asarray(patch)
    if patch.shape[-2] != patch.shape[-1]:
        raise ValueError(f"square patches only, got shape {patch.shape}")
    out = np.rot90(patch, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


# --------------------------------------------------------------- index

@dataclass(frozen=True)
class PatchRecord:
    image_path: str
    cx: int  # column of the patch center
    cy: int  # row of the patch center
    patch_class: PatchClass


@dataclass
class PatchIndex:
    """Per-class patch records plus the image/mask manifest."""

    patch_size: int
    records_by_class: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)  # image path -> mask path
    _images: dict = field(default_factory=dict, repr=False)
    _masks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for cls in CLASS_ORDER:
            self.records_by_class.setdefault(cls, [])

    @property
    def counts(self) -> dict:
        return {cls: len(rs) for cls, rs in self.records_by_class.items()}

    def __len__(self):
        return sum(len(rs) for rs in self.records_by_class.values())

    def records(self, classes=CLASS_ORDER) -> list[PatchRecord]:
        return [r for cls in classes for r in self.records_by_class[cls]]

    def load_image(self, path: str) -> GrayImage:
        if path not in self._images:
            self._images[path] = read_pgm(path)
        return self._images[path]

    def load_mask(self, path: str) -> np.ndarray:
        if path not in self._masks:
            self._masks[path] = read_mask_pgm(self.manifest[path])
        return self._masks[path]


def build_patch_index(pairs, patch_size: int, peripheral_cap_factor: int = 50,
                      background_cap_factor: int = 200, seed: int = 0) -> PatchIndex:
    """Index of patch centers over (image_path, mask_path) pairs.

    Every annotated pixel becomes a CENTER record and every pixel of the
    surrounding Chebyshev-1..3 band a NEAR record. PERIPHERAL and
    BACKGROUND centers are uniformly subsampled, capped at the given
    multiples of the total CENTER count; BACKGROUND candidates are drawn
    from the Otsu foreground only.
    """
    n = int(patch_size)
    if n < 1 or n % 2 == 0:
        raise ValueError(f"patch_size must be a positive odd int, got {n}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no image/mask pairs given")
    index = PatchIndex(patch_size=n)
    zones = []
    total_center = 0
    for image_path, mask_path in pairs:
        index.manifest[str(image_path)] = str(mask_path)
        image = index.load_image(str(image_path))
        mask = index.load_mask(str(image_path))
        if mask.shape != image.pixels.shape:
            raise ValueError(f"mask {mask_path} does not match image {image_path}")
        box = 2 * NEAR_RADIUS + 1
        near_zone = ndi.maximum_filter(mask, size=box, mode="constant") & ~mask
        window_hit = ndi.maximum_filter(mask, size=n, mode="constant")
        otsu = otsu_threshold(image.pixels)
        foreground = image.pixels > otsu.threshold
        peripheral_zone = window_hit & ~mask & ~near_zone
        background_zone = ~window_hit & foreground
        zones.append((str(image_path), mask, near_zone, peripheral_zone,
                      background_zone))
        total_center += int(mask.sum())
    peripheral_cap = peripheral_cap_factor * total_center
    background_cap = background_cap_factor * total_center
    for img_idx, (path, mask, near_zone, peripheral_zone, background_zone) \
            in enumerate(zones):
        rng = np.random.default_rng([seed, img_idx])
        for r, c in np.argwhere(mask):
            index.records_by_class[PatchClass.CENTER].append(
                PatchRecord(path, int(c), int(r), PatchClass.CENTER))
        for r, c in np.argwhere(near_zone):
            index.records_by_class[PatchClass.NEAR].append(
                PatchRecord(path, int(c), int(r), PatchClass.NEAR))
        for zone, cap, cls in ((peripheral_zone, peripheral_cap, PatchClass.PERIPHERAL),
                               (background_zone, background_cap, PatchClass.BACKGROUND)):
            quota = cap // len(zones) + (1 if img_idx < cap % len(zones) else 0)
            coords = np.argwhere(zone)
            if len(coords) > quota:
                coords = coords[rng.choice(len(coords), quota, replace=False)]
            for r, c in coords:
                index.records_by_class[cls].append(
                    PatchRecord(path, int(c), int(r), cls))
    return index


def save_index(index: PatchIndex, index_path, manifest_path=None):
    """Tab-separated record lines (image_path, cx, cy, class); optionally a
    manifest file of (image_path, mask_path) lines."""
    with open(index_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for cls in CLASS_ORDER:
            for rec in index.records_by_class[cls]:
                writer.writerow([rec.image_path, rec.cx, rec.cy,
                                 rec.patch_class.value])
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for image_path, mask_path in index.manifest.items():
                writer.writerow([image_path, mask_path])


def load_manifest(manifest_path) -> list[tuple[str, str]]:
    pairs = []
    with open(manifest_path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"manifest rows need 2 columns, got {row}")
            pairs.append((row[0], row[1]))
    return pairs


def load_index(index_path, patch_size: int, manifest_path=None) -> PatchIndex:
    """Rebuilds a PatchIndex from its record file (and manifest, if given)."""
    index = PatchIndex(patch_size=int(patch_size))
    by_value = {cls.value: cls for cls in PatchClass}
    with open(index_path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row:
                continue
            if len(row) != 4 or row[3] not in by_value:
                raise ValueError(f"bad index row: {row}")
            cls = by_value[row[3]]
            index.records_by_class[cls].append(
                PatchRecord(row[0], int(row[1]), int(row[2]), cls))
    if manifest_path is not None:
        index.manifest.update(load_manifest(manifest_path))
    return index


def split_index_by_image(index: PatchIndex, fraction: float, seed: int = 0):
    """(train, held_out) split with whole images assigned to one side."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    paths = sorted({rec.image_path for rec in index.records()})
    rng = np.random.default_rng([seed, 0x5711])
    rng.shuffle(paths)
    n_held = max(1, int(round(fraction * len(paths))))
    if n_held >= len(paths):
        raise ValueError("split leaves no training images")
    held = set(paths[:n_held])
    out = []
    for keep_held in (False, True):
        part = PatchIndex(patch_size=index.patch_size)
        part.manifest = dict(index.manifest)
        part._images = index._images
        part._masks = index._masks
        for cls in CLASS_ORDER:
            part.records_by_class[cls] = [
                r for r in index.records_by_class[cls]
                if (r.image_path in held) == keep_held]
        out.append(part)
    return out[0], out[1]


# --------------------------------------------------------------- sampling

def _split_evenly(total: int, ways: int) -> list[int]:
    base, rem = divmod(total, ways)
    return [base + (1 if i < rem else 0) for i in range(ways)]


def _draw_records(rng, records: list, count: int) -> list:
    if count == 0:
        return []
    replace = count > len(records)
    picks = rng.choice(len(records), size=count, replace=replace)
    return [records[int(i)] for i in picks]


def patches_for_records(index: PatchIndex, records) -> np.ndarray:
    """(n, 1, N, N) float64 patches scaled to [0, 1], order preserved."""
    n = index.patch_size
    out = np.empty((len(records), 1, n, n), dtype=np.float64)
    by_image: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        by_image.setdefault(rec.image_path, []).append(i)
    for path, rows in by_image.items():
        image = index.load_image(path)
        centers = [(records[i].cy, records[i].cx) for i in rows]
        stack = extract_patches(image, centers, n).astype(np.float64)
        out[rows, 0] = stack / image.max_value
    return out


def sample_minibatch(index: PatchIndex, target: str, batch_size: int, seed):
    """Balanced training minibatch: half positive, half negative, classes
    even within each side, each patch under a random dihedral transform.

    Returns (patches (B, 1, N, N) float64 in [0, 1], one-hot labels (B, 2))
    with rows shuffled. Column 1 of the labels is the positive class.
    """
    _check_target(target)
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    rng = np.random.default_rng(seed)
    chosen: list[PatchRecord] = []
    labels: list[int] = []
    for label, side in ((1, POSITIVE_CLASSES[target]),
                        (0, NEGATIVE_CLASSES[target])):
        quotas = _split_evenly(batch_size // 2, len(side))
        for cls, quota in zip(side, quotas):
            records = index.records_by_class[cls]
            if quota > 0 and not records:
                raise ValueError(
                    f"no {cls.value} records available for the {target} sampler")
            chosen.extend(_draw_records(rng, records, quota))
            labels.extend([label] * quota)
    x = patches_for_records(index, chosen)
    for i in range(len(chosen)):
        x[i, 0] = dihedral_augment(x[i, 0], int(rng.integers(8)))
    y = np.zeros((batch_size, 2), dtype=np.float64)
    y[np.arange(batch_size), labels] = 1.0
    order = rng.permutation(batch_size)
    return x[order], y[order]


def sample_eval_set(index: PatchIndex, target: str, size: int, seed):
    """Balanced un-augmented sample for validation/accuracy measurements.

    Returns (patches, one-hot labels, records). Classes are evened within
    each side exactly like the training sampler.
    """
    _check_target(target)
    if size < 2 or size % 2:
        raise ValueError(f"size must be even and >= 2, got {size}")
    rng = np.random.default_rng(seed)
    chosen: list[PatchRecord] = []
    labels: list[int] = []
    for label, side in ((1, POSITIVE_CLASSES[target]),
                        (0, NEGATIVE_CLASSES[target])):
        present = [cls for cls in side if index.records_by_class[cls]]
        if not present:
            raise ValueError(f"no {'positive' if label else 'negative'} records "
                             f"for the {target} sampler")
        quotas = _split_evenly(size // 2, len(present))
        for cls, quota in zip(present, quotas):
            chosen.extend(_draw_records(rng, index.records_by_class[cls], quota))
            labels.extend([label] * quota)
    x = patches_for_records(index, chosen)
    y = np.zeros((size, 2), dtype=np.float64)
    y[np.arange(size), labels] = 1.0
    return x, y, chosen
