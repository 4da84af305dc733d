"""Imaging layer: classical primitives, netpbm I/O, phantom generation."""

from .core import (
    DEFAULT_PIXEL_SPACING_MM,
    ClusterBox,
    ClusterReport,
    GrayImage,
    LabeledRegions,
    OtsuResult,
    TileGrid,
    axis_origins,
    connected_components,
    detect_clusters,
    extract_patch,
    extract_patches,
    otsu_threshold,
    render_report_text,
    tile_image,
)
from .pgm import (
    read_mask_pgm,
    read_pgm,
    write_mask_pgm,
    write_pgm,
    write_ppm,
)
from .phantom import (
    PhantomConfig,
    PhantomTruth,
    PlantedCluster,
    PlantedMC,
    generate_phantom,
    write_truth_sidecar,
)

__all__ = [
    "DEFAULT_PIXEL_SPACING_MM", "ClusterBox", "ClusterReport", "GrayImage",
    "LabeledRegions", "OtsuResult", "TileGrid", "axis_origins",
    "connected_components", "detect_clusters", "extract_patch",
    "extract_patches", "otsu_threshold", "render_report_text", "tile_image",
    "read_mask_pgm", "read_pgm", "write_mask_pgm", "write_pgm", "write_ppm",
    "PhantomConfig", "PhantomTruth", "PlantedCluster", "PlantedMC",
    "generate_phantom", "write_truth_sidecar",
]
