"""blurscan: desk-scale simulator and processing pipeline for motion-blurred
continuous slide scanning.

Modules:

- imaging: raster types, the scan-axis box-blur forward operator, containers
- synthscan: synthetic stained slides, serpentine planning, frame rendering
- stitcher: blind scan-structure recovery and mosaic composition
- coreprep: white balance, core segmentation, grid labeling, patch stacks
- classify: feature baseline classifier and prediction import/export
- triage: 3-repeat aggregation, thresholding, sweeps, confusion, ROC
- pipeline/cli: stage orchestration over the documented file formats
"""

from .imaging import (
    BlurSpec,
    FrameManifest,
    FrameSequence,
    GrayRaster,
    Raster,
    blur_raster,
    blur_width,
    effective_scale,
    read_raster,
    read_sequence,
    to_gray,
    write_raster,
    write_sequence,
)

__version__ = "0.1.0"
