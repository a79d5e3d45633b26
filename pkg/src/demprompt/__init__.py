"""Prompt-guided monocular elevation estimation at desk scale.

Subpackages/modules:

    raster      geo-referenced grids, the .r32g file format, resampling, tiling
    terrain     synthetic scenes (DSM/DTM, pseudo-RGB, degraded prompts)
    autodiff    small reverse-mode autodiff engine and Adam
    model       prompt-fusion ViT/DPT network, scene classifier, weight files
    training    edge-aware loss, prompt regimes, training loops
    mosaic      distance-weighted blending of overlapping patch predictions
    hydrology   priority-flood fill, D8 routing, streams, segmentation metrics
    evaluation  elevation/slope/aspect errors, distribution stats, reports
    plotting    matplotlib figures for reports
    cli         command-line entry point
"""

__version__ = "0.1.0"
