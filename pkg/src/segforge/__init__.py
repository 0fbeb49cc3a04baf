"""segforge: a desk-scale workbench for studying label noise in brain MRI segmentation.

The package covers the full loop: synthetic multi-class brain phantoms,
simulated reconstruction variants, rigid registration used to manufacture
noisy training labels, a small from-scratch autodiff engine with a 2D U-Net
on top, and per-class overlap/surface-distance evaluation.
"""

from segforge.grid import (
    LABEL_NAMES,
    NUM_CLASSES,
    GridError,
    LabelMap,
    RigidTransform,
    Volume,
    VolumeFormatError,
    read_volume,
    resample,
    same_grid,
    write_volume,
)

__version__ = "0.1.0"

__all__ = [
    "LABEL_NAMES",
    "NUM_CLASSES",
    "GridError",
    "LabelMap",
    "RigidTransform",
    "Volume",
    "VolumeFormatError",
    "read_volume",
    "resample",
    "same_grid",
    "write_volume",
    "__version__",
]
