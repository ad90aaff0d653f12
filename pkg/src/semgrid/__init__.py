"""Semantic 3D mapping: scrolling occupancy grid + hierarchical dense-CRF label refinement.

The package is organized around the per-frame mapping loop:

- :mod:`semgrid.core`        label distributions, poses, camera model, kernel parameters
- :mod:`semgrid.grid`        bounded scrolling occupancy grid with ray-traced updates
- :mod:`semgrid.lattice`     permutohedral-lattice Gaussian filtering (+ exact reference)
- :mod:`semgrid.superpixel`  SLIC segmentation and clique construction
- :mod:`semgrid.crf`         hierarchical dense CRF, mean-field inference, naive oracle
- :mod:`semgrid.metrics`     segmentation evaluation (accuracy / IoU / F.W. IoU)
- :mod:`semgrid.pipeline`    end-to-end orchestration used by the CLI
- :mod:`semgrid.io`          all on-disk formats (unary/depth maps, poses, PLY, archives)
"""

from semgrid.core import (
    CameraIntrinsics,
    FeatureVector,
    InvalidDistribution,
    KernelParams,
    Pose,
    neg_log,
    normalize,
)

__all__ = [
    "CameraIntrinsics",
    "FeatureVector",
    "InvalidDistribution",
    "KernelParams",
    "Pose",
    "neg_log",
    "normalize",
]

__version__ = "0.1.0"
