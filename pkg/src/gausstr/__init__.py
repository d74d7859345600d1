"""Feed-forward Gaussian occupancy at desk scale.

A transformer lifts multi-view feature and depth maps into a sparse set of 3D
Gaussians.  A differentiable splatting renderer compares them against the
input views for self-supervision, and voxelization turns them into an
open-vocabulary semantic occupancy grid.
"""
import os
import warnings

# numba probes for TBB on import and warns when it is too old; the kernels
# run on the workqueue/omp layers just as well.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
warnings.filterwarnings("ignore", message=".*TBB.*")

from .config import RunConfig, load_config  # noqa: E402
from .errors import (ConfigError, ContractError, DataError, DimensionError, DomainError,  # noqa: E402
                     GaussTRError, NumericalAbort, RankError)
from .gaussians import GaussianSet  # noqa: E402
from .geometry import Camera  # noqa: E402
from .network import GaussTR, NetConfig  # noqa: E402
from .occupancy import GridSpec, OccupancyGrid, TextPrototypes, iou, voxelize  # noqa: E402
from .renderer import render  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Camera", "ConfigError", "ContractError", "DataError", "DimensionError", "DomainError",
    "GaussTR", "GaussTRError", "GaussianSet", "GridSpec", "NetConfig", "NumericalAbort",
    "OccupancyGrid", "RankError", "RunConfig", "TextPrototypes", "iou", "load_config",
    "render", "voxelize",
]
