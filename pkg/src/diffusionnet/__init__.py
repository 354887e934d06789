"""Surface learning with learned heat diffusion, spatial gradient features
and pointwise MLPs, on meshes and point clouds."""

from .geometry import (PointCloud, Shape, SurfaceMesh, load_shape, normalized, save_shape)
from .network import NetworkConfig, init_params, network_forward
from .operators import GeometryOperators, compute_operators, load_operators, save_operators
from .training import TrainConfig, evaluate, fit

__all__ = [
    "PointCloud", "Shape", "SurfaceMesh", "load_shape", "save_shape", "normalized",
    "NetworkConfig", "init_params", "network_forward",
    "GeometryOperators", "compute_operators", "load_operators", "save_operators",
    "TrainConfig", "fit", "evaluate",
]

__version__ = "0.1.0"
