"""loopcycle: lattice Monte Carlo laboratory for critical loop soups,
cable-graph GFF sign clusters, and macroscopic winding cycles."""

__version__ = "0.1.0"

from .lattice import (BoxConfig, CablePoint, Tube, TubeFamily, dist_to_tube,
                      hausdorff_distance, neighbors, path_winding, tube_family,
                      winding_increment)

__all__ = [
    "BoxConfig", "CablePoint", "Tube", "TubeFamily", "dist_to_tube",
    "hausdorff_distance", "neighbors", "path_winding", "tube_family",
    "winding_increment", "__version__",
]
