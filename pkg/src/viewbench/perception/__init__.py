from .cloud import (CoverageSet, ObservedCloud, coverage_set, fuse, surface_coverage)
from .depth import DepthImage, depth_to_points, render_depth
from .occupancy import OccupancyGrid, information_gain, update_occupancy

__all__ = ["CoverageSet", "DepthImage", "ObservedCloud", "OccupancyGrid", "coverage_set", "depth_to_points",
           "fuse", "information_gain", "render_depth", "surface_coverage", "update_occupancy"]
