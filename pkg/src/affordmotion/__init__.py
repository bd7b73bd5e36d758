"""Language-guided human motion in 3D scenes via scene affordance maps."""
from .geometry import (AffordanceMap, DistanceField, MotionSequence, PointCloud, compute_affordance_map,
                       compute_distance_field, normalize_distance)
from .skeleton import DEFAULT_LAYOUT, SkeletonLayout

__version__ = "0.1.0"
