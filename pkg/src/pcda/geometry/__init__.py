from .cloud import (
    DEFAULT_CLOUD_SIZE,
    DomainTag,
    PointCloud,
    as_points,
    normalize_cloud,
    resample_cloud,
)
from .emd import (
    DEFAULT_EPSILON,
    Assignment,
    batch_mappings,
    emd_approx,
    emd_exact,
    emd_gradient,
    emd_oracle,
    matched_cost,
    pairwise_distances,
    solve,
)

__all__ = [
    "DEFAULT_CLOUD_SIZE",
    "DEFAULT_EPSILON",
    "Assignment",
    "DomainTag",
    "PointCloud",
    "as_points",
    "batch_mappings",
    "emd_approx",
    "emd_exact",
    "emd_gradient",
    "emd_oracle",
    "matched_cost",
    "normalize_cloud",
    "pairwise_distances",
    "resample_cloud",
    "solve",
]
