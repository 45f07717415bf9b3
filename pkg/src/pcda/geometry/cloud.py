"""Point-cloud value type plus normalisation and resampling."""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from ._kernels import fps_indices

DEFAULT_CLOUD_SIZE = 1024


class DomainTag(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One object: ``points`` is an (N, 3) array, ``label`` a class index."""

    points: np.ndarray
    label: Optional[int] = None
    domain_tag: DomainTag = DomainTag.SOURCE

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (N, 3) with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        tag = DomainTag(self.domain_tag)
        if self.label is None and tag is not DomainTag.TARGET:
            raise ValueError(f"{tag.value} clouds must carry a label")
        if self.label is not None and int(self.label) < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "domain_tag", tag)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)


def as_points(cloud) -> np.ndarray:
    """Accept a PointCloud or anything array-like of shape (N, 3)."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array, got shape {pts.shape}")
    return pts


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide is only centred.
    """
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1)).max()
    if radius > 0:
        pts = pts / radius
    return cloud.with_points(pts)


def resample_cloud(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Bring ``cloud`` to exactly ``n`` points.

    Larger clouds are reduced by farthest-point sampling from a seeded random
    start; smaller ones keep every point and are padded with seeded draws
    (with replacement).
    """
    if n <= 0:
        raise ValueError(f"target point count must be positive, got {n}")
    rng = np.random.default_rng(seed)
    total = len(cloud)
    if total >= n:
        start = int(rng.integers(total))
        idx = fps_indices(cloud.points, n, start)
    else:
        extra = rng.integers(total, size=n - total)
        idx = np.concatenate([np.arange(total), extra])
    return cloud.with_points(cloud.points[idx])
