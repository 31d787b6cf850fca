"""Voxel neighborhoods whose series form the q columns of ``Y_t``.

A cluster is the Chebyshev ball of a given radius around a center voxel,
clipped to the mask. Members are ordered center first, then
lexicographically by ``(i, j, k)``, so column 0 is always the center voxel.
"""
from dataclasses import dataclass
import itertools

import numpy as np

from .errors import OutOfBounds, ValidationError, VoxelOutsideMask


@dataclass(frozen=True)
class VolumeMask:
    included: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.included).astype(bool)
        if inc.ndim != 3:
            raise ValidationError(f"mask must be 3-D, got shape {inc.shape}")
        if not inc.any():
            raise ValidationError("mask has no included voxels")
        object.__setattr__(self, "included", inc)

    @property
    def dims(self):
        return self.included.shape

    def voxels(self):
        """Included voxels in lexicographic ``(i, j, k)`` order."""
        return [tuple(int(x) for x in v) for v in np.argwhere(self.included)]

    def __contains__(self, v):
        v = tuple(v)
        return (len(v) == 3 and all(0 <= a < d for a, d in zip(v, self.dims))
                and bool(self.included[v]))

    @classmethod
    def full(cls, dims):
        return cls(np.ones(dims, dtype=bool))


@dataclass(frozen=True)
class ClusterSpec:
    members: tuple

    def __post_init__(self):
        members = tuple(tuple(int(a) for a in v) for v in self.members)
        if not members:
            raise ValidationError("cluster needs at least one member")
        if len(set(members)) != len(members):
            raise ValidationError("cluster members must be distinct")
        object.__setattr__(self, "members", members)

    @property
    def center(self):
        return self.members[0]

    @property
    def q(self):
        return len(self.members)


@dataclass(frozen=True)
class ClusterSeries:
    values: np.ndarray  # (T, q)
    spec: ClusterSpec


def build_cluster(mask, v, radius=1):
    v = tuple(int(a) for a in v)
    if v not in mask:
        raise VoxelOutsideMask(f"voxel {v} is not inside the mask")
    if radius < 0:
        raise ValidationError("radius must be >= 0")
    offsets = range(-radius, radius + 1)
    neighbors = []
    for d in itertools.product(offsets, repeat=3):
        u = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
        if u != v and u in mask:
            neighbors.append(u)
    return ClusterSpec([v] + sorted(neighbors))


def extract_series(data, spec):
    """Column ``j`` is the time series of ``spec.members[j]``.

    ``data`` is a ``(nx, ny, nz, T)`` array (or anything with a ``data``
    attribute holding one).
    """
    if not isinstance(data, np.ndarray):
        data = data.data
    idx = np.asarray(spec.members)
    dims = np.asarray(data.shape[:3])
    if np.any(idx < 0) or np.any(idx >= dims):
        raise OutOfBounds(f"cluster around {spec.center} leaves the volume {tuple(dims)}")
    values = np.asarray(data[idx[:, 0], idx[:, 1], idx[:, 2], :], dtype=float).T
    return ClusterSeries(values, spec)
