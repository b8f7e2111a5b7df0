"""Pillar partition: point decoration, grouping, and pseudo-image scatter.

The x-y plane is cut into square cells ("pillars", unbounded in z within
the crop range). Cell indexing is half-open: a point lands in cell
ix = floor((x - x0)/size) and coordinates exactly on the upper range
limit fall outside. The pseudo-image canvas is [C, ny, nx] with row iy
and column ix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .kitti_io import RawPointCloud

LIDAR_CHANNELS = 9  # x, y, z, r, xc, yc, zc, xp, yp


@dataclass
class PillarGridConfig:
    x_range: Tuple[float, float] = (0.0, 69.12)
    y_range: Tuple[float, float] = (-39.68, 39.68)
    z_range: Tuple[float, float] = (-3.0, 1.0)
    pillar_size: float = 0.16
    max_pillars: int = 12000
    max_points_per_pillar: int = 100

    def __post_init__(self):
        if self.pillar_size <= 0:
            raise ConfigError("pillar_size must be positive")
        if self.max_pillars < 1 or self.max_points_per_pillar < 1:
            raise ConfigError("pillar capacities must be at least 1")
        for name, (lo, hi) in (("x_range", self.x_range),
                               ("y_range", self.y_range)):
            span = hi - lo
            if span <= 0:
                raise ConfigError(f"{name} must have positive extent")
            cells = span / self.pillar_size
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigError(
                    f"{name} extent {span} is not a multiple of pillar_size")
        if self.z_range[1] <= self.z_range[0]:
            raise ConfigError("z_range must have positive extent")

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.pillar_size))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.pillar_size))


@dataclass
class DecoratedPoints:
    """Per-point pillar features for the points that survived the crop.

    `point_index` maps each row back to the source cloud so callers can
    pair these channels with other per-point data (e.g. attached RGB).
    """

    features: np.ndarray     # [M, 9]
    coords: np.ndarray       # [M, 2] integer (ix, iy)
    pillar_id: np.ndarray    # [M] = iy * nx + ix
    point_index: np.ndarray  # [M] rows into the original cloud


@dataclass
class PillarBatch:
    """Points grouped contiguously by pillar.

    Rows of `point_features` are sorted by pillar; pillar p owns rows
    starts[p] .. starts[p]+counts[p]. `dense()` exposes the padded
    [P, N, C] view with its validity mask.
    """

    point_features: np.ndarray  # [M, C]
    starts: np.ndarray          # [P]
    counts: np.ndarray          # [P]
    pillar_coords: np.ndarray   # [P, 2] integer (ix, iy)
    point_index: np.ndarray     # [M] rows into the original cloud
    max_points: int

    @property
    def num_pillars(self) -> int:
        return self.pillar_coords.shape[0]

    @property
    def num_points(self) -> int:
        return self.point_features.shape[0]

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        """Padded [P, N, C] features and [P, N] mask; empty slots zero."""
        p = self.num_pillars
        n = self.max_points
        c = self.point_features.shape[1] if self.point_features.ndim == 2 else 0
        features = np.zeros((p, n, c))
        mask = np.zeros((p, n), dtype=bool)
        for i, (lo, cnt) in enumerate(zip(self.starts, self.counts)):
            features[i, :cnt] = self.point_features[lo:lo + cnt]
            mask[i, :cnt] = True
        return features, mask


def decorate_points(cloud: RawPointCloud,
                    config: PillarGridConfig) -> DecoratedPoints:
    """Crop to the grid and compute the 9 per-point pillar channels.

    Mean offsets (xc, yc, zc) use the arithmetic mean over every cropped
    point in the pillar, before any capacity subsampling.
    """
    pts = cloud.xyzr
    if pts.shape[0] == 0:
        empty = np.empty((0, 2), dtype=np.int64)
        return DecoratedPoints(np.empty((0, LIDAR_CHANNELS)), empty,
                               np.empty(0, dtype=np.int64),
                               np.empty(0, dtype=np.int64))
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    size = config.pillar_size
    ix = np.floor((x - config.x_range[0]) / size).astype(np.int64)
    iy = np.floor((y - config.y_range[0]) / size).astype(np.int64)
    keep = ((ix >= 0) & (ix < config.nx) & (iy >= 0) & (iy < config.ny)
            & (z >= config.z_range[0]) & (z < config.z_range[1]))
    index = np.flatnonzero(keep)
    ix, iy = ix[index], iy[index]
    kept = pts[index]
    pid = iy * config.nx + ix

    # Arithmetic mean of (x, y, z) per pillar via dense accumulators over
    # the distinct pillar ids present.
    uniq, inverse, counts = np.unique(pid, return_inverse=True,
                                      return_counts=True)
    sums = np.zeros((uniq.size, 3))
    np.add.at(sums, inverse, kept[:, :3])
    means = sums / counts[:, None]

    offsets_mean = kept[:, :3] - means[inverse]
    center_x = config.x_range[0] + (ix + 0.5) * size
    center_y = config.y_range[0] + (iy + 0.5) * size
    features = np.column_stack([
        kept,                      # x, y, z, r
        offsets_mean,              # xc, yc, zc
        kept[:, 0] - center_x,     # xp
        kept[:, 1] - center_y,     # yp
    ])
    return DecoratedPoints(features=features,
                           coords=np.column_stack([ix, iy]),
                           pillar_id=pid,
                           point_index=index)


def build_pillar_batch(point_features: np.ndarray, decorated: DecoratedPoints,
                       config: PillarGridConfig,
                       rng: np.random.Generator) -> PillarBatch:
    """Group per-point rows by pillar, enforcing the P and N capacities.

    `point_features` is any [M, C] matrix aligned with `decorated` rows
    (the 9 lidar channels, or wider fused vectors). Capacity overflow is
    resolved by uniform subsampling: first over pillars, then over each
    pillar's points in ascending pillar-id order, so a fixed seed fixes
    the batch.
    """
    m = decorated.pillar_id.shape[0]
    if point_features.shape[0] != m:
        raise ContractError("point_features rows must align with decoration")
    if m == 0:
        return PillarBatch(
            point_features=np.empty((0,) + point_features.shape[1:]),
            starts=np.empty(0, dtype=np.int64),
            counts=np.empty(0, dtype=np.int64),
            pillar_coords=np.empty((0, 2), dtype=np.int64),
            point_index=np.empty(0, dtype=np.int64),
            max_points=config.max_points_per_pillar)

    order = np.argsort(decorated.pillar_id, kind="stable")
    pid_sorted = decorated.pillar_id[order]
    uniq, seg_starts, seg_counts = np.unique(
        pid_sorted, return_index=True, return_counts=True)

    pillar_pick = np.arange(uniq.size)
    if uniq.size > config.max_pillars:
        pillar_pick = np.sort(rng.choice(uniq.size, config.max_pillars,
                                         replace=False))

    rows = []
    counts_out = []
    n_cap = config.max_points_per_pillar
    for p in pillar_pick:
        seg = order[seg_starts[p]:seg_starts[p] + seg_counts[p]]
        if seg.size > n_cap:
            seg = seg[np.sort(rng.choice(seg.size, n_cap, replace=False))]
        rows.append(seg)
        counts_out.append(seg.size)
    flat = np.concatenate(rows)
    counts_arr = np.asarray(counts_out, dtype=np.int64)
    starts_arr = np.concatenate([[0], np.cumsum(counts_arr)[:-1]]).astype(np.int64)
    coords = np.column_stack([uniq[pillar_pick] % config.nx,
                              uniq[pillar_pick] // config.nx])
    return PillarBatch(point_features=point_features[flat],
                       starts=starts_arr,
                       counts=counts_arr,
                       pillar_coords=coords,
                       point_index=decorated.point_index[flat],
                       max_points=n_cap)


def scatter_to_pseudo_image(pillar_features: Tensor, coords: np.ndarray,
                            config: PillarGridConfig) -> Tensor:
    """Place [P, C] pillar vectors on the [C, ny, nx] canvas.

    Unoccupied cells stay exactly zero; gradient flows back to the
    pillar vectors. Duplicate coordinates violate the pillar partition.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ContractError("coords must be [P, 2] (ix, iy) pairs")
    if coords.size and (coords[:, 0].min() < 0 or coords[:, 1].min() < 0
                        or coords[:, 0].max() >= config.nx
                        or coords[:, 1].max() >= config.ny):
        raise ContractError("pillar coordinate outside the grid")
    if pillar_features.shape[0] == 0:
        return Tensor(np.zeros((pillar_features.shape[1],
                                config.ny, config.nx)))
    flat_idx = coords[:, 1] * config.nx + coords[:, 0]
    canvas = ad.col_scatter(pillar_features, flat_idx, config.ny * config.nx)
    return ad.reshape(canvas, (pillar_features.shape[1], config.ny, config.nx))
