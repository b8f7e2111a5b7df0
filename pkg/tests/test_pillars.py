"""Pillar partition: decoration channels against a per-point loop oracle,
half-open cell edges, capacity subsampling determinism, canvas scatter."""

import numpy as np
import pytest

from pillarfuse.autodiff import Tensor
from pillarfuse.errors import ConfigError, ContractError
from pillarfuse.kitti_io import RawPointCloud
from pillarfuse.pillars import (PillarGridConfig, build_pillar_batch,
                                decorate_points, scatter_to_pseudo_image)

GRID = PillarGridConfig(x_range=(0.0, 8.0), y_range=(-4.0, 4.0),
                        z_range=(-3.0, 1.0), pillar_size=1.0,
                        max_pillars=64, max_points_per_pillar=8)


def random_cloud(rng, n=200):
    xyzr = np.column_stack([
        rng.uniform(-1.0, 9.0, size=n),      # some outside x range
        rng.uniform(-5.0, 5.0, size=n),      # some outside y range
        rng.uniform(-4.0, 2.0, size=n),      # some outside z range
        rng.uniform(0.0, 1.0, size=n)])
    return RawPointCloud(xyzr)


def decoration_oracle(pts, config):
    """Independent per-point recomputation of crop and channels."""
    rows = []
    kept_idx = []
    for i, (x, y, z, r) in enumerate(pts):
        ix = int(np.floor((x - config.x_range[0]) / config.pillar_size))
        iy = int(np.floor((y - config.y_range[0]) / config.pillar_size))
        if not (0 <= ix < config.nx and 0 <= iy < config.ny):
            continue
        if not (config.z_range[0] <= z < config.z_range[1]):
            continue
        kept_idx.append(i)
        rows.append((ix, iy))
    channels = np.zeros((len(kept_idx), 9))
    for j, (i, (ix, iy)) in enumerate(zip(kept_idx, rows)):
        x, y, z, r = pts[i]
        mates = [k for k, (jx, jy) in zip(kept_idx, rows)
                 if (jx, jy) == (ix, iy)]
        mean = pts[mates, :3].mean(axis=0)
        cx = config.x_range[0] + (ix + 0.5) * config.pillar_size
        cy = config.y_range[0] + (iy + 0.5) * config.pillar_size
        channels[j] = [x, y, z, r, x - mean[0], y - mean[1], z - mean[2],
                       x - cx, y - cy]
    return np.asarray(kept_idx, dtype=np.int64), channels


# -- grid config -------------------------------------------------------------------


def test_grid_cell_counts():
    assert GRID.nx == 8
    assert GRID.ny == 8
    full = PillarGridConfig()
    assert (full.nx, full.ny) == (432, 496)


@pytest.mark.parametrize("kwargs", [
    {"pillar_size": 0.0},
    {"pillar_size": 0.7},                  # 8.0 not divisible by 0.7
    {"x_range": (4.0, 4.0)},
    {"z_range": (1.0, -3.0)},
    {"max_pillars": 0},
])
def test_grid_config_validation(kwargs):
    base = dict(x_range=(0.0, 8.0), y_range=(-4.0, 4.0),
                z_range=(-3.0, 1.0), pillar_size=1.0)
    base.update(kwargs)
    with pytest.raises(ConfigError):
        PillarGridConfig(**base)


# -- decoration -------------------------------------------------------------------


def test_decoration_matches_loop_oracle():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng)
    decorated = decorate_points(cloud, GRID)
    kept_idx, channels = decoration_oracle(cloud.xyzr, GRID)
    np.testing.assert_array_equal(decorated.point_index, kept_idx)
    np.testing.assert_allclose(decorated.features, channels, atol=1e-12)
    np.testing.assert_array_equal(
        decorated.pillar_id,
        decorated.coords[:, 1] * GRID.nx + decorated.coords[:, 0])


def test_half_open_cell_edges():
    pts = np.array([
        [0.0, 0.0, 0.0, 0.5],    # exactly on the lower x edge: inside
        [8.0, 0.0, 0.0, 0.5],    # exactly on the upper x edge: outside
        [4.0, 4.0, 0.0, 0.5],    # upper y edge: outside
        [4.0, -4.0, 0.0, 0.5],   # lower y edge: inside
        [4.0, 0.0, 1.0, 0.5],    # upper z edge: outside
        [4.0, 0.0, -3.0, 0.5],   # lower z edge: inside
    ])
    decorated = decorate_points(RawPointCloud(pts), GRID)
    np.testing.assert_array_equal(decorated.point_index, [0, 3, 5])


def test_mean_offsets_average_to_zero_per_pillar():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, n=400)
    decorated = decorate_points(cloud, GRID)
    for pid in np.unique(decorated.pillar_id):
        rows = decorated.features[decorated.pillar_id == pid]
        np.testing.assert_allclose(rows[:, 4:7].mean(axis=0),
                                   np.zeros(3), atol=1e-9)


def test_center_offsets_bounded_by_half_cell():
    rng = np.random.default_rng(2)
    decorated = decorate_points(random_cloud(rng), GRID)
    assert np.abs(decorated.features[:, 7:9]).max() <= 0.5 * GRID.pillar_size


def test_empty_cloud_decorates_to_empty():
    decorated = decorate_points(RawPointCloud(np.empty((0, 4))), GRID)
    assert decorated.features.shape == (0, 9)
    assert decorated.point_index.size == 0


# -- batching -------------------------------------------------------------------


def test_batch_groups_points_contiguously_by_pillar():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng)
    decorated = decorate_points(cloud, GRID)
    batch = build_pillar_batch(decorated.features, decorated, GRID,
                               np.random.default_rng(0))
    assert batch.num_pillars == np.unique(decorated.pillar_id).size
    # each segment holds exactly the rows of one pillar
    for p in range(batch.num_pillars):
        lo = batch.starts[p]
        seg = batch.point_features[lo:lo + batch.counts[p]]
        ix, iy = batch.pillar_coords[p]
        pid = iy * GRID.nx + ix
        original = decorated.features[decorated.pillar_id == pid]
        assert seg.shape == original.shape
        np.testing.assert_allclose(np.sort(seg, axis=0),
                                   np.sort(original, axis=0))


def test_batch_accepts_wider_feature_matrices():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, n=50)
    decorated = decorate_points(cloud, GRID)
    wide = np.column_stack([decorated.features,
                            rng.normal(size=(decorated.features.shape[0], 3))])
    batch = build_pillar_batch(wide, decorated, GRID,
                               np.random.default_rng(0))
    assert batch.point_features.shape[1] == 12


def test_batch_rejects_misaligned_features():
    rng = np.random.default_rng(5)
    decorated = decorate_points(random_cloud(rng, n=50), GRID)
    with pytest.raises(ContractError):
        build_pillar_batch(np.zeros((3, 9)), decorated, GRID,
                           np.random.default_rng(0))


def test_point_capacity_subsampling_is_seeded_and_ordered():
    # one pillar with 30 points, capacity 8
    pts = np.column_stack([
        np.full(30, 0.5), np.full(30, -3.5),
        np.linspace(-2.9, 0.9, 30), np.linspace(0.0, 1.0, 30)])
    config = PillarGridConfig(x_range=(0.0, 8.0), y_range=(-4.0, 4.0),
                              z_range=(-3.0, 1.0), pillar_size=1.0,
                              max_pillars=64, max_points_per_pillar=8)
    decorated = decorate_points(RawPointCloud(pts), config)
    a = build_pillar_batch(decorated.features, decorated, config,
                           np.random.default_rng(7))
    b = build_pillar_batch(decorated.features, decorated, config,
                           np.random.default_rng(7))
    assert a.counts.tolist() == [8]
    np.testing.assert_array_equal(a.point_index, b.point_index)
    # subsampled rows keep their original relative order
    assert (np.diff(a.point_index) > 0).all()


def test_pillar_capacity_subsampling_keeps_ascending_id_order():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, n=300)
    config = PillarGridConfig(x_range=(0.0, 8.0), y_range=(-4.0, 4.0),
                              z_range=(-3.0, 1.0), pillar_size=1.0,
                              max_pillars=10, max_points_per_pillar=8)
    decorated = decorate_points(cloud, config)
    assert np.unique(decorated.pillar_id).size > 10
    batch = build_pillar_batch(decorated.features, decorated, config,
                               np.random.default_rng(1))
    assert batch.num_pillars == 10
    pids = batch.pillar_coords[:, 1] * config.nx + batch.pillar_coords[:, 0]
    assert (np.diff(pids) > 0).all()


def test_dense_view_pads_with_zeros_and_masks_real_rows():
    rng = np.random.default_rng(8)
    decorated = decorate_points(random_cloud(rng, n=60), GRID)
    batch = build_pillar_batch(decorated.features, decorated, GRID,
                               np.random.default_rng(0))
    features, mask = batch.dense()
    assert features.shape == (batch.num_pillars, GRID.max_points_per_pillar,
                              9)
    assert mask.sum() == batch.num_points
    assert (features[~mask] == 0.0).all()
    for p in range(batch.num_pillars):
        cnt = batch.counts[p]
        np.testing.assert_array_equal(
            features[p, :cnt],
            batch.point_features[batch.starts[p]:batch.starts[p] + cnt])


def test_empty_decoration_builds_empty_batch():
    decorated = decorate_points(RawPointCloud(np.empty((0, 4))), GRID)
    batch = build_pillar_batch(decorated.features, decorated, GRID,
                               np.random.default_rng(0))
    assert batch.num_pillars == 0
    assert batch.num_points == 0


# -- scatter -------------------------------------------------------------------


def test_scatter_places_features_at_row_iy_col_ix():
    features = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    coords = np.array([[2, 1], [0, 3]])  # (ix, iy)
    canvas = scatter_to_pseudo_image(features, coords, GRID)
    assert canvas.shape == (2, GRID.ny, GRID.nx)
    assert canvas.data[0, 1, 2] == 1.0
    assert canvas.data[1, 1, 2] == 2.0
    assert canvas.data[0, 3, 0] == 3.0
    assert float(np.abs(canvas.data).sum()) == 10.0


def test_scatter_gradient_routes_back_to_pillars():
    features = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]),
                      requires_grad=True)
    coords = np.array([[5, 5], [1, 0]])
    canvas = scatter_to_pseudo_image(features, coords, GRID)
    (canvas * canvas).sum().backward()
    np.testing.assert_allclose(features.grad, 2.0 * features.data)


def test_scatter_rejects_out_of_grid_coords():
    features = Tensor(np.ones((1, 2)))
    with pytest.raises(ContractError):
        scatter_to_pseudo_image(features, np.array([[8, 0]]), GRID)


def test_scatter_of_empty_batch_is_zero_canvas():
    features = Tensor(np.empty((0, 4)))
    canvas = scatter_to_pseudo_image(features, np.empty((0, 2)), GRID)
    assert canvas.shape == (4, GRID.ny, GRID.nx)
    assert (canvas.data == 0.0).all()
