"""Synthetic desk-scale dataset generator.

Builds small KITTI-layout frames entirely from a seeded RNG: boxy car
point clusters on a ground plane, plus optional decoy objects that share
the car geometry but carry a different paint color and no label.  The
camera image is a flat background with one filled rectangle per object,
drawn far-to-near, so attached point colors separate cars from decoys
while lidar shape does not.

Poses are rejection-sampled until the whole box projects inside the
raster with a comfortably tall 2D bbox, so every generated car is
countable at moderate difficulty.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .config import GridSection, RunConfig, SynthSection
from .errors import ContractError
from .geometry import Box3D, bev_iou
from .kitti_io import (CalibrationSet, GroundTruthLabel, ImageRaster,
                       RawPointCloud, frame_paths, label_from_lidar_box,
                       project_points, standard_calibration, write_calibration,
                       write_image, write_labels, write_pointcloud)

GROUND_Z = -1.8
CAR_COLOR = (205, 62, 54)
DECOY_COLOR = (58, 96, 208)
BACKGROUND_COLOR = (110, 110, 110)

# rejection-sampled poses must clear this projected bbox height so the
# object stays countable under the moderate-difficulty filter (25 px)
MIN_BBOX_HEIGHT = 28.0

_PLACEMENT_TRIES = 400


@dataclass
class GeneratedFrame:
    cloud: RawPointCloud
    image: ImageRaster
    calib: CalibrationSet
    labels: List[GroundTruthLabel]   # cars only; decoys stay unlabeled
    car_boxes: List[Box3D]
    decoy_boxes: List[Box3D]


def _corners_imaged(box: Box3D, calib: CalibrationSet,
                    image: ImageRaster) -> Optional[float]:
    """Projected bbox height if all 8 corners image, else None."""
    corners = box.corners_3d()
    cloud = RawPointCloud(np.column_stack([corners, np.zeros(8)]))
    proj = project_points(cloud, calib, image)
    if not proj.valid.all():
        return None
    return float(proj.v.max() - proj.v.min())


def _sample_pose(rng: np.random.Generator, grid: GridSection,
                 calib: CalibrationSet, image: ImageRaster,
                 placed: List[Box3D]) -> Box3D:
    """Draw a collision-free, fully imaged box pose."""
    x_lo = max(grid.x_range[0], 5.5)
    x_hi = min(grid.x_range[1] - 2.5, 10.5)
    y_lo = max(grid.y_range[0] + 2.5, -4.0)
    y_hi = min(grid.y_range[1] - 2.5, 4.0)
    for _ in range(_PLACEMENT_TRIES):
        w = rng.uniform(1.55, 1.75)
        l = rng.uniform(3.6, 4.2)
        h = rng.uniform(1.5, 1.7)
        box = Box3D(cx=rng.uniform(x_lo, x_hi),
                    cy=rng.uniform(y_lo, y_hi),
                    cz=GROUND_Z + 0.5 * h,
                    w=w, l=l, h=h,
                    yaw=rng.uniform(-math.pi, math.pi))
        if any(bev_iou(box, other) > 0.0 for other in placed):
            continue
        height = _corners_imaged(box, calib, image)
        if height is None or height < MIN_BBOX_HEIGHT:
            continue
        return box
    raise ContractError("could not place an object after %d tries; "
                        "grid or image too small" % _PLACEMENT_TRIES)


def _box_points(rng: np.random.Generator, box: Box3D, count: int) -> np.ndarray:
    """Uniform interior samples of a box, as [count, 4] xyzr rows."""
    local = np.column_stack([
        rng.uniform(-0.5 * box.l, 0.5 * box.l, size=count),
        rng.uniform(-0.5 * box.w, 0.5 * box.w, size=count),
        rng.uniform(-0.5 * box.h, 0.5 * box.h, size=count)])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * local[:, 0] - s * local[:, 1] + box.cx
    y = s * local[:, 0] + c * local[:, 1] + box.cy
    z = local[:, 2] + box.cz
    refl = rng.uniform(0.3, 0.9, size=count)
    return np.column_stack([x, y, z, refl])


def _ground_points(rng: np.random.Generator, grid: GridSection,
                   count: int) -> np.ndarray:
    x = rng.uniform(grid.x_range[0] + 0.2, grid.x_range[1] - 0.2, size=count)
    y = rng.uniform(grid.y_range[0] + 0.2, grid.y_range[1] - 0.2, size=count)
    z = GROUND_Z + rng.normal(0.0, 0.02, size=count)
    z = np.clip(z, grid.z_range[0] + 0.05, grid.z_range[1] - 0.05)
    refl = rng.uniform(0.05, 0.5, size=count)
    return np.column_stack([x, y, z, refl])


def _paint_rectangles(image: ImageRaster, calib: CalibrationSet,
                      boxes: List[Tuple[Box3D, Tuple[int, int, int]]]) -> None:
    """Fill each object's projected bbox, far objects first."""
    for box, color in sorted(boxes, key=lambda bc: -bc[0].cx):
        corners = box.corners_3d()
        cloud = RawPointCloud(np.column_stack([corners, np.zeros(8)]))
        proj = project_points(cloud, calib, image)
        if not proj.valid.any():
            continue
        u0 = int(np.clip(math.floor(proj.u.min()), 0, image.width - 1))
        u1 = int(np.clip(math.ceil(proj.u.max()), 0, image.width - 1))
        v0 = int(np.clip(math.floor(proj.v.min()), 0, image.height - 1))
        v1 = int(np.clip(math.ceil(proj.v.max()), 0, image.height - 1))
        image.rgb[v0:v1 + 1, u0:u1 + 1] = color


def generate_frame(rng: np.random.Generator, synth: SynthSection,
                   grid: GridSection) -> GeneratedFrame:
    calib = standard_calibration(synth.image_width, synth.image_height,
                                 focal=synth.focal_length)
    rgb = np.empty((synth.image_height, synth.image_width, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_COLOR
    image = ImageRaster(rgb)

    placed: List[Box3D] = []
    car_boxes = []
    for _ in range(synth.cars_per_frame):
        box = _sample_pose(rng, grid, calib, image, placed)
        placed.append(box)
        car_boxes.append(box)
    decoy_boxes = []
    for _ in range(synth.decoys_per_frame):
        box = _sample_pose(rng, grid, calib, image, placed)
        placed.append(box)
        decoy_boxes.append(box)

    _paint_rectangles(image, calib,
                      [(b, CAR_COLOR) for b in car_boxes]
                      + [(b, DECOY_COLOR) for b in decoy_boxes])

    chunks = [_box_points(rng, b, synth.points_per_car) for b in placed]
    chunks.append(_ground_points(rng, grid, synth.ground_points))
    cloud = RawPointCloud(np.concatenate(chunks, axis=0))

    labels = [label_from_lidar_box(b, calib, image) for b in car_boxes]
    return GeneratedFrame(cloud=cloud, image=image, calib=calib,
                          labels=labels, car_boxes=car_boxes,
                          decoy_boxes=decoy_boxes)


def write_dataset(root, cfg: RunConfig, seed: Optional[int] = None,
                  frames: Optional[int] = None) -> List[str]:
    """Generate and write a KITTI-layout dataset; returns the frame ids."""
    if seed is None:
        seed = cfg.seed
    if frames is None:
        frames = cfg.synth.frames
    root = Path(root)
    for sub in ("velodyne", "calib", "image_2", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(frames):
        frame = generate_frame(rng, cfg.synth, cfg.grid)
        frame_id = "%06d" % i
        paths = frame_paths(root, frame_id)
        write_pointcloud(paths["velodyne"], frame.cloud)
        write_calibration(paths["calib"], frame.calib)
        write_image(paths["image"], frame.image)
        write_labels(paths["label"], frame.labels)
        ids.append(frame_id)
    return ids
