"""Ground-truth sampling and global augmentation.

All augmentation happens AFTER per-point RGB attachment: color is a
frozen per-point attribute, so moving points around never re-projects
them into the image. A scene here is the augmentable payload of one
frame: the cloud, its attached colors, and the labeled boxes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptySetError, FormatError
from .geometry import Box3D, bev_iou, points_in_box

DB_MAGIC = b"PFGTDB01"


@dataclass
class Scene:
    """One frame's augmentable payload."""

    xyzr: np.ndarray              # [N, 4]
    rgb: np.ndarray               # [N, 3] frozen per-point color
    gt_boxes: List[Box3D] = field(default_factory=list)

    def copy(self) -> "Scene":
        return Scene(self.xyzr.copy(), self.rgb.copy(),
                     list(self.gt_boxes))


@dataclass
class GtSample:
    """A cropped object: its points (with color) and its box, kept in
    the source frame's coordinates."""

    xyzr: np.ndarray   # [K, 4]
    rgb: np.ndarray    # [K, 3]
    box: Box3D


class GtSampleDatabase:
    def __init__(self, samples: Optional[List[GtSample]] = None):
        self.samples: List[GtSample] = list(samples or [])

    def __len__(self) -> int:
        return len(self.samples)

    def save(self, path) -> None:
        """Length-prefixed binary: magic, u32 count, then per record the
        7 box values and a u32 point count followed by 7 float64 per
        point (x, y, z, r, red, green, blue), all little-endian."""
        chunks = [DB_MAGIC, struct.pack("<I", len(self.samples))]
        for sample in self.samples:
            box = sample.box
            chunks.append(struct.pack(
                "<7d", box.cx, box.cy, box.cz, box.w, box.l, box.h, box.yaw))
            rows = np.column_stack([sample.xyzr, sample.rgb])
            chunks.append(struct.pack("<I", rows.shape[0]))
            chunks.append(rows.astype("<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "GtSampleDatabase":
        blob = Path(path).read_bytes()
        if blob[:len(DB_MAGIC)] != DB_MAGIC:
            raise FormatError(f"{path}: not a ground-truth sample database")
        pos = len(DB_MAGIC)

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(blob):
                raise FormatError(f"{path}: truncated database")
            piece = blob[pos:pos + n]
            pos += n
            return piece

        (count,) = struct.unpack("<I", take(4))
        samples = []
        for _ in range(count):
            box = Box3D(*struct.unpack("<7d", take(56)))
            (k,) = struct.unpack("<I", take(4))
            rows = np.frombuffer(take(56 * k), dtype="<f8").reshape(k, 7)
            samples.append(GtSample(xyzr=rows[:, :4].astype(np.float64),
                                    rgb=rows[:, 4:].astype(np.float64),
                                    box=box))
        if pos != len(blob):
            raise FormatError(f"{path}: trailing bytes after last record")
        return cls(samples)


def build_gt_database(scenes: Sequence[Scene],
                      cls_filter: str = "Car") -> GtSampleDatabase:
    """Crop every labeled object into a reusable sample.

    `cls_filter` is nominal here because scenes carry only boxes of the
    class of interest; it is kept for symmetry with dataset loaders.
    Objects that contain no points are skipped (nothing to paste).
    """
    del cls_filter
    db = GtSampleDatabase()
    for scene in scenes:
        for box in scene.gt_boxes:
            mask = points_in_box(scene.xyzr[:, :3], box)
            if not mask.any():
                continue
            db.samples.append(GtSample(xyzr=scene.xyzr[mask].copy(),
                                       rgb=scene.rgb[mask].copy(),
                                       box=box))
    return db


def sample_and_paste(scene: Scene, db: GtSampleDatabase, max_added: int,
                     rng: np.random.Generator) -> Scene:
    """Paste up to `max_added` database objects at their stored poses.

    A candidate is rejected when its footprint overlaps any box already
    in the scene (pre-existing or freshly pasted): pasting is strictly
    collision-free. Cloud points falling inside an accepted box are
    removed first so the crop does not interleave with old returns.
    """
    if len(db) == 0:
        raise EmptySetError("empty ground-truth sample database")
    if max_added <= 0:
        return scene
    out = scene.copy()
    order = rng.permutation(len(db))
    added = 0
    for idx in order:
        if added == max_added:
            break
        sample = db.samples[int(idx)]
        if any(bev_iou(sample.box, existing) > 0.0
               for existing in out.gt_boxes):
            continue
        inside = points_in_box(out.xyzr[:, :3], sample.box)
        if inside.any():
            out.xyzr = out.xyzr[~inside]
            out.rgb = out.rgb[~inside]
        out.xyzr = np.vstack([out.xyzr, sample.xyzr])
        out.rgb = np.vstack([out.rgb, sample.rgb])
        out.gt_boxes.append(sample.box)
        added += 1
    return out


def apply_global(scene: Scene, flip_y: bool, angle: float,
                 scale: float) -> Scene:
    """Deterministic global transform: optional y-flip, then rotation
    about the z axis, then isotropic scaling. RGB and reflectance ride
    along untouched."""
    xyzr = scene.xyzr.copy()
    boxes = list(scene.gt_boxes)
    if flip_y:
        xyzr[:, 1] = -xyzr[:, 1]
        boxes = [Box3D(b.cx, -b.cy, b.cz, b.w, b.l, b.h, -b.yaw)
                 for b in boxes]
    if angle != 0.0:
        c, s = np.cos(angle), np.sin(angle)
        x, y = xyzr[:, 0].copy(), xyzr[:, 1].copy()
        xyzr[:, 0] = c * x - s * y
        xyzr[:, 1] = s * x + c * y
        boxes = [Box3D(c * b.cx - s * b.cy, s * b.cx + c * b.cy, b.cz,
                       b.w, b.l, b.h, b.yaw + angle) for b in boxes]
    if scale != 1.0:
        xyzr[:, :3] *= scale
        boxes = [Box3D(b.cx * scale, b.cy * scale, b.cz * scale,
                       b.w * scale, b.l * scale, b.h * scale, b.yaw)
                 for b in boxes]
    return Scene(xyzr=xyzr, rgb=scene.rgb.copy(), gt_boxes=boxes)


def global_augment(scene: Scene, rng: np.random.Generator,
                   flip_prob: float = 0.5,
                   rotation_limit: float = np.pi / 4,
                   scale_range: Tuple[float, float] = (0.95, 1.05)) -> Scene:
    """Draw flip/rotation/scale and apply them.

    All three values are drawn unconditionally, in a fixed order, so a
    seeded generator yields the same transform regardless of outcomes.
    """
    flip = bool(rng.uniform() < flip_prob)
    angle = float(rng.uniform(-rotation_limit, rotation_limit))
    scale = float(rng.uniform(scale_range[0], scale_range[1]))
    return apply_global(scene, flip, angle, scale)


def per_object_noise(scene: Scene, rng: np.random.Generator,
                     rotation_limit: float = np.pi / 20,
                     translation_sigma: float = 0.25) -> Scene:
    """Jitter each box (and its interior points) independently.

    Off by default in shipped configs; a draw that would collide with
    another box is discarded for that object. Draws happen for every
    object in order, applied or not, keeping the stream deterministic.
    """
    out = scene.copy()
    for i, box in enumerate(list(out.gt_boxes)):
        angle = float(rng.uniform(-rotation_limit, rotation_limit))
        shift = rng.normal(0.0, translation_sigma, size=3)
        moved = Box3D(box.cx + shift[0], box.cy + shift[1], box.cz + shift[2],
                      box.w, box.l, box.h, box.yaw + angle)
        others = [b for j, b in enumerate(out.gt_boxes) if j != i]
        if any(bev_iou(moved, other) > 0.0 for other in others):
            continue
        mask = points_in_box(out.xyzr[:, :3], box)
        if not mask.any():
            out.gt_boxes[i] = moved
            continue
        pts = out.xyzr[mask]
        local = pts[:, :3] - np.array([box.cx, box.cy, box.cz])
        c, s = np.cos(angle), np.sin(angle)
        rotated = local.copy()
        rotated[:, 0] = c * local[:, 0] - s * local[:, 1]
        rotated[:, 1] = s * local[:, 0] + c * local[:, 1]
        pts[:, :3] = rotated + np.array([moved.cx, moved.cy, moved.cz])
        out.xyzr[mask] = pts
        out.gt_boxes[i] = moved
    return out
