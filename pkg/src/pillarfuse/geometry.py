"""Oriented 3D boxes and the geometry used around them.

Lidar-frame convention: x forward, y left, z up. A box's `l` extends
along its heading (yaw measured from +x toward +y), `w` across it, and
`cz` sits at the vertical center. BEV work happens in the x-y plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)

# Near-boundary vertices count as inside during polygon clipping.
CLIP_EPS = 1e-9


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = float(np.mod(angle + np.pi, 2.0 * np.pi) - np.pi)
    if wrapped == -np.pi:
        wrapped = np.pi
    return wrapped


@dataclass
class Box3D:
    """Oriented box; dimensions are not validated here because KITTI
    labels legitimately carry -1 placeholders (DontCare)."""

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        self.yaw = normalize_angle(self.yaw)

    def corners_bev(self) -> np.ndarray:
        """Counterclockwise [4, 2] footprint corners."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        half_l, half_w = 0.5 * self.l, 0.5 * self.w
        local = np.array([[half_l, half_w], [-half_l, half_w],
                          [-half_l, -half_w], [half_l, -half_w]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def corners_3d(self) -> np.ndarray:
        """[8, 3] corners: bottom face then top face, both CCW."""
        bev = self.corners_bev()
        bottom = np.column_stack([bev, np.full(4, self.cz - 0.5 * self.h)])
        top = np.column_stack([bev, np.full(4, self.cz + 0.5 * self.h)])
        return np.vstack([bottom, top])

    def bev_area(self) -> float:
        return float(self.w * self.l)

    def volume(self) -> float:
        return float(self.w * self.l * self.h)


@dataclass
class RegressionTarget:
    """Dimensionless box residuals relative to an anchor."""

    dx: float
    dy: float
    dz: float
    dw: float
    dl: float
    dh: float
    dtheta: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz,
                         self.dw, self.dl, self.dh, self.dtheta])

    @staticmethod
    def from_array(values: Sequence[float]) -> "RegressionTarget":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (7,):
            raise ContractError(f"regression target needs 7 values, got {v.shape}")
        return RegressionTarget(*v.tolist())


# -- convex polygon intersection --------------------------------------------


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip a polygon against a convex CCW polygon."""
    output = [tuple(p) for p in subject]
    n_clip = len(clip)
    for i in range(n_clip):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n_clip]
        ex, ey = bx - ax, by - ay
        points = output
        output = []
        px, py = points[-1]
        prev_side = ex * (py - ay) - ey * (px - ax)
        for cx, cy in points:
            cur_side = ex * (cy - ay) - ey * (cx - ax)
            if cur_side >= -CLIP_EPS:
                if prev_side < -CLIP_EPS:
                    t = prev_side / (prev_side - cur_side)
                    output.append((px + t * (cx - px), py + t * (cy - py)))
                output.append((cx, cy))
            elif prev_side >= -CLIP_EPS:
                t = prev_side / (prev_side - cur_side)
                output.append((px + t * (cx - px), py + t * (cy - py)))
            px, py, prev_side = cx, cy, cur_side
    return np.array(output) if output else np.empty((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a CCW polygon; degenerate slivers clamp to 0."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return max(float(area), 0.0)


def _box_sort_key(box: Box3D) -> tuple:
    return (box.cx, box.cy, box.w, box.l, box.yaw)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection-over-union of the two rotated footprints."""
    if a.w <= 0 or a.l <= 0 or b.w <= 0 or b.l <= 0:
        raise ContractError("bev_iou on a zero-area box")
    # Clipping order is canonicalized so iou(a, b) and iou(b, a) run the
    # exact same float operations.
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    inter = _polygon_area(_clip_polygon(a.corners_bev(), b.corners_bev()))
    union = a.bev_area() + b.bev_area() - inter
    if union <= 0:
        raise ContractError("bev_iou with non-positive union")
    return min(inter / union, 1.0)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection times vertical overlap, over union."""
    if min(a.w, a.l, a.h, b.w, b.l, b.h) <= 0:
        raise ContractError("iou3d on a degenerate box")
    if _box_sort_key(b) < _box_sort_key(a):
        a, b = b, a
    inter_bev = _polygon_area(_clip_polygon(a.corners_bev(), b.corners_bev()))
    z_lo = max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    z_hi = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h)
    inter_vol = inter_bev * max(z_hi - z_lo, 0.0)
    union = a.volume() + b.volume() - inter_vol
    return min(inter_vol / union, 1.0)


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of the [N, >=3] points inside the oriented box."""
    pts = np.asarray(points, dtype=np.float64)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return ((np.abs(local_x) <= 0.5 * box.l)
            & (np.abs(local_y) <= 0.5 * box.w)
            & (np.abs(pts[:, 2] - box.cz) <= 0.5 * box.h))


# -- anchor target codec ------------------------------------------------------


def _fold_heading(delta: float) -> Tuple[float, bool]:
    """Split a yaw residual into a principal part in (-pi/2, pi/2] plus
    an optional pi flip recorded as the direction bit (True = no flip)."""
    delta = normalize_angle(delta)
    if delta > 0.5 * np.pi:
        return delta - np.pi, False
    if delta <= -0.5 * np.pi:
        return delta + np.pi, False
    return delta, True


def heading_positive(gt_yaw: float, anchor_yaw: float) -> bool:
    """Direction-classifier target: True when no pi flip is needed."""
    return _fold_heading(gt_yaw - anchor_yaw)[1]


def encode_targets(gt: Box3D, anchor: Box3D) -> RegressionTarget:
    diag = float(np.sqrt(anchor.w ** 2 + anchor.l ** 2))
    principal, _ = _fold_heading(gt.yaw - anchor.yaw)
    return RegressionTarget(
        dx=(gt.cx - anchor.cx) / diag,
        dy=(gt.cy - anchor.cy) / diag,
        dz=(gt.cz - anchor.cz) / anchor.h,
        dw=float(np.log(gt.w / anchor.w)),
        dl=float(np.log(gt.l / anchor.l)),
        dh=float(np.log(gt.h / anchor.h)),
        dtheta=float(np.sin(principal)),
    )


def decode_targets(target: RegressionTarget, anchor: Box3D,
                   dir_positive: bool) -> Box3D:
    diag = float(np.sqrt(anchor.w ** 2 + anchor.l ** 2))
    dtheta = target.dtheta
    if abs(dtheta) > 1.0:
        logger.warning("clamping out-of-range sin residual %.6f", dtheta)
        dtheta = float(np.clip(dtheta, -1.0, 1.0))
    yaw = anchor.yaw + float(np.arcsin(dtheta))
    if not dir_positive:
        yaw += np.pi
    return Box3D(
        cx=anchor.cx + target.dx * diag,
        cy=anchor.cy + target.dy * diag,
        cz=anchor.cz + target.dz * anchor.h,
        w=anchor.w * float(np.exp(target.dw)),
        l=anchor.l * float(np.exp(target.dl)),
        h=anchor.h * float(np.exp(target.dh)),
        yaw=yaw,
    )


# -- NMS ----------------------------------------------------------------------


def rotated_nms(boxes: Sequence[Box3D], scores: Sequence[float],
                iou_threshold: float) -> List[int]:
    """Greedy BEV NMS; returns kept indices in descending-score order."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != scores.shape[0]:
        raise ContractError("one score per box required")
    order = np.argsort(-scores, kind="stable")  # ties keep input order
    kept: List[int] = []
    for idx in order:
        idx = int(idx)
        if all(bev_iou(boxes[idx], boxes[k]) <= iou_threshold for k in kept):
            kept.append(idx)
    return kept


# -- anchors -------------------------------------------------------------------


@dataclass
class AnchorGrid:
    """Two yaw-rotations of one car-sized anchor per output cell.

    Anchor k covers cell (iy, ix) = (k//2 // nx, k//2 % nx) with yaw
    index k % 2, matching a row-major [ny, nx, 2] flattening.
    """

    centers: np.ndarray          # [A, 3]
    sizes: np.ndarray            # [A, 3] as (w, l, h)
    yaws: np.ndarray             # [A]
    nx: int
    ny: int

    def __len__(self) -> int:
        return self.centers.shape[0]

    def box(self, k: int) -> Box3D:
        return Box3D(*self.centers[k], *self.sizes[k], self.yaws[k])

    def boxes(self) -> List[Box3D]:
        return [self.box(k) for k in range(len(self))]


def build_anchor_grid(x_range: Tuple[float, float],
                      y_range: Tuple[float, float],
                      nx: int, ny: int,
                      size: Tuple[float, float, float] = (1.6, 3.9, 1.56),
                      z_center: float = -1.0) -> AnchorGrid:
    """Anchors on the centers of an ny-by-nx output grid, yaws {0, pi/2}."""
    if nx < 1 or ny < 1:
        raise ContractError("anchor grid needs at least one cell")
    cell_x = (x_range[1] - x_range[0]) / nx
    cell_y = (y_range[1] - y_range[0]) / ny
    if cell_x <= 0 or cell_y <= 0:
        raise ContractError("anchor grid extent must be positive")
    xs = x_range[0] + (np.arange(nx) + 0.5) * cell_x
    ys = y_range[0] + (np.arange(ny) + 0.5) * cell_y
    centers = []
    yaws = []
    for iy in range(ny):
        for ix in range(nx):
            for yaw in (0.0, 0.5 * np.pi):
                centers.append((xs[ix], ys[iy], z_center))
                yaws.append(yaw)
    count = len(yaws)
    return AnchorGrid(
        centers=np.array(centers),
        sizes=np.tile(np.array(size, dtype=np.float64), (count, 1)),
        yaws=np.array(yaws),
        nx=nx, ny=ny,
    )


def assign_anchor_labels(anchors: AnchorGrid, gt_boxes: Sequence[Box3D],
                         pos_iou: float = 0.6, neg_iou: float = 0.45,
                         force_match: bool = True
                         ) -> Tuple[np.ndarray, np.ndarray]:
    """BEV-IoU anchor matching.

    Returns (labels, matched_gt): labels[k] is 1 positive, 0 negative,
    -1 ignored; matched_gt[k] indexes the assigned GT (or -1). With
    force_match, every GT claims its best-IoU anchor even below pos_iou
    (later GTs win a contested anchor; ties break toward lower index).
    """
    count = len(anchors)
    labels = np.zeros(count, dtype=np.int64)
    matched = np.full(count, -1, dtype=np.int64)
    if not gt_boxes:
        return labels, matched
    iou = np.zeros((count, len(gt_boxes)))
    anchor_boxes = anchors.boxes()
    for k, abox in enumerate(anchor_boxes):
        for g, gbox in enumerate(gt_boxes):
            iou[k, g] = bev_iou(abox, gbox)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(count), best_gt]
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    matched[labels == 1] = best_gt[labels == 1]
    if force_match:
        for g in range(len(gt_boxes)):
            k = int(iou[:, g].argmax())
            labels[k] = 1
            matched[k] = g
    return labels, matched
