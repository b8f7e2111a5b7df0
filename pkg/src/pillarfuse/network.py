"""Backbone, detection head, composite loss, and the train/infer loops.

The pseudo-image passes through downsampling conv blocks whose outputs
are upsampled back to the first block's resolution and concatenated;
1x1 head convolutions then emit per-anchor classification, box, and
direction maps. Anchor-major flattening follows the anchor grid: cell
(iy, ix) owns anchors (iy*nx + ix)*2 and +1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError
from .fusion import FusionFrontEnd
from .geometry import (AnchorGrid, Box3D, RegressionTarget, assign_anchor_labels,
                       build_anchor_grid, decode_targets, encode_targets,
                       heading_positive, rotated_nms)
from .layers import AdamW, BatchNorm2d, ConvLayer, Module
from .pillars import (PillarBatch, PillarGridConfig, build_pillar_batch,
                      decorate_points, scatter_to_pseudo_image)
from .kitti_io import RawPointCloud

logger = logging.getLogger(__name__)

# Classification bias prior: start every anchor near p = 0.01 so the
# focal loss is not swamped by tens of thousands of easy negatives.
FOCAL_PRIOR = 0.01


@dataclass
class LossWeights:
    beta_loc: float = 2.0
    beta_cls: float = 1.0
    beta_dir: float = 0.2


@dataclass
class BackboneConfig:
    """(num_layers, stride, channels) per block plus lateral widths.

    Block outputs are nearest-upsampled back to the first block's
    resolution, passed through a 1x1 conv, and concatenated; the head
    sees sum(up_channels) channels on a grid downscaled by the first
    block's stride.
    """

    blocks: Tuple[Tuple[int, int, int], ...] = ((2, 1, 32), (2, 2, 64))
    up_channels: Tuple[int, ...] = (32, 32)

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")
        if len(self.up_channels) != len(self.blocks):
            raise ConfigError("one lateral width per block required")
        for layers, stride, channels in self.blocks:
            if layers < 1 or stride < 1 or channels < 1:
                raise ConfigError("block entries must be positive")

    @property
    def output_stride(self) -> int:
        return self.blocks[0][1]

    @property
    def out_channels(self) -> int:
        return int(sum(self.up_channels))


@dataclass
class HeadOutput:
    cls_logits: Tensor   # [A, 1]
    box_deltas: Tensor   # [A, 7]
    dir_logits: Tensor   # [A, 2]


@dataclass
class FrameSample:
    """Everything the detector needs from one frame."""

    batch: PillarBatch
    gt_boxes: List[Box3D] = field(default_factory=list)
    frame_id: str = ""


def build_sample(xyzr: np.ndarray, rgb: np.ndarray,
                 gt_boxes: Sequence[Box3D], grid: PillarGridConfig,
                 rng: np.random.Generator, frame_id: str = "") -> FrameSample:
    """Group an RGB-decorated cloud into the 12-channel fusion batch."""
    decorated = decorate_points(RawPointCloud(xyzr), grid)
    rows = np.column_stack([decorated.features,
                            rgb[decorated.point_index]])
    batch = build_pillar_batch(rows, decorated, grid, rng)
    return FrameSample(batch=batch, gt_boxes=list(gt_boxes),
                       frame_id=frame_id)


class ConvBnRelu(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, padding: int = 1):
        super().__init__()
        self.conv = ConvLayer(in_ch, out_ch, kernel, rng,
                              stride=stride, padding=padding)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(self.bn(self.conv(x)))

    __call__ = forward


class Backbone(Module):
    """Downsample blocks with upsample-concat laterals."""

    def __init__(self, in_channels: int, config: BackboneConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        self.blocks: List[List[ConvBnRelu]] = []
        self.laterals: List[ConvBnRelu] = []
        self.up_factors: List[int] = []
        prev = in_channels
        factor = 1
        for i, (layers, stride, channels) in enumerate(config.blocks):
            block = [ConvBnRelu(prev, channels, rng, stride=stride)]
            block.extend(ConvBnRelu(channels, channels, rng)
                         for _ in range(layers - 1))
            self.blocks.append(block)
            if i > 0:
                factor *= stride
            self.up_factors.append(factor)
            self.laterals.append(
                ConvBnRelu(channels, config.up_channels[i], rng,
                           kernel=1, padding=0))
            prev = channels

    def _children(self):
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate(block):
                yield f"blocks.{i}.{j}", layer
        for i, lateral in enumerate(self.laterals):
            yield f"laterals.{i}", lateral

    def forward(self, pseudo: Tensor) -> Tensor:
        if pseudo.ndim != 3 or pseudo.shape[0] != self.in_channels:
            raise ShapeError(
                f"backbone expects [{self.in_channels}, H, W], "
                f"got {pseudo.shape}")
        merged = []
        x = pseudo
        for block, lateral, factor in zip(self.blocks, self.laterals,
                                          self.up_factors):
            for layer in block:
                x = layer(x)
            up = x if factor == 1 else ad.upsample_nearest(x, factor)
            merged.append(lateral(up))
        return ad.concat(merged, axis=0)

    __call__ = forward


class DetectionHead(Module):
    """1x1 convs emitting per-anchor score, box residuals, direction."""

    ANCHORS_PER_CELL = 2

    def __init__(self, in_channels: int, rng: np.random.Generator):
        super().__init__()
        a = self.ANCHORS_PER_CELL
        self.cls_conv = ConvLayer(in_channels, a * 1, 1, rng)
        self.box_conv = ConvLayer(in_channels, a * 7, 1, rng)
        self.dir_conv = ConvLayer(in_channels, a * 2, 1, rng)
        self.cls_conv.bias.data[...] = -np.log((1.0 - FOCAL_PRIOR)
                                               / FOCAL_PRIOR)

    @staticmethod
    def _to_anchor_major(feature_map: Tensor, dims: int) -> Tensor:
        c, h, w = feature_map.shape
        return ad.reshape(ad.permute(feature_map, (1, 2, 0)),
                          (h * w * (c // dims), dims))

    def forward(self, features: Tensor) -> HeadOutput:
        return HeadOutput(
            cls_logits=self._to_anchor_major(self.cls_conv(features), 1),
            box_deltas=self._to_anchor_major(self.box_conv(features), 7),
            dir_logits=self._to_anchor_major(self.dir_conv(features), 2),
        )

    __call__ = forward


# -- losses -----------------------------------------------------------------


def focal_loss(cls_logits: Tensor, labels: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Focal binary cross-entropy summed over non-ignored anchors."""
    labels = np.asarray(labels)
    flat = ad.reshape(cls_logits, (cls_logits.shape[0],))
    total = Tensor(0.0)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    if pos_idx.size:
        x = ad.gather_rows(ad.reshape(flat, (flat.shape[0], 1)), pos_idx)
        p = ad.sigmoid(x)
        term = ad.power(1.0 - p, gamma) * ad.softplus(-x)
        total = total + alpha * ad.sum_(term)
    if neg_idx.size:
        x = ad.gather_rows(ad.reshape(flat, (flat.shape[0], 1)), neg_idx)
        p = ad.sigmoid(x)
        term = ad.power(p, gamma) * ad.softplus(x)
        total = total + (1.0 - alpha) * ad.sum_(term)
    return total


def smooth_l1_loc_loss(box_deltas: Tensor, targets: np.ndarray,
                       pos_idx: np.ndarray) -> Tensor:
    """Smooth-L1 summed over positive anchors and all 7 box dims."""
    pos_idx = np.asarray(pos_idx, dtype=np.intp)
    if pos_idx.size == 0:
        return Tensor(0.0)
    pred = ad.gather_rows(box_deltas, pos_idx)
    diff = pred - Tensor(targets[pos_idx])
    mag = ad.absolute(diff)
    # The quadratic/linear switch is a constant mask; values and first
    # derivatives agree at |x| = 1 so masking is exact.
    quad = (mag.data < 1.0).astype(np.float64)
    piece = quad * (0.5 * diff * diff) + (1.0 - quad) * (mag - 0.5)
    return ad.sum_(piece)


def dir_loss(dir_logits: Tensor, dir_targets: np.ndarray,
             pos_idx: np.ndarray) -> Tensor:
    """Two-way softmax cross-entropy summed over positive anchors."""
    pos_idx = np.asarray(pos_idx, dtype=np.intp)
    if pos_idx.size == 0:
        return Tensor(0.0)
    logits = ad.gather_rows(dir_logits, pos_idx)
    onehot = np.zeros((pos_idx.size, 2))
    onehot[np.arange(pos_idx.size), dir_targets[pos_idx].astype(int)] = 1.0
    correct = ad.sum_(logits * onehot, axis=1)
    wrong = ad.sum_(logits * (1.0 - onehot), axis=1)
    return ad.sum_(ad.softplus(wrong - correct))


def total_loss(loc: Tensor, cls: Tensor, dir_: Tensor, n_pos: int,
               weights: LossWeights = LossWeights()) -> Tensor:
    """Eq.-style weighted sum scaled by the positive-anchor count."""
    weighted = (weights.beta_loc * loc + weights.beta_cls * cls) \
        + weights.beta_dir * dir_
    return weighted * (1.0 / max(int(n_pos), 1))


# -- detector ------------------------------------------------------------------


@dataclass
class MatchConfig:
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    force_match: bool = True


class Detector(Module):
    """Fusion front end + backbone + head over one anchor grid."""

    def __init__(self, grid: PillarGridConfig, fusion_mode: str,
                 rng: np.random.Generator,
                 backbone_config: Optional[BackboneConfig] = None,
                 anchor_size: Tuple[float, float, float] = (1.6, 3.9, 1.56),
                 anchor_z: float = -1.0,
                 match: Optional[MatchConfig] = None,
                 loss_weights: Optional[LossWeights] = None,
                 pfn_p_in: int = 9):
        super().__init__()
        self.grid = grid
        self.backbone_config = backbone_config or BackboneConfig()
        stride = self.backbone_config.output_stride
        if grid.nx % stride or grid.ny % stride:
            raise ConfigError(
                f"grid {grid.ny}x{grid.nx} not divisible by output "
                f"stride {stride}")
        self.front = FusionFrontEnd(fusion_mode, rng, pfn_p_in=pfn_p_in)
        self.backbone = Backbone(self.front.out_channels,
                                 self.backbone_config, rng)
        self.head = DetectionHead(self.backbone_config.out_channels, rng)
        self.anchors = build_anchor_grid(
            grid.x_range, grid.y_range,
            grid.nx // stride, grid.ny // stride,
            size=anchor_size, z_center=anchor_z)
        self.match = match or MatchConfig()
        self.loss_weights = loss_weights or LossWeights()

    def forward(self, sample: FrameSample) -> HeadOutput:
        batch = sample.batch
        pillar_vecs = self.front(batch)
        pseudo = scatter_to_pseudo_image(pillar_vecs, batch.pillar_coords,
                                         self.grid)
        features = self.backbone(pseudo)
        out = self.head(features)
        if out.cls_logits.shape[0] != len(self.anchors):
            raise ShapeError(
                f"head emitted {out.cls_logits.shape[0]} anchors, grid "
                f"has {len(self.anchors)}")
        return out

    __call__ = forward

    def anchor_targets(self, gt_boxes: Sequence[Box3D]
                       ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Matcher labels plus regression and direction targets."""
        labels, matched = assign_anchor_labels(
            self.anchors, list(gt_boxes), pos_iou=self.match.pos_iou,
            neg_iou=self.match.neg_iou, force_match=self.match.force_match)
        count = len(self.anchors)
        reg = np.zeros((count, 7))
        dirs = np.zeros(count)
        for k in np.flatnonzero(labels == 1):
            gt = gt_boxes[matched[k]]
            anchor = self.anchors.box(int(k))
            reg[k] = encode_targets(gt, anchor).to_array()
            dirs[k] = 1.0 if heading_positive(gt.yaw, anchor.yaw) else 0.0
        return labels, reg, dirs

    def compute_loss(self, out: HeadOutput, gt_boxes: Sequence[Box3D]
                     ) -> Dict[str, Tensor]:
        labels, reg_targets, dir_targets = self.anchor_targets(gt_boxes)
        pos_idx = np.flatnonzero(labels == 1)
        loc = smooth_l1_loc_loss(out.box_deltas, reg_targets, pos_idx)
        cls = focal_loss(out.cls_logits, labels)
        direction = dir_loss(out.dir_logits, dir_targets, pos_idx)
        total = total_loss(loc, cls, direction, pos_idx.size,
                           self.loss_weights)
        return {"total": total, "loc": loc, "cls": cls, "dir": direction,
                "n_pos": pos_idx.size}


def train_step(detector: Detector, sample: FrameSample,
               optimizer: AdamW) -> Dict[str, float]:
    """One forward/backward/update on a single frame sample."""
    detector.train(True)
    optimizer.zero_grad()
    out = detector(sample)
    parts = detector.compute_loss(out, sample.gt_boxes)
    loss_value = parts["total"].item()
    if not np.isfinite(loss_value):
        raise NumericError(
            f"non-finite loss {loss_value} on frame {sample.frame_id!r}")
    parts["total"].backward()
    optimizer.step()
    return {"total": loss_value,
            "loc": parts["loc"].item(),
            "cls": parts["cls"].item(),
            "dir": parts["dir"].item(),
            "n_pos": float(parts["n_pos"])}


def infer(detector: Detector, sample: FrameSample,
          score_threshold: float = 0.4, nms_threshold: float = 0.5
          ) -> List[Tuple[Box3D, float]]:
    """Decode thresholded anchors and prune with rotated BEV NMS."""
    detector.train(False)
    out = detector(sample)
    scores = 1.0 / (1.0 + np.exp(-np.clip(
        out.cls_logits.data[:, 0], -500, 500)))
    keep = np.flatnonzero(scores > score_threshold)
    if keep.size == 0:
        return []
    boxes = []
    for k in keep:
        k = int(k)
        target = RegressionTarget.from_array(out.box_deltas.data[k])
        positive = bool(out.dir_logits.data[k, 1] > out.dir_logits.data[k, 0])
        boxes.append(decode_targets(target, detector.anchors.box(k),
                                    positive))
    kept = rotated_nms(boxes, scores[keep], nms_threshold)
    return [(boxes[i], float(scores[keep[i]])) for i in kept]
