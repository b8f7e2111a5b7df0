"""Channel-attention fusion of lidar pillars with per-point RGB.

Two fusion front ends share one pillar partition:

  * point-attention: gates point features against their own image
    features BEFORE pillar encoding. Per point, with E = [P|I] the
    25-channel concat, the output is [P, I, P*sig(A_P(E)), I*sig(A_I(E))]
    (50 channels), pushed through one 64-wide pillar feature net.
  * dense-attention: builds three 64-wide pillar streams (lidar,
    lidar+image, raw RGB) and gates each against their 192-channel
    concat AFTER encoding, summing the gated streams into a fourth
    block for a 256-channel pillar vector.

Ablation modes reuse the same plumbing with the attention stripped.
Every front end consumes a PillarBatch whose point rows carry the 9
lidar channels followed by 3 RGB channels.
"""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .layers import LinearBnRelu, LinearLayer, Module
from .pillars import LIDAR_CHANNELS, PillarBatch

RGB_CHANNELS = 3
IMAGE_FEATURE_DIM = 16

FUSION_MODES = ("baseline", "paf", "point_fusion", "daf", "dense_fusion")

# Pillar-vector width entering the pseudo-image, per mode.
FUSION_CHANNELS = {
    "baseline": 64,
    "paf": 64,
    "point_fusion": 64,
    "daf": 256,
    "dense_fusion": 192,
}


class MlpPd(Module):
    """Image-dimension predictor: two Linear+BN+ReLU blocks, 3 -> 96 -> 16."""

    def __init__(self, rng: np.random.Generator,
                 dims: Tuple[int, int, int] = (3, 96, 16)):
        super().__init__()
        self.blocks = [LinearBnRelu(dims[0], dims[1], rng),
                       LinearBnRelu(dims[1], dims[2], rng)]

    def forward(self, rgb: Tensor) -> Tensor:
        out = rgb
        for block in self.blocks:
            out = block(out)
        return out

    __call__ = forward


class AttentionMlp(Module):
    """linear -> ReLU -> linear -> sigmoid, emitting per-channel gates."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int,
                 rng: np.random.Generator):
        super().__init__()
        self.fc1 = LinearLayer(in_dim, hidden, rng)
        self.fc2 = LinearLayer(hidden, out_dim, rng)

    def gate(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.fc2(ad.relu(self.fc1(x))))

    __call__ = gate


class PillarFeatureNet(Module):
    """Shared Linear+BN+ReLU over points, then a max per pillar segment."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.block = LinearBnRelu(in_dim, out_dim, rng)

    def forward(self, point_features: Tensor, starts: np.ndarray) -> Tensor:
        return ad.segment_max(self.block(point_features), starts)

    __call__ = forward


# -- spec-level operations -----------------------------------------------------


def map_image_features(rgb: Tensor, mlp_pd: MlpPd) -> Tensor:
    """Lift raw per-point RGB into the 16-channel image feature space."""
    if rgb.ndim != 2 or rgb.shape[1] != RGB_CHANNELS:
        raise ShapeError(f"expected [M, 3] RGB, got {rgb.shape}")
    return mlp_pd(rgb)


def paf_fuse(f_p: Tensor, f_i: Tensor, module: "PafModule") -> Tensor:
    """Point-wise gated concat: [F_P, F_I, F_P*g_P, F_I*g_I], 50 channels."""
    if f_p.shape[0] != f_i.shape[0]:
        raise ShapeError(
            f"row mismatch: {f_p.shape[0]} lidar vs {f_i.shape[0]} image")
    f_e = ad.concat([f_p, f_i], axis=1)
    attended_p = f_p * module.mlp_p(f_e)
    attended_i = f_i * module.mlp_i(f_e)
    return ad.concat([f_p, f_i, attended_p, attended_i], axis=1)


def paf_encode_pillars(fusion_points: Tensor, starts: np.ndarray,
                       pfn: PillarFeatureNet) -> Tensor:
    """Run the shared PFN and reduce each pillar segment by max."""
    return pfn(fusion_points, starts)


def daf_build_streams(batch: PillarBatch, module: "DafModule"
                      ) -> Tuple[Tensor, Tensor, Tensor]:
    """Encode the three pillar streams over one shared partition."""
    f_p, rgb = split_batch_columns(batch)
    f_i = map_image_features(rgb, module.mlp_pd)
    p_in = f_p
    if module.pfn_p_in != LIDAR_CHANNELS:
        pad = Tensor(np.zeros((f_p.shape[0],
                               module.pfn_p_in - LIDAR_CHANNELS)))
        p_in = ad.concat([f_p, pad], axis=1)
    stream_p = module.pfn_p(p_in, batch.starts)
    stream_pi = module.pfn_pi(ad.concat([f_p, f_i], axis=1), batch.starts)
    stream_i = module.pfn_i(rgb, batch.starts)
    return stream_p, stream_pi, stream_i


def daf_fuse(stream_p: Tensor, stream_pi: Tensor, stream_i: Tensor,
             module: "DafModule") -> Tensor:
    """Pillar-wise gated sum on top of the raw stream concat, 256 channels."""
    if not (stream_p.shape == stream_pi.shape == stream_i.shape):
        raise ContractError(
            f"stream shapes differ: {stream_p.shape} {stream_pi.shape} "
            f"{stream_i.shape}")
    f_c = ad.concat([stream_p, stream_pi, stream_i], axis=1)
    fused = (stream_p * module.att_p(f_c)
             + stream_pi * module.att_pi(f_c)
             + stream_i * module.att_i(f_c))
    return ad.concat([stream_p, stream_pi, stream_i, fused], axis=1)


def split_batch_columns(batch: PillarBatch) -> Tuple[Tensor, Tensor]:
    """Lidar block and RGB block of a 12-channel fusion batch."""
    rows = batch.point_features
    if rows.ndim != 2 or rows.shape[1] != LIDAR_CHANNELS + RGB_CHANNELS:
        raise ContractError(
            f"fusion batch needs {LIDAR_CHANNELS + RGB_CHANNELS} point "
            f"channels, got {rows.shape}")
    return Tensor(rows[:, :LIDAR_CHANNELS]), Tensor(rows[:, LIDAR_CHANNELS:])


# -- modules --------------------------------------------------------------------


class PafModule(Module):
    """Point-attention fusion: gate, concat to 50 channels, one PFN."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.mlp_pd = MlpPd(rng)
        fused = LIDAR_CHANNELS + IMAGE_FEATURE_DIM  # 25
        self.mlp_p = AttentionMlp(fused, fused, LIDAR_CHANNELS, rng)
        self.mlp_i = AttentionMlp(fused, fused, IMAGE_FEATURE_DIM, rng)
        self.pfn = PillarFeatureNet(2 * fused, 64, rng)

    def forward(self, batch: PillarBatch) -> Tensor:
        f_p, rgb = split_batch_columns(batch)
        f_i = map_image_features(rgb, self.mlp_pd)
        fused = paf_fuse(f_p, f_i, self)
        return paf_encode_pillars(fused, batch.starts, self.pfn)

    __call__ = forward


class DafModule(Module):
    """Dense-attention fusion: three PFN streams, gated after encoding."""

    def __init__(self, rng: np.random.Generator, pfn_p_in: int = LIDAR_CHANNELS):
        super().__init__()
        if pfn_p_in < LIDAR_CHANNELS:
            raise ConfigError(
                f"pfn_p input dim {pfn_p_in} cannot hold {LIDAR_CHANNELS} "
                f"lidar channels")
        self.mlp_pd = MlpPd(rng)
        self.pfn_p_in = int(pfn_p_in)
        self.pfn_p = PillarFeatureNet(self.pfn_p_in, 64, rng)
        self.pfn_pi = PillarFeatureNet(LIDAR_CHANNELS + IMAGE_FEATURE_DIM,
                                       64, rng)
        self.pfn_i = PillarFeatureNet(RGB_CHANNELS, 64, rng)
        concat_dim = 64 * 3
        self.att_p = AttentionMlp(concat_dim, concat_dim, 64, rng)
        self.att_pi = AttentionMlp(concat_dim, concat_dim, 64, rng)
        self.att_i = AttentionMlp(concat_dim, concat_dim, 64, rng)

    def forward(self, batch: PillarBatch) -> Tensor:
        streams = daf_build_streams(batch, self)
        return daf_fuse(*streams, self)

    __call__ = forward


class PointFusionModule(Module):
    """Ablation: concat lidar and mapped image features, no attention."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.mlp_pd = MlpPd(rng)
        self.pfn = PillarFeatureNet(LIDAR_CHANNELS + IMAGE_FEATURE_DIM,
                                    64, rng)

    def forward(self, batch: PillarBatch) -> Tensor:
        f_p, rgb = split_batch_columns(batch)
        f_i = map_image_features(rgb, self.mlp_pd)
        return self.pfn(ad.concat([f_p, f_i], axis=1), batch.starts)

    __call__ = forward


class DenseFusionModule(Module):
    """Ablation: the three DAF streams concatenated, no attention."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.mlp_pd = MlpPd(rng)
        self.pfn_p_in = LIDAR_CHANNELS
        self.pfn_p = PillarFeatureNet(LIDAR_CHANNELS, 64, rng)
        self.pfn_pi = PillarFeatureNet(LIDAR_CHANNELS + IMAGE_FEATURE_DIM,
                                       64, rng)
        self.pfn_i = PillarFeatureNet(RGB_CHANNELS, 64, rng)

    def forward(self, batch: PillarBatch) -> Tensor:
        streams = daf_build_streams(batch, self)
        return ad.concat(list(streams), axis=1)

    __call__ = forward


class BaselineModule(Module):
    """Lidar-only pillar encoding; the image is ignored entirely."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.pfn = PillarFeatureNet(LIDAR_CHANNELS, 64, rng)

    def forward(self, batch: PillarBatch) -> Tensor:
        f_p, _ = split_batch_columns(batch)
        return self.pfn(f_p, batch.starts)

    __call__ = forward


class FusionFrontEnd(Module):
    """Mode-dispatched pillar encoder producing [P, C_mode] vectors."""

    def __init__(self, mode: str, rng: np.random.Generator,
                 pfn_p_in: int = LIDAR_CHANNELS):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(
                f"unknown fusion mode {mode!r}; pick one of {FUSION_MODES}")
        self.mode = mode
        if mode == "baseline":
            self.core = BaselineModule(rng)
        elif mode == "paf":
            self.core = PafModule(rng)
        elif mode == "point_fusion":
            self.core = PointFusionModule(rng)
        elif mode == "daf":
            self.core = DafModule(rng, pfn_p_in=pfn_p_in)
        else:
            self.core = DenseFusionModule(rng)

    @property
    def out_channels(self) -> int:
        return FUSION_CHANNELS[self.mode]

    def forward(self, batch: PillarBatch) -> Tensor:
        if batch.num_pillars == 0:
            return Tensor(np.zeros((0, self.out_channels)))
        return self.core(batch)

    __call__ = forward


def zero_attention(module: Module) -> None:
    """Force every attention gate to exactly sigmoid(0) = 0.5."""
    for mlp in _attention_mlps(module):
        for layer in (mlp.fc1, mlp.fc2):
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0


def _attention_mlps(module: Module):
    if isinstance(module, FusionFrontEnd):
        module = module.core
    if isinstance(module, PafModule):
        return [module.mlp_p, module.mlp_i]
    if isinstance(module, DafModule):
        return [module.att_p, module.att_pi, module.att_i]
    return []


def dimension_report(front: FusionFrontEnd) -> Dict[str, tuple]:
    """Layer widths as actually constructed, keyed by role."""
    report: Dict[str, tuple] = {"fusion_channels": (front.out_channels,)}
    core = front.core
    if hasattr(core, "mlp_pd"):
        blocks = core.mlp_pd.blocks
        report["mlp_pd"] = (blocks[0].linear.weight.shape[1],
                            blocks[0].linear.weight.shape[0],
                            blocks[1].linear.weight.shape[0])

    def att_dims(mlp: AttentionMlp) -> tuple:
        return (mlp.fc1.weight.shape[1], mlp.fc1.weight.shape[0],
                mlp.fc2.weight.shape[0])

    def pfn_dims(pfn: PillarFeatureNet) -> tuple:
        return (pfn.block.linear.weight.shape[1],
                pfn.block.linear.weight.shape[0])

    if isinstance(core, PafModule):
        report["attention_p"] = att_dims(core.mlp_p)
        report["attention_i"] = att_dims(core.mlp_i)
        report["pfn"] = pfn_dims(core.pfn)
    elif isinstance(core, DafModule):
        report["attention_p"] = att_dims(core.att_p)
        report["attention_pi"] = att_dims(core.att_pi)
        report["attention_i"] = att_dims(core.att_i)
        report["pfn_p"] = pfn_dims(core.pfn_p)
        report["pfn_pi"] = pfn_dims(core.pfn_pi)
        report["pfn_i"] = pfn_dims(core.pfn_i)
    elif isinstance(core, (PointFusionModule, BaselineModule)):
        report["pfn"] = pfn_dims(core.pfn)
    elif isinstance(core, DenseFusionModule):
        report["pfn_p"] = pfn_dims(core.pfn_p)
        report["pfn_pi"] = pfn_dims(core.pfn_pi)
        report["pfn_i"] = pfn_dims(core.pfn_i)
    return report
