"""Run configuration: a typed tree loaded from YAML with strict key checking.

Every section below maps one-to-one onto a YAML mapping.  Unknown keys are
rejected with the full dotted path so a typo in a config file fails loudly
instead of silently falling back to a default.  ``load_config`` followed by
``save_config`` followed by ``load_config`` yields an equal ``RunConfig``.

Environment overrides are restricted to dataset locations:

    PILLARFUSE_DATA_ROOT   overrides dataset.root
    PILLARFUSE_GT_DB       overrides train.gt_database

Everything else must come from the file or the defaults.
"""

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import yaml

from .errors import ConfigError
from .fusion import FUSION_MODES
from .pillars import PillarGridConfig

ENV_DATA_ROOT = "PILLARFUSE_DATA_ROOT"
ENV_GT_DB = "PILLARFUSE_GT_DB"

DIFFICULTY_NAMES = ("easy", "moderate", "hard")


@dataclass
class DatasetSection:
    root: str = "data/synth"


@dataclass
class GridSection:
    x_range: Tuple[float, float] = (0.0, 16.0)
    y_range: Tuple[float, float] = (-8.0, 8.0)
    z_range: Tuple[float, float] = (-3.0, 1.0)
    pillar_size: float = 0.5
    max_pillars: int = 4096
    max_points_per_pillar: int = 64

    def to_pillar_config(self) -> PillarGridConfig:
        return PillarGridConfig(
            x_range=self.x_range,
            y_range=self.y_range,
            z_range=self.z_range,
            pillar_size=self.pillar_size,
            max_pillars=self.max_pillars,
            max_points_per_pillar=self.max_points_per_pillar,
        )


@dataclass
class BackboneSection:
    # each block is (num_convs, stride, channels)
    blocks: List[Tuple[int, int, int]] = field(
        default_factory=lambda: [(2, 1, 32), (2, 2, 64)])
    up_channels: Tuple[int, ...] = (32, 32)


@dataclass
class AnchorSection:
    size: Tuple[float, float, float] = (1.6, 3.9, 1.56)
    z_center: float = -1.0


@dataclass
class MatchSection:
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    force_match: bool = True


@dataclass
class DafSection:
    # input width of the lidar-only stream; values above 9 zero-pad
    pfn_p_in: int = 9


@dataclass
class TrainSection:
    steps: int = 200
    lr: float = 2e-3
    weight_decay: float = 1e-2
    checkpoint: str = "out/model.ckpt"
    loss_log: str = "out/loss.csv"
    gt_database: Optional[str] = None
    max_paste: int = 0
    global_augment: bool = False
    per_object_noise: bool = False


@dataclass
class InferSection:
    checkpoint: str = "out/model.ckpt"
    score_threshold: float = 0.3
    nms_threshold: float = 0.5
    results_dir: str = "out/results"


@dataclass
class EvalSection:
    iou_threshold: float = 0.7
    score_thresholds: Tuple[float, ...] = (0.4, 0.1)
    bg_iou_cutoff: float = 0.1
    count_difficulty: str = "moderate"


@dataclass
class SynthSection:
    frames: int = 8
    cars_per_frame: int = 2
    decoys_per_frame: int = 0
    image_width: int = 384
    image_height: int = 240
    focal_length: float = 200.0
    points_per_car: int = 80
    ground_points: int = 60


@dataclass
class RunConfig:
    seed: int = 0
    fusion_mode: str = "paf"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    grid: GridSection = field(default_factory=GridSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    matching: MatchSection = field(default_factory=MatchSection)
    daf: DafSection = field(default_factory=DafSection)
    train: TrainSection = field(default_factory=TrainSection)
    infer: InferSection = field(default_factory=InferSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)


def _coerce(value, hint, path: str):
    """Coerce a parsed YAML value to the annotated field type."""
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(hint):
        return _from_mapping(value, hint, path)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError("%s: expected a list, got %r" % (path, value))
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            elem_hints = [args[0]] * len(value)
        else:
            if len(value) != len(args):
                raise ConfigError("%s: expected %d entries, got %d"
                                  % (path, len(args), len(value)))
            elem_hints = list(args)
        return tuple(_coerce(v, h, "%s[%d]" % (path, i))
                     for i, (v, h) in enumerate(zip(value, elem_hints)))
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError("%s: expected a list, got %r" % (path, value))
        elem = typing.get_args(hint)[0]
        return [_coerce(v, elem, "%s[%d]" % (path, i))
                for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("%s: expected a boolean, got %r" % (path, value))
        return value
    if hint is int:
        # bool is an int subclass; reject it explicitly
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("%s: expected an integer, got %r" % (path, value))
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("%s: expected a number, got %r" % (path, value))
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("%s: expected a string, got %r" % (path, value))
        return value
    raise ConfigError("%s: unsupported config field type %r" % (path, hint))


def _from_mapping(data, cls, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("%s: expected a mapping, got %r" % (path, data))
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("%s: unknown key(s) %s" % (path, ", ".join(
            "%s.%s" % (path, k) if path else k for k in unknown)))
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = "%s.%s" % (path, f.name) if path else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub)
    return cls(**kwargs)


def _to_plain(obj):
    """Dataclass tree -> YAML-safe nested dict (tuples become lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def validate_config(cfg: RunConfig) -> None:
    if cfg.fusion_mode not in FUSION_MODES:
        raise ConfigError("fusion_mode: unknown mode %r (expected one of %s)"
                          % (cfg.fusion_mode, ", ".join(sorted(FUSION_MODES))))
    if cfg.eval.count_difficulty not in DIFFICULTY_NAMES:
        raise ConfigError("eval.count_difficulty: %r is not one of %s"
                          % (cfg.eval.count_difficulty,
                             ", ".join(DIFFICULTY_NAMES)))
    if cfg.train.steps < 0:
        raise ConfigError("train.steps: must be >= 0")
    if cfg.train.lr <= 0.0:
        raise ConfigError("train.lr: must be positive")
    if cfg.train.max_paste < 0:
        raise ConfigError("train.max_paste: must be >= 0")
    if not 0.0 <= cfg.infer.score_threshold <= 1.0:
        raise ConfigError("infer.score_threshold: must lie in [0, 1]")
    if not 0.0 <= cfg.infer.nms_threshold <= 1.0:
        raise ConfigError("infer.nms_threshold: must lie in [0, 1]")
    for i, t in enumerate(cfg.eval.score_thresholds):
        if not 0.0 <= t <= 1.0:
            raise ConfigError("eval.score_thresholds[%d]: must lie in [0, 1]"
                              % i)
    if not 0.0 < cfg.matching.pos_iou <= 1.0:
        raise ConfigError("matching.pos_iou: must lie in (0, 1]")
    if not 0.0 <= cfg.matching.neg_iou <= cfg.matching.pos_iou:
        raise ConfigError("matching.neg_iou: must lie in [0, pos_iou]")
    if cfg.daf.pfn_p_in < 9:
        raise ConfigError("daf.pfn_p_in: must be >= 9 (lidar points carry "
                          "9 channels)")
    if cfg.synth.frames <= 0:
        raise ConfigError("synth.frames: must be positive")
    if cfg.synth.image_width < 8 or cfg.synth.image_height < 8:
        raise ConfigError("synth.image_width/image_height: must be >= 8")
    # grid arithmetic is validated by the pillar config itself
    cfg.grid.to_pillar_config()


def apply_env_overrides(cfg: RunConfig,
                        env: Optional[dict] = None) -> RunConfig:
    """Overlay dataset-path environment variables onto ``cfg`` in place."""
    if env is None:
        env = os.environ
    root = env.get(ENV_DATA_ROOT)
    if root:
        cfg.dataset.root = root
    db = env.get(ENV_GT_DB)
    if db:
        cfg.train.gt_database = db
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_mapping(data, RunConfig, "")
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def load_config(path: str, env: Optional[dict] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError("config file not found: %s" % path)
    except yaml.YAMLError as exc:
        raise ConfigError("config file %s is not valid YAML: %s" % (path, exc))
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config file %s: top level must be a mapping" % path)
    cfg = config_from_dict(data)
    apply_env_overrides(cfg, env)
    validate_config(cfg)
    return cfg


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
