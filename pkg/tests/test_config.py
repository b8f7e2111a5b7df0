"""Config tree: strict key checking with dotted paths, YAML round trips,
type coercion rules, validation, and the two environment overrides."""

from pathlib import Path

import pytest

from pillarfuse.config import (ENV_DATA_ROOT, ENV_GT_DB, RunConfig,
                               apply_env_overrides, config_from_dict,
                               config_to_dict, load_config, save_config,
                               validate_config)
from pillarfuse.errors import ConfigError

CONFIGS_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_default_tree_is_valid():
    cfg = RunConfig()
    validate_config(cfg)
    grid = cfg.grid.to_pillar_config()
    assert (grid.nx, grid.ny) == (32, 32)
    assert grid.max_points_per_pillar == cfg.grid.max_points_per_pillar


def test_dict_round_trip_preserves_everything():
    cfg = config_from_dict({
        "seed": 7,
        "fusion_mode": "daf",
        "grid": {"x_range": [0.0, 8.0], "y_range": [-4.0, 4.0],
                 "pillar_size": 1.0},
        "backbone": {"blocks": [[1, 1, 16]], "up_channels": [16]},
        "daf": {"pfn_p_in": 16},
        "train": {"steps": 11, "gt_database": "db.bin"},
        "eval": {"score_thresholds": [0.5]},
    })
    assert cfg.seed == 7
    assert cfg.backbone.blocks == [(1, 1, 16)]
    assert cfg.train.gt_database == "db.bin"
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_yaml_round_trip_preserves_everything(tmp_path):
    cfg = config_from_dict({"fusion_mode": "point_fusion",
                            "train": {"lr": 0.004}})
    path = tmp_path / "run.yaml"
    save_config(cfg, path)
    assert load_config(path, env={}) == cfg


def test_unknown_keys_fail_with_dotted_path():
    with pytest.raises(ConfigError, match=r"train\.step"):
        config_from_dict({"train": {"step": 5}})
    with pytest.raises(ConfigError, match="sed"):
        config_from_dict({"sed": 1})


def test_missing_section_uses_defaults():
    cfg = config_from_dict({"seed": 3})
    assert cfg.train == RunConfig().train
    # an explicitly empty section also means defaults
    assert config_from_dict({"train": None}).train == RunConfig().train


@pytest.mark.parametrize("data,needle", [
    ({"train": {"steps": True}}, "train.steps"),
    ({"train": {"steps": "many"}}, "train.steps"),
    ({"dataset": {"root": 5}}, "dataset.root"),
    ({"train": 5}, "train"),
    ({"anchors": {"size": [1.6, 3.9]}}, "expected 3 entries"),
    ({"grid": {"x_range": 16.0}}, "expected a list"),
    ({"matching": {"force_match": 1}}, "matching.force_match"),
])
def test_type_errors_name_the_offending_field(data, needle):
    with pytest.raises(ConfigError, match=needle):
        config_from_dict(data)


def test_integers_widen_to_float_fields():
    cfg = config_from_dict({"train": {"lr": 1}})
    assert isinstance(cfg.train.lr, float)
    assert cfg.train.lr == 1.0


def test_optional_gt_database_accepts_null():
    assert config_from_dict({}).train.gt_database is None
    cfg = config_from_dict({"train": {"gt_database": None}})
    assert cfg.train.gt_database is None


@pytest.mark.parametrize("data", [
    {"fusion_mode": "magic"},
    {"eval": {"count_difficulty": "expert"}},
    {"train": {"steps": -1}},
    {"train": {"lr": 0.0}},
    {"train": {"max_paste": -2}},
    {"infer": {"score_threshold": 1.5}},
    {"infer": {"nms_threshold": -0.1}},
    {"eval": {"score_thresholds": [0.4, 2.0]}},
    {"matching": {"pos_iou": 0.0}},
    {"matching": {"neg_iou": 0.9, "pos_iou": 0.6}},
    {"daf": {"pfn_p_in": 8}},
    {"synth": {"frames": 0}},
    {"synth": {"image_width": 4}},
    {"grid": {"x_range": [0.0, 15.7], "pillar_size": 0.5}},
])
def test_validation_rejects_out_of_range_values(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_env_overrides_touch_only_dataset_paths():
    cfg = RunConfig()
    baseline = config_to_dict(cfg)
    apply_env_overrides(cfg, env={ENV_DATA_ROOT: "/elsewhere/data",
                                  ENV_GT_DB: "/elsewhere/gt.bin",
                                  "PILLARFUSE_SEED": "99"})
    assert cfg.dataset.root == "/elsewhere/data"
    assert cfg.train.gt_database == "/elsewhere/gt.bin"
    changed = config_to_dict(cfg)
    baseline["dataset"]["root"] = "/elsewhere/data"
    baseline["train"]["gt_database"] = "/elsewhere/gt.bin"
    assert changed == baseline


def test_empty_env_values_are_ignored():
    cfg = RunConfig()
    apply_env_overrides(cfg, env={ENV_DATA_ROOT: "", ENV_GT_DB: ""})
    assert cfg.dataset.root == RunConfig().dataset.root
    assert cfg.train.gt_database is None


def test_load_config_applies_env(tmp_path):
    path = tmp_path / "run.yaml"
    save_config(RunConfig(), path)
    cfg = load_config(path, env={ENV_DATA_ROOT: "/mnt/frames"})
    assert cfg.dataset.root == "/mnt/frames"


def test_load_config_error_paths(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml", env={})
    broken = tmp_path / "broken.yaml"
    broken.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(broken, env={})
    listy = tmp_path / "listy.yaml"
    listy.write_text("- a\n- b\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(listy, env={})


@pytest.mark.parametrize("name,mode", [("desk.yaml", "paf"),
                                       ("full_kitti.yaml", "daf")])
def test_shipped_configs_load_and_round_trip(name, mode):
    cfg = load_config(CONFIGS_DIR / name, env={})
    assert cfg.fusion_mode == mode
    assert config_from_dict(config_to_dict(cfg)) == cfg
    grid = cfg.grid.to_pillar_config()
    stride = cfg.backbone.blocks[0][1]
    assert grid.nx % stride == 0 and grid.ny % stride == 0
