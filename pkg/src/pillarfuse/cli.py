"""Command line driver.

Subcommands cover the whole pipeline at desk scale:

    synth      generate a synthetic KITTI-layout dataset
    build-db   crop labeled objects into a paste-augmentation database
    train      fit a detector on one dataset, logging per-step losses
    infer      run a checkpoint over a dataset, one result file per frame
    eval       score result files against labels, writing report files
    selftest   quick built-in oracle checks of the numeric core

Exit codes: 0 success, 1 strict-mode evaluation failure, 2 configuration
problem, 3 data or format problem, 4 numeric failure.
"""

import argparse
import hashlib
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .augment import Scene, build_gt_database, global_augment, \
    per_object_noise, sample_and_paste, GtSampleDatabase
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_env_overrides, load_config, \
    validate_config
from .errors import ConfigError, ContractError, EmptySetError, FormatError, \
    NumericError, ShapeError
from .evaluation import evaluate_frames, format_human, format_machine, \
    load_det_frame, load_gt_frame
from .fusion import FUSION_MODES, FusionFrontEnd, dimension_report
from .geometry import Box3D, bev_iou
from .kitti_io import CAR_CLASS, ImageRaster, attach_rgb, frame_paths, \
    label_from_lidar_box, lidar_box_from_label, list_frame_ids, \
    load_calibration, load_image, load_labels, load_pointcloud, \
    project_points, write_labels
from .layers import AdamW
from .network import BackboneConfig, Detector, MatchConfig, build_sample, \
    infer, total_loss, train_step
from .synthetic import write_dataset
from . import autodiff
from .autodiff import Tensor

EXIT_OK = 0
EXIT_STRICT = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# -- shared plumbing -----------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = apply_env_overrides(RunConfig())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.fusion is not None:
        cfg.fusion_mode = args.fusion
    validate_config(cfg)
    return cfg


def _build_detector(cfg: RunConfig) -> Detector:
    backbone = BackboneConfig(
        blocks=tuple(tuple(b) for b in cfg.backbone.blocks),
        up_channels=tuple(cfg.backbone.up_channels))
    return Detector(
        cfg.grid.to_pillar_config(), cfg.fusion_mode,
        np.random.default_rng(cfg.seed),
        backbone_config=backbone,
        anchor_size=cfg.anchors.size,
        anchor_z=cfg.anchors.z_center,
        match=MatchConfig(pos_iou=cfg.matching.pos_iou,
                          neg_iou=cfg.matching.neg_iou,
                          force_match=cfg.matching.force_match),
        pfn_p_in=cfg.daf.pfn_p_in)


def _frame_rng(seed: int, frame_id: str) -> np.random.Generator:
    """Per-frame generator that is stable under worker reordering."""
    digest = hashlib.sha256(frame_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def _load_scene(root, frame_id: str, fusion_mode: str,
                with_labels: bool) -> Tuple[Scene, object, ImageRaster]:
    """Load one frame as an augmentable scene plus calib and raster.

    When the fusion mode is lidar-only a missing image is tolerated:
    colors become zeros and a blank raster stands in for 2D bboxes.
    """
    paths = frame_paths(root, frame_id)
    cloud = load_pointcloud(paths["velodyne"])
    calib = load_calibration(paths["calib"])
    if paths["image"].exists():
        image = load_image(paths["image"])
        rgb = attach_rgb(cloud, project_points(cloud, calib, image),
                         image).rgb
    elif fusion_mode == "baseline":
        width = int(round(2.0 * calib.P2[0, 2]))
        height = int(round(2.0 * calib.P2[1, 2]))
        image = ImageRaster(np.zeros((max(height, 1), max(width, 1), 3),
                                     dtype=np.uint8))
        rgb = np.zeros((len(cloud), 3))
    else:
        raise FormatError(f"{paths['image']}: image required for fusion "
                          f"mode {fusion_mode!r}")
    boxes: List[Box3D] = []
    if with_labels and paths["label"].exists():
        for label in load_labels(paths["label"]):
            if label.cls == CAR_CLASS:
                boxes.append(lidar_box_from_label(label, calib))
    return Scene(xyzr=cloud.xyzr, rgb=rgb, gt_boxes=boxes), calib, image


def _pool_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require_frames(root) -> List[str]:
    ids = list_frame_ids(root)
    if not ids:
        raise FormatError(f"{Path(root) / 'velodyne'}: directory is empty")
    return ids


# -- subcommands ----------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    root = args.out or cfg.dataset.root
    frames = args.frames if args.frames is not None else cfg.synth.frames
    ids = write_dataset(root, cfg, seed=cfg.seed, frames=frames)
    print(f"wrote {len(ids)} frames to {root}")
    return EXIT_OK


def cmd_build_db(cfg: RunConfig, args) -> int:
    root = cfg.dataset.root
    ids = _require_frames(root)
    missing = []
    for frame_id in ids:
        paths = frame_paths(root, frame_id)
        for key in ("velodyne", "calib", "image", "label"):
            if not paths[key].exists():
                missing.append(str(paths[key]))
    if missing:
        raise FormatError("missing dataset files:\n  "
                          + "\n  ".join(missing))
    scenes = []
    for frame_id in ids:
        scene, _, _ = _load_scene(root, frame_id, cfg.fusion_mode,
                                  with_labels=True)
        scenes.append(scene)
    db = build_gt_database(scenes)
    out = args.out or cfg.train.gt_database or str(Path(root)
                                                   / "gt_samples.bin")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    db.save(out)
    print(f"cropped {len(db)} object samples from {len(ids)} frames "
          f"into {out}")
    return EXIT_OK


def _augmented(scene: Scene, cfg: RunConfig,
               db: Optional[GtSampleDatabase],
               rng: np.random.Generator) -> Scene:
    out = scene.copy()
    if db is not None and cfg.train.max_paste > 0:
        out = sample_and_paste(out, db, cfg.train.max_paste, rng)
    if cfg.train.global_augment:
        out = global_augment(out, rng)
    if cfg.train.per_object_noise:
        out = per_object_noise(out, rng)
    return out


def cmd_train(cfg: RunConfig, args) -> int:
    root = cfg.dataset.root
    ids = _require_frames(root)
    grid = cfg.grid.to_pillar_config()
    detector = _build_detector(cfg)
    optimizer = AdamW(detector.parameters(), lr=cfg.train.lr,
                      weight_decay=cfg.train.weight_decay)
    db = None
    if cfg.train.gt_database and cfg.train.max_paste > 0:
        db = GtSampleDatabase.load(cfg.train.gt_database)

    scenes = [_load_scene(root, fid, cfg.fusion_mode, with_labels=True)[0]
              for fid in ids]
    data_rng = np.random.default_rng([cfg.seed, 1])

    ckpt_path = Path(cfg.train.checkpoint)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(cfg.train.loss_log)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    last_good = detector.state_dict()
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step,total,loc,cls,dir,n_pos\n")
        for step in range(cfg.train.steps):
            frame_id = ids[step % len(ids)]
            scene = _augmented(scenes[step % len(ids)], cfg, db, data_rng)
            sample = build_sample(scene.xyzr, scene.rgb, scene.gt_boxes,
                                  grid, data_rng, frame_id=frame_id)
            try:
                metrics = train_step(detector, sample, optimizer)
            except NumericError:
                # keep the last finite model so the run is salvageable
                save_checkpoint(ckpt_path, last_good)
                log.flush()
                print(f"aborting at step {step}; last good checkpoint "
                      f"kept at {ckpt_path}", file=sys.stderr)
                raise
            log.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                      % (step, metrics["total"], metrics["loc"],
                         metrics["cls"], metrics["dir"], metrics["n_pos"]))
            log.flush()
            last_good = detector.state_dict()

    save_checkpoint(ckpt_path, detector.state_dict())
    print(f"trained {cfg.train.steps} steps over {len(ids)} frames; "
          f"checkpoint {ckpt_path}, loss log {log_path}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args) -> int:
    root = cfg.dataset.root
    ids = _require_frames(root)
    grid = cfg.grid.to_pillar_config()
    detector = _build_detector(cfg)
    detector.load_state_dict(load_checkpoint(cfg.infer.checkpoint))
    detector.eval()

    results_dir = Path(cfg.infer.results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)

    def run_frame(frame_id: str):
        scene, calib, image = _load_scene(root, frame_id, cfg.fusion_mode,
                                          with_labels=False)
        sample = build_sample(scene.xyzr, scene.rgb, [], grid,
                              _frame_rng(cfg.seed, frame_id),
                              frame_id=frame_id)
        detections = infer(detector, sample,
                           score_threshold=cfg.infer.score_threshold,
                           nms_threshold=cfg.infer.nms_threshold)
        labels = [label_from_lidar_box(box, calib, image, CAR_CLASS,
                                       score=score)
                  for box, score in detections]
        return frame_id, labels

    results = _pool_map(run_frame, ids, args.workers)
    for frame_id, labels in sorted(results, key=lambda r: r[0]):
        write_labels(results_dir / f"{frame_id}.txt", labels)
    total = sum(len(labels) for _, labels in results)
    print(f"wrote {len(ids)} result files ({total} detections) "
          f"to {results_dir}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    labels_dir = Path(cfg.dataset.root) / "label_2"
    results_dir = Path(args.results or cfg.infer.results_dir)
    gt_ids = sorted(p.stem for p in labels_dir.glob("*.txt"))
    if not gt_ids:
        raise FormatError(f"{labels_dir}: no label files")
    det_ids = sorted(p.stem for p in results_dir.glob("*.txt"))
    missing = sorted(set(gt_ids) - set(det_ids))
    unmatched = sorted(set(det_ids) - set(gt_ids))
    if missing or unmatched:
        raise FormatError(
            "frame id mismatch between labels and results; "
            "missing result files: %s; results without labels: %s"
            % (", ".join(missing) or "none",
               ", ".join(unmatched) or "none"))

    def load_pair(frame_id: str):
        return (frame_id,
                load_det_frame(results_dir / f"{frame_id}.txt"),
                load_gt_frame(labels_dir / f"{frame_id}.txt"))

    loaded = _pool_map(load_pair, gt_ids, args.workers)
    dets_by_frame = {fid: dets for fid, dets, _ in loaded}
    gts_by_frame = {fid: gts for fid, _, gts in loaded}

    thresholds = list(cfg.eval.score_thresholds)
    for extra in args.count_threshold or ():
        if extra not in thresholds:
            thresholds.append(extra)

    report = evaluate_frames(dets_by_frame, gts_by_frame,
                             iou_threshold=cfg.eval.iou_threshold,
                             count_thresholds=thresholds,
                             count_difficulty=cfg.eval.count_difficulty,
                             bg_iou_cutoff=cfg.eval.bg_iou_cutoff)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_machine.txt").write_text(format_machine(report),
                                              encoding="utf-8")
    human = format_human(report)
    (out_dir / "eval_human.txt").write_text(human, encoding="utf-8")
    print(human, end="")

    if args.strict:
        gaps = report.unreachable_positions()
        if gaps:
            for level, space, pos in gaps:
                print(f"strict: precision at recall {pos:.4f} unreachable "
                      f"({space}, {level})", file=sys.stderr)
            return EXIT_STRICT
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, args) -> int:
    rng = np.random.default_rng(0)

    # finite-difference probe of a tiny expression graph
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 2)))
    loss = autodiff.sum_(autodiff.relu(w @ x) * 0.3)
    loss.backward()
    idx, step = (2, 1), 1e-6
    bumped = w.data.copy()
    bumped[idx] += step
    up = float((np.maximum(bumped @ x.data, 0.0) * 0.3).sum())
    bumped[idx] -= 2 * step
    down = float((np.maximum(bumped @ x.data, 0.0) * 0.3).sum())
    fd = (up - down) / (2 * step)
    if abs(fd - w.grad[idx]) > 1e-6 * max(1.0, abs(fd)):
        raise NumericError("selftest: finite-difference gradient mismatch")
    print("selftest: autodiff gradient ok")

    ones = Tensor(np.ones(1))
    if total_loss(ones, ones, ones, 1).item() != 3.2:
        raise NumericError("selftest: loss fixture != 3.2")
    if total_loss(ones, ones, ones, 2).item() != 1.6:
        raise NumericError("selftest: loss fixture != 1.6")
    print("selftest: loss weighting ok")

    expected = {
        "paf": {"fusion_channels": (64,), "mlp_pd": (3, 96, 16),
                "attention_p": (25, 25, 9), "attention_i": (25, 25, 16),
                "pfn": (50, 64)},
        "daf": {"fusion_channels": (256,), "mlp_pd": (3, 96, 16),
                "attention_p": (192, 192, 64),
                "attention_pi": (192, 192, 64), "attention_i": (192, 192, 64),
                "pfn_p": (9, 64), "pfn_pi": (25, 64), "pfn_i": (3, 64)},
    }
    for mode, want in expected.items():
        got = dimension_report(FusionFrontEnd(mode, np.random.default_rng(1)))
        if got != want:
            raise NumericError(f"selftest: {mode} dimensions {got} != {want}")
    print("selftest: fusion dimensions ok")

    a = Box3D(0, 0, 0, 2, 2, 2, 0.0)
    b = Box3D(1, 0, 0, 2, 2, 2, 0.0)
    if abs(bev_iou(a, b) - 1.0 / 3.0) > 1e-12:
        raise NumericError("selftest: axis-aligned BEV IoU != 1/3")
    for _ in range(20):
        p = Box3D(*rng.normal(size=3), *rng.uniform(1, 3, size=3),
                  rng.uniform(-np.pi, np.pi))
        q = Box3D(*rng.normal(size=3), *rng.uniform(1, 3, size=3),
                  rng.uniform(-np.pi, np.pi))
        if bev_iou(p, q) != bev_iou(q, p):
            raise NumericError("selftest: BEV IoU asymmetry")
    print("selftest: rotated box overlap ok")
    print("selftest: all checks passed")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="YAML run configuration")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the configured seed")
    common.add_argument("--fusion", choices=sorted(FUSION_MODES),
                        help="override the configured fusion mode")
    common.add_argument("--strict", action="store_true",
                        help="eval: fail when any recall position is "
                        "unreachable")
    common.add_argument("--workers", type=int, default=1, metavar="N",
                        help="worker threads for per-frame fan-out")

    parser = argparse.ArgumentParser(
        prog="pillarfuse",
        description="Desk-scale lidar+RGB 3D vehicle detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset")
    p.add_argument("--out", metavar="DIR", help="dataset root to write")
    p.add_argument("--frames", type=int, metavar="N")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-db", parents=[common],
                       help="crop labeled objects into a sample database")
    p.add_argument("--out", metavar="PATH", help="database file to write")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common],
                       help="write per-frame detection files")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common],
                       help="score detection files against labels")
    p.add_argument("--results", metavar="DIR",
                   help="detection directory (default: infer.results_dir)")
    p.add_argument("--out", metavar="DIR", default="out/eval",
                   help="directory for report files")
    p.add_argument("--count-threshold", type=float, action="append",
                   metavar="T", help="extra score threshold for TP/FP "
                   "counts (repeatable)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", parents=[common],
                       help="run built-in numeric sanity checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, ContractError, EmptySetError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
