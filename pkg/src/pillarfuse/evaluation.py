"""KITTI-style detection scoring.

Labels and detections are camera-frame text files; boxes are lifted
into a calibration-free scoring frame (X = x_cam, Y = z_cam,
Z = -y_cam) where IoU can be computed directly. That map is a proper
rigid rotation, so every overlap equals its lidar-frame counterpart.

Matching follows the official devkit shape: greedy over detections in
score order, one match per ground truth, DontCare regions discard
otherwise-unmatched detections, and out-of-difficulty ground truths
absorb matches without counting toward recall.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, EmptySetError, FormatError
from .geometry import Box3D, bev_iou, iou3d
from .kitti_io import CAR_CLASS, DONTCARE_CLASS, GroundTruthLabel, load_labels

IOU_THRESHOLD = 0.7
DONTCARE_OVERLAP = 0.5
BG_IOU_CUTOFF = 0.1
RECALL_POSITIONS = (0.725, 0.75, 0.775, 0.8)
DIFFICULTIES = ("easy", "moderate", "hard")

# level: (min image-box height px, max occlusion, max truncation)
_DIFFICULTY_THRESHOLDS = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


def difficulty_filter(label: GroundTruthLabel, level: str) -> bool:
    """True when the object is assessable at the given difficulty."""
    if level not in _DIFFICULTY_THRESHOLDS:
        raise ContractError(f"unknown difficulty {level!r}")
    min_height, max_occ, max_trunc = _DIFFICULTY_THRESHOLDS[level]
    return (label.bbox_height >= min_height
            and label.occlusion <= max_occ
            and label.truncation <= max_trunc)


def eval_box_from_label(label: GroundTruthLabel) -> Optional[Box3D]:
    """Scoring-frame box, or None when the 3D fields are placeholders."""
    if label.w <= 0 or label.l <= 0 or label.h <= 0:
        return None
    x, y, z = label.location
    return Box3D(cx=float(x), cy=float(z), cz=float(-y + 0.5 * label.h),
                 w=label.w, l=label.l, h=label.h, yaw=-label.ry)


@dataclass
class EvalGt:
    label: GroundTruthLabel
    box: Optional[Box3D]

    @property
    def is_dontcare(self) -> bool:
        return self.label.cls == DONTCARE_CLASS


@dataclass
class EvalDet:
    box: Box3D
    score: float


@dataclass
class DetMatch:
    tag: str              # TP | FP | IGNORED | DISCARDED
    gt_index: int         # -1 unless TP/IGNORED
    max_iou: float        # vs any valid GT box, DontCare included
    score: float


@dataclass
class FrameMatch:
    det_matches: List[DetMatch]
    num_gt: int           # countable ground truths at this difficulty


def load_gt_frame(path) -> List[EvalGt]:
    return [EvalGt(label=lb, box=eval_box_from_label(lb))
            for lb in load_labels(path)]


def load_det_frame(path) -> List[EvalDet]:
    dets = []
    for lb in load_labels(path):
        if lb.score is None:
            raise FormatError(f"{path}: detection line without a score")
        if lb.cls != CAR_CLASS:
            continue
        box = eval_box_from_label(lb)
        if box is None:
            raise FormatError(f"{path}: detection with non-positive size")
        dets.append(EvalDet(box=box, score=lb.score))
    dets.sort(key=lambda d: -d.score)
    return dets


def match_frame(dets: Sequence[EvalDet], gts: Sequence[EvalGt], level: str,
                iou_fn: Callable[[Box3D, Box3D], float] = iou3d,
                iou_threshold: float = IOU_THRESHOLD) -> FrameMatch:
    """Greedy single-match assignment for one frame.

    Detections must arrive sorted by descending score. A detection
    claims the highest-IoU still-unmatched non-DontCare ground truth at
    or above the threshold: a TP if that ground truth is countable at
    this difficulty, an absorbed IGNORED otherwise. Unclaimed detections
    overlapping a DontCare footprint are DISCARDED; the rest are FPs.
    """
    scores = [d.score for d in dets]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise ContractError("detections must be sorted by descending score")

    countable = np.zeros(len(gts), dtype=bool)
    matchable = np.zeros(len(gts), dtype=bool)
    for g, gt in enumerate(gts):
        if gt.box is None or gt.is_dontcare:
            continue
        matchable[g] = True
        countable[g] = (gt.label.cls == CAR_CLASS
                        and difficulty_filter(gt.label, level))
    dontcare_boxes = [gt.box for gt in gts
                      if gt.is_dontcare and gt.box is not None]
    valid_boxes = [(g, gt.box) for g, gt in enumerate(gts)
                   if gt.box is not None]

    taken = np.zeros(len(gts), dtype=bool)
    matches: List[DetMatch] = []
    for det in dets:
        max_iou = 0.0
        for _, box in valid_boxes:
            max_iou = max(max_iou, iou_fn(det.box, box))
        best_g, best_iou = -1, -1.0
        for g in np.flatnonzero(matchable & ~taken):
            overlap = iou_fn(det.box, gts[g].box)
            # ties keep the lowest ground-truth index
            if overlap >= iou_threshold and overlap > best_iou:
                best_g, best_iou = int(g), overlap
        if best_g >= 0:
            taken[best_g] = True
            tag = "TP" if countable[best_g] else "IGNORED"
            matches.append(DetMatch(tag=tag, gt_index=best_g,
                                    max_iou=max_iou, score=det.score))
            continue
        if any(bev_iou(det.box, dc) > DONTCARE_OVERLAP
               for dc in dontcare_boxes):
            matches.append(DetMatch(tag="DISCARDED", gt_index=-1,
                                    max_iou=max_iou, score=det.score))
            continue
        matches.append(DetMatch(tag="FP", gt_index=-1,
                                max_iou=max_iou, score=det.score))
    return FrameMatch(det_matches=matches, num_gt=int(countable.sum()))


# -- precision/recall ----------------------------------------------------------


def pr_curve(scores: np.ndarray, is_tp: np.ndarray, num_gt: int
             ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, recall, precision) at each distinct score.

    Counts at a threshold cover every detection scoring at least that
    much, which matches re-running the greedy matcher on exactly that
    subset (earlier decisions never depend on later detections).
    """
    if num_gt < 1:
        raise EmptySetError("precision/recall needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if scores.shape != is_tp.shape:
        raise ContractError("scores and tp flags must align")
    if scores.size == 0:
        return (np.empty(0), np.empty(0), np.empty(0))
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = is_tp[order]
    cum_tp = np.cumsum(t)
    cum_fp = np.cumsum(~t)
    last = np.append(np.flatnonzero(np.diff(s) != 0.0), s.size - 1)
    recall = cum_tp[last] / num_gt
    precision = cum_tp[last] / (cum_tp[last] + cum_fp[last])
    return s[last], recall, precision


def interpolated_precision(recall: np.ndarray, precision: np.ndarray,
                           position: float) -> Optional[float]:
    """Max precision at recall >= position; None when unreachable."""
    eligible = precision[recall >= position]
    if eligible.size == 0:
        return None
    return float(eligible.max())


def ap40(scores: np.ndarray, is_tp: np.ndarray, num_gt: int) -> float:
    """Mean interpolated precision over recalls 1/40 .. 40/40."""
    _, recall, precision = pr_curve(scores, is_tp, num_gt)
    total = 0.0
    for i in range(1, 41):
        value = interpolated_precision(recall, precision, i / 40.0)
        total += value if value is not None else 0.0
    return total / 40.0


def precision_at_recall(recall: np.ndarray, precision: np.ndarray,
                        positions: Sequence[float] = RECALL_POSITIONS
                        ) -> Dict[float, Optional[float]]:
    """Interpolated precision per requested recall position.

    Unreachable positions map to None so callers can flag them instead
    of inventing a number.
    """
    return {float(p): interpolated_precision(recall, precision, p)
            for p in positions}


# -- counting -------------------------------------------------------------------


def fp_accounting(dets: Sequence[EvalDet], gts: Sequence[EvalGt],
                  score_threshold: float, level: str = "moderate",
                  iou_fn: Callable[[Box3D, Box3D], float] = iou3d,
                  iou_threshold: float = IOU_THRESHOLD,
                  bg_iou_cutoff: float = BG_IOU_CUTOFF
                  ) -> Tuple[int, int, int]:
    """(TP, FP, FP-from-background) for one frame above a score cutoff.

    A background FP has max-IoU below `bg_iou_cutoff` against every
    ground-truth box of any class.
    """
    kept = [d for d in dets if d.score >= score_threshold]
    kept.sort(key=lambda d: -d.score)
    result = match_frame(kept, gts, level, iou_fn=iou_fn,
                         iou_threshold=iou_threshold)
    tp = sum(1 for m in result.det_matches if m.tag == "TP")
    fp = sum(1 for m in result.det_matches if m.tag == "FP")
    fp_bg = sum(1 for m in result.det_matches
                if m.tag == "FP" and m.max_iou < bg_iou_cutoff)
    return tp, fp, fp_bg


def percentage_reduction(count_before: int, count_after: int) -> float:
    """(before - after) / before, as a percentage."""
    if count_before <= 0:
        raise EmptySetError("reduction needs a positive baseline count")
    return (count_before - count_after) / count_before * 100.0


def format_reduction(count_before: int, count_after: int) -> str:
    return f"{percentage_reduction(count_before, count_after):.2f}"


# -- whole-dataset evaluation ----------------------------------------------------


@dataclass
class ThresholdCounts:
    threshold: float
    tp: int
    fp: int
    fp_bg: int


@dataclass
class DifficultyReport:
    num_gt: int
    ap40_3d: float
    ap40_bev: float
    precision_3d: Dict[float, Optional[float]] = field(default_factory=dict)
    precision_bev: Dict[float, Optional[float]] = field(default_factory=dict)


@dataclass
class EvalReport:
    num_frames: int
    iou_threshold: float
    difficulties: Dict[str, DifficultyReport] = field(default_factory=dict)
    counts: List[ThresholdCounts] = field(default_factory=list)
    count_difficulty: str = "moderate"

    def unreachable_positions(self) -> List[Tuple[str, str, float]]:
        missing = []
        for level, rep in self.difficulties.items():
            for space, table in (("3d", rep.precision_3d),
                                 ("bev", rep.precision_bev)):
                for pos, value in table.items():
                    if value is None:
                        missing.append((level, space, pos))
        return missing


def _collect(dets_by_frame: Dict[str, List[EvalDet]],
             gts_by_frame: Dict[str, List[EvalGt]], level: str,
             iou_fn, iou_threshold: float
             ) -> Tuple[np.ndarray, np.ndarray, int]:
    scores: List[float] = []
    tps: List[bool] = []
    num_gt = 0
    for frame_id in sorted(gts_by_frame):
        result = match_frame(dets_by_frame.get(frame_id, []),
                             gts_by_frame[frame_id], level,
                             iou_fn=iou_fn, iou_threshold=iou_threshold)
        num_gt += result.num_gt
        for m in result.det_matches:
            if m.tag == "TP":
                scores.append(m.score)
                tps.append(True)
            elif m.tag == "FP":
                scores.append(m.score)
                tps.append(False)
    return np.asarray(scores), np.asarray(tps, dtype=bool), num_gt


def evaluate_frames(dets_by_frame: Dict[str, List[EvalDet]],
                    gts_by_frame: Dict[str, List[EvalGt]],
                    iou_threshold: float = IOU_THRESHOLD,
                    count_thresholds: Sequence[float] = (0.3,),
                    count_difficulty: str = "moderate",
                    bg_iou_cutoff: float = BG_IOU_CUTOFF) -> EvalReport:
    report = EvalReport(num_frames=len(gts_by_frame),
                        iou_threshold=iou_threshold,
                        count_difficulty=count_difficulty)
    for level in DIFFICULTIES:
        entry: Dict[str, object] = {}
        per_space = {}
        for space, iou_fn in (("3d", iou3d), ("bev", bev_iou)):
            scores, is_tp, num_gt = _collect(
                dets_by_frame, gts_by_frame, level, iou_fn, iou_threshold)
            if num_gt == 0:
                raise EmptySetError(
                    f"no countable ground truths at difficulty {level}")
            _, recall, precision = pr_curve(scores, is_tp, num_gt)
            per_space[space] = {
                "ap": ap40(scores, is_tp, num_gt),
                "par": precision_at_recall(recall, precision),
                "num_gt": num_gt,
            }
        report.difficulties[level] = DifficultyReport(
            num_gt=per_space["3d"]["num_gt"],
            ap40_3d=per_space["3d"]["ap"],
            ap40_bev=per_space["bev"]["ap"],
            precision_3d=per_space["3d"]["par"],
            precision_bev=per_space["bev"]["par"],
        )
    for threshold in count_thresholds:
        tp = fp = fp_bg = 0
        for frame_id in sorted(gts_by_frame):
            t, f, b = fp_accounting(
                dets_by_frame.get(frame_id, []), gts_by_frame[frame_id],
                threshold, level=count_difficulty,
                iou_threshold=iou_threshold, bg_iou_cutoff=bg_iou_cutoff)
            tp, fp, fp_bg = tp + t, fp + f, fp_bg + b
        report.counts.append(ThresholdCounts(threshold=float(threshold),
                                             tp=tp, fp=fp, fp_bg=fp_bg))
    return report


def evaluate_directories(results_dir, labels_dir,
                         iou_threshold: float = IOU_THRESHOLD,
                         count_thresholds: Sequence[float] = (0.3,),
                         count_difficulty: str = "moderate",
                         bg_iou_cutoff: float = BG_IOU_CUTOFF) -> EvalReport:
    """Score a directory of detection files against a label directory.

    Frame ids come from the label directory; a missing detection file
    simply contributes zero detections for that frame.
    """
    labels_dir = Path(labels_dir)
    results_dir = Path(results_dir)
    gt_files = sorted(labels_dir.glob("*.txt"))
    if not gt_files:
        raise FormatError(f"{labels_dir}: no label files")
    gts_by_frame = {p.stem: load_gt_frame(p) for p in gt_files}
    dets_by_frame = {}
    for frame_id in gts_by_frame:
        det_path = results_dir / f"{frame_id}.txt"
        dets_by_frame[frame_id] = (load_det_frame(det_path)
                                   if det_path.exists() else [])
    return evaluate_frames(dets_by_frame, gts_by_frame,
                           iou_threshold=iou_threshold,
                           count_thresholds=count_thresholds,
                           count_difficulty=count_difficulty,
                           bg_iou_cutoff=bg_iou_cutoff)


# -- report serialization ----------------------------------------------------------


def format_machine(report: EvalReport) -> str:
    """Line-oriented key/value rendering, parseable by parse_machine."""
    lines = ["report pillarfuse-eval v1",
             f"num_frames {report.num_frames}",
             f"iou_threshold {report.iou_threshold:.17g}",
             f"count_difficulty {report.count_difficulty}"]
    for level, rep in report.difficulties.items():
        lines.append(f"num_gt {level} {rep.num_gt}")
        lines.append(f"ap40 3d {level} {rep.ap40_3d:.17g}")
        lines.append(f"ap40 bev {level} {rep.ap40_bev:.17g}")
        for space, table in (("3d", rep.precision_3d),
                             ("bev", rep.precision_bev)):
            for pos in sorted(table):
                value = table[pos]
                rendered = "unreachable" if value is None else f"{value:.17g}"
                lines.append(
                    f"precision_at_recall {space} {level} {pos:.4f} {rendered}")
    for c in report.counts:
        lines.append(f"counts {c.threshold:.4f} tp {c.tp} fp {c.fp} "
                     f"fp_bg {c.fp_bg}")
    return "\n".join(lines) + "\n"


def parse_machine(text: str) -> EvalReport:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("report pillarfuse-eval"):
        raise FormatError("not a machine-format evaluation report")
    report = EvalReport(num_frames=0, iou_threshold=IOU_THRESHOLD)
    num_gts: Dict[str, int] = {}
    for line in lines[1:]:
        parts = line.split()
        key = parts[0]
        if key == "num_frames":
            report.num_frames = int(parts[1])
        elif key == "iou_threshold":
            report.iou_threshold = float(parts[1])
        elif key == "count_difficulty":
            report.count_difficulty = parts[1]
        elif key == "num_gt":
            num_gts[parts[1]] = int(parts[2])
        elif key == "ap40":
            space, level, value = parts[1], parts[2], float(parts[3])
            rep = report.difficulties.setdefault(
                level, DifficultyReport(num_gt=num_gts.get(level, 0),
                                        ap40_3d=0.0, ap40_bev=0.0))
            if space == "3d":
                rep.ap40_3d = value
            else:
                rep.ap40_bev = value
        elif key == "precision_at_recall":
            space, level, pos = parts[1], parts[2], float(parts[3])
            value = None if parts[4] == "unreachable" else float(parts[4])
            rep = report.difficulties.setdefault(
                level, DifficultyReport(num_gt=num_gts.get(level, 0),
                                        ap40_3d=0.0, ap40_bev=0.0))
            table = rep.precision_3d if space == "3d" else rep.precision_bev
            table[pos] = value
        elif key == "counts":
            report.counts.append(ThresholdCounts(
                threshold=float(parts[1]), tp=int(parts[3]),
                fp=int(parts[5]), fp_bg=int(parts[7])))
        else:
            raise FormatError(f"unknown report line: {line}")
    for level, rep in report.difficulties.items():
        rep.num_gt = num_gts.get(level, rep.num_gt)
    return report


def format_human(report: EvalReport) -> str:
    lines = [f"frames: {report.num_frames}   "
             f"IoU threshold: {report.iou_threshold:g}", ""]
    header = f"{'difficulty':<10} {'num_gt':>6} {'AP40 3D':>9} {'AP40 BEV':>9}"
    lines += [header, "-" * len(header)]
    for level in DIFFICULTIES:
        if level not in report.difficulties:
            continue
        rep = report.difficulties[level]
        lines.append(f"{level:<10} {rep.num_gt:>6} "
                     f"{rep.ap40_3d * 100:>8.2f} {rep.ap40_bev * 100:>9.2f}")
    lines.append("")
    lines.append("precision at fixed recall (3D):")
    for level in DIFFICULTIES:
        if level not in report.difficulties:
            continue
        rep = report.difficulties[level]
        cells = []
        for pos in sorted(rep.precision_3d):
            value = rep.precision_3d[pos]
            cells.append(f"r{pos:.3f}="
                         + ("unreachable" if value is None
                            else f"{value * 100:.2f}"))
        lines.append(f"  {level:<10} " + "  ".join(cells))
    if report.counts:
        lines.append("")
        lines.append(f"counts at difficulty {report.count_difficulty}:")
        for c in report.counts:
            lines.append(f"  score>={c.threshold:.2f}  TP={c.tp}  FP={c.fp}  "
                         f"FP_bg={c.fp_bg}")
    return "\n".join(lines) + "\n"
