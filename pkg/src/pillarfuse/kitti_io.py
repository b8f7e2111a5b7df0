"""KITTI-format frame ingestion and the matching writers.

A dataset root holds the usual per-frame files, one six-digit id each:

    velodyne/000000.bin   little-endian float32 (x, y, z, r) quadruples
    calib/000000.txt      keyed matrix rows (P2, R0_rect, Tr_velo_to_cam)
    image_2/000000.ppm    binary portable pixmap, maxval 255
    label_2/000000.txt    15-field object lines (16 with a score)

Writers exist for every reader so round-trips can be checked bit-exactly
and so the synthetic generator can emit real datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import FormatError
from .geometry import Box3D, normalize_angle

CAR_CLASS = "Car"
DONTCARE_CLASS = "DontCare"


# -- domain types -------------------------------------------------------------


@dataclass
class RawPointCloud:
    """Lidar returns: [N, 4] float64 rows of x, y, z, reflectance."""

    xyzr: np.ndarray

    def __len__(self) -> int:
        return self.xyzr.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.xyzr[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.xyzr[:, 3]


@dataclass
class CalibrationSet:
    P2: np.ndarray             # [3, 4]
    R0_rect: np.ndarray        # [3, 3]
    Tr_velo_to_cam: np.ndarray  # [3, 4]

    def lidar_to_rect(self, xyz: np.ndarray) -> np.ndarray:
        """Map lidar points [N, 3] into the rectified camera frame."""
        cam = xyz @ self.Tr_velo_to_cam[:, :3].T + self.Tr_velo_to_cam[:, 3]
        return cam @ self.R0_rect.T

    def rect_to_lidar(self, xyz_rect: np.ndarray) -> np.ndarray:
        rot = self.R0_rect @ self.Tr_velo_to_cam[:, :3]
        shift = self.R0_rect @ self.Tr_velo_to_cam[:, 3]
        return (xyz_rect - shift) @ np.linalg.inv(rot).T

    def rect_rotation(self) -> np.ndarray:
        """The pure-rotation part of lidar -> rectified camera."""
        return self.R0_rect @ self.Tr_velo_to_cam[:, :3]


@dataclass
class ImageRaster:
    """RGB image stored as uint8 [height, width, 3]."""

    rgb: np.ndarray

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def normalized(self) -> np.ndarray:
        """Float copy scaled into [0, 1]."""
        return self.rgb.astype(np.float64) / 255.0


@dataclass
class GroundTruthLabel:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: np.ndarray          # [4] image box: left, top, right, bottom
    h: float                  # meters
    w: float
    l: float
    location: np.ndarray      # [3] camera-frame bottom-center
    ry: float                 # rotation about the camera y axis
    score: Optional[float] = None

    @property
    def bbox_height(self) -> float:
        return float(self.bbox[3] - self.bbox[1])


@dataclass
class PointProjection:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray  # boolean


@dataclass
class DecoratedPointCloud:
    """Raw lidar channels plus attached image color per point."""

    points: np.ndarray    # [N, 4] x, y, z, r
    rgb: np.ndarray       # [N, 3] in [0, 1]; zero where not imaged
    in_image: np.ndarray  # [N] boolean


@dataclass
class Frame:
    frame_id: str
    cloud: RawPointCloud
    calib: CalibrationSet
    image: ImageRaster
    labels: List[GroundTruthLabel]


# -- point cloud files --------------------------------------------------------


def load_pointcloud(path) -> RawPointCloud:
    blob = Path(path).read_bytes()
    if len(blob) % 16 != 0:
        raise FormatError(f"{path}: length {len(blob)} not a multiple of 16")
    pts = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if pts.size and not np.isfinite(pts).all():
        raise FormatError(f"{path}: non-finite point values")
    if pts.size and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
        raise FormatError(f"{path}: reflectance outside [0, 1]")
    return RawPointCloud(pts)


def write_pointcloud(path, cloud: RawPointCloud) -> None:
    Path(path).write_bytes(cloud.xyzr.astype("<f4").tobytes())


# -- calibration files --------------------------------------------------------

_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def load_calibration(path) -> CalibrationSet:
    values = {}
    for raw_line in Path(path).read_text().splitlines():
        line = raw_line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_SHAPES:
            continue
        try:
            numbers = np.array([float(tok) for tok in rest.split()])
        except ValueError as exc:
            raise FormatError(f"{path}: bad number in {key} row: {exc}")
        shape = _CALIB_SHAPES[key]
        if numbers.size != shape[0] * shape[1]:
            raise FormatError(
                f"{path}: {key} needs {shape[0] * shape[1]} values, "
                f"got {numbers.size}")
        values[key] = numbers.reshape(shape)
    missing = sorted(set(_CALIB_SHAPES) - set(values))
    if missing:
        raise FormatError(f"{path}: missing calibration keys {missing}")
    for key, mat in values.items():
        if not np.isfinite(mat).all():
            raise FormatError(f"{path}: non-finite values in {key}")
    r0 = values["R0_rect"]
    if np.abs(r0 @ r0.T - np.eye(3)).max() > 1e-3:
        raise FormatError(f"{path}: R0_rect is not orthonormal")
    return CalibrationSet(P2=values["P2"], R0_rect=values["R0_rect"],
                          Tr_velo_to_cam=values["Tr_velo_to_cam"])


def write_calibration(path, calib: CalibrationSet) -> None:
    def row(name: str, mat: np.ndarray) -> str:
        return name + ": " + " ".join(f"{v:.12e}" for v in mat.ravel())

    text = "\n".join([row("P2", calib.P2),
                      row("R0_rect", calib.R0_rect),
                      row("Tr_velo_to_cam", calib.Tr_velo_to_cam)]) + "\n"
    Path(path).write_text(text)


def standard_calibration(width: int, height: int,
                         focal: float = 200.0) -> CalibrationSet:
    """Axis-swap calibration used by the synthetic generator.

    Camera frame from lidar frame: x_cam = -y_l, y_cam = -z_l,
    z_cam = x_l (camera looks down the lidar +x axis); principal point
    at the raster center.
    """
    tr = np.array([[0.0, -1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0, 0.0],
                   [1.0, 0.0, 0.0, 0.0]])
    p2 = np.array([[focal, 0.0, width / 2.0, 0.0],
                   [0.0, focal, height / 2.0, 0.0],
                   [0.0, 0.0, 1.0, 0.0]])
    return CalibrationSet(P2=p2, R0_rect=np.eye(3), Tr_velo_to_cam=tr)


# -- images -------------------------------------------------------------------


def _read_ppm_tokens(blob: bytes, count: int, pos: int):
    """Read `count` whitespace-separated header tokens, honoring # comments."""
    tokens = []
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated pixmap header")
        tokens.append(blob[start:pos])
    return tokens, pos


def load_image(path) -> ImageRaster:
    """Read a binary (P6) portable pixmap."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P6":
        raise FormatError(f"{path}: not a binary pixmap (P6)")
    try:
        tokens, pos = _read_ppm_tokens(blob, 3, 2)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}")
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad raster size {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    data = blob[pos:]
    expected = width * height * 3
    if len(data) != expected:
        raise FormatError(
            f"{path}: expected {expected} pixel bytes, found {len(data)}")
    rgb = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return ImageRaster(rgb.copy())


def write_image(path, image: ImageRaster) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.rgb.astype(np.uint8).tobytes())


def load_image_any(path) -> ImageRaster:
    """Pixmap loader with an optional compressed-image fallback."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return load_image(path)
    try:
        from PIL import Image  # adapter dependency, only needed here
    except ImportError:
        raise FormatError(
            f"{path}: compressed images need the optional pillow package")
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return ImageRaster(rgb)


# -- labels -------------------------------------------------------------------


def _parse_label_line(line: str, lineno: int, path) -> GroundTruthLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise FormatError(
            f"{path}:{lineno}: expected 15 or 16 fields, got {len(parts)}")
    try:
        nums = [float(tok) for tok in parts[1:]]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: bad numeric field: {exc}")
    if not np.isfinite(nums).all():
        raise FormatError(f"{path}:{lineno}: non-finite label values")
    return GroundTruthLabel(
        cls=parts[0],
        truncation=nums[0],
        occlusion=int(nums[1]),
        alpha=nums[2],
        bbox=np.array(nums[3:7]),
        h=nums[7], w=nums[8], l=nums[9],
        location=np.array(nums[10:13]),
        ry=nums[13],
        score=nums[14] if len(parts) == 16 else None,
    )


def load_labels(path) -> List[GroundTruthLabel]:
    labels = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        labels.append(_parse_label_line(line, lineno, path))
    return labels


def format_label(label: GroundTruthLabel) -> str:
    fields = [
        label.cls,
        f"{label.truncation:.2f}",
        str(int(label.occlusion)),
        f"{label.alpha:.6f}",
        f"{label.bbox[0]:.2f}", f"{label.bbox[1]:.2f}",
        f"{label.bbox[2]:.2f}", f"{label.bbox[3]:.2f}",
        f"{label.h:.6f}", f"{label.w:.6f}", f"{label.l:.6f}",
        f"{label.location[0]:.6f}", f"{label.location[1]:.6f}",
        f"{label.location[2]:.6f}",
        f"{label.ry:.6f}",
    ]
    if label.score is not None:
        fields.append(f"{label.score:.6f}")
    return " ".join(fields)


def write_labels(path, labels: Sequence[GroundTruthLabel]) -> None:
    text = "".join(format_label(lb) + "\n" for lb in labels)
    Path(path).write_text(text)


# -- projection and RGB attachment ---------------------------------------------


def project_points(cloud: RawPointCloud, calib: CalibrationSet,
                   image: ImageRaster) -> PointProjection:
    """Pinhole projection of every point; validity never drops points."""
    n = len(cloud)
    if n == 0:
        empty = np.empty(0)
        return PointProjection(empty, empty.copy(),
                               np.empty(0, dtype=bool))
    rect = calib.lidar_to_rect(cloud.xyz)
    hom = np.column_stack([rect, np.ones(n)]) @ calib.P2.T
    depth = hom[:, 2]
    safe = np.where(depth != 0.0, depth, 1.0)
    u = hom[:, 0] / safe
    v = hom[:, 1] / safe
    valid = ((depth > 0.0)
             & (u >= 0.0) & (u < image.width)
             & (v >= 0.0) & (v < image.height))
    return PointProjection(u=u, v=v, valid=valid)


def attach_rgb(cloud: RawPointCloud, projection: PointProjection,
               image: ImageRaster) -> DecoratedPointCloud:
    """Nearest-pixel color for imaged points, zeros elsewhere."""
    n = len(cloud)
    rgb = np.zeros((n, 3))
    valid = projection.valid
    if valid.any():
        cols = np.floor(projection.u[valid] + 0.5).astype(np.intp)
        rows = np.floor(projection.v[valid] + 0.5).astype(np.intp)
        np.clip(cols, 0, image.width - 1, out=cols)
        np.clip(rows, 0, image.height - 1, out=rows)
        rgb[valid] = image.rgb[rows, cols].astype(np.float64) / 255.0
    return DecoratedPointCloud(points=cloud.xyzr.copy(), rgb=rgb,
                               in_image=valid.copy())


# -- camera-frame label <-> lidar-frame box -------------------------------------


def lidar_box_from_label(label: GroundTruthLabel,
                         calib: CalibrationSet) -> Box3D:
    """Convert a camera-frame label into a lidar-frame box.

    The label center sits on the bottom face; camera y points down, so
    the box center is half a height above it along lidar z. Heading is
    carried over as a direction vector so any rigid calibration works.
    """
    bottom = calib.rect_to_lidar(label.location[None, :])[0]
    rot = calib.rect_rotation()
    heading_cam = np.array([np.cos(label.ry), 0.0, -np.sin(label.ry)])
    heading = np.linalg.inv(rot) @ heading_cam
    yaw = float(np.arctan2(heading[1], heading[0]))
    return Box3D(cx=bottom[0], cy=bottom[1], cz=bottom[2] + 0.5 * label.h,
                 w=label.w, l=label.l, h=label.h, yaw=yaw)


def label_from_lidar_box(box: Box3D, calib: CalibrationSet,
                         image: ImageRaster, cls: str = CAR_CLASS,
                         score: Optional[float] = None) -> GroundTruthLabel:
    """Express a lidar-frame box as a camera-frame label line.

    The 2D bbox is the image-plane extent of the projected corners,
    clipped to the raster.
    """
    bottom = np.array([box.cx, box.cy, box.cz - 0.5 * box.h])
    rot = calib.rect_rotation()
    loc = rot @ bottom + calib.R0_rect @ calib.Tr_velo_to_cam[:, 3]
    heading = rot @ np.array([np.cos(box.yaw), np.sin(box.yaw), 0.0])
    ry = float(np.arctan2(-heading[2], heading[0]))
    corners = box.corners_3d()
    proj = project_points(
        RawPointCloud(np.column_stack([corners, np.zeros(8)])), calib, image)
    if proj.valid.any():
        u, v = proj.u, proj.v
        bbox = np.array([
            np.clip(u.min(), 0, image.width - 1),
            np.clip(v.min(), 0, image.height - 1),
            np.clip(u.max(), 0, image.width - 1),
            np.clip(v.max(), 0, image.height - 1)])
    else:
        bbox = np.zeros(4)
    alpha = normalize_angle(ry - float(np.arctan2(loc[0], loc[2])))
    return GroundTruthLabel(cls=cls, truncation=0.0, occlusion=0,
                            alpha=alpha, bbox=bbox, h=box.h, w=box.w,
                            l=box.l, location=loc, ry=ry, score=score)


# -- dataset layout --------------------------------------------------------------


def frame_paths(root, frame_id: str) -> dict:
    root = Path(root)
    return {
        "velodyne": root / "velodyne" / f"{frame_id}.bin",
        "calib": root / "calib" / f"{frame_id}.txt",
        "image": root / "image_2" / f"{frame_id}.ppm",
        "label": root / "label_2" / f"{frame_id}.txt",
    }


def list_frame_ids(root) -> List[str]:
    velo_dir = Path(root) / "velodyne"
    if not velo_dir.is_dir():
        raise FormatError(f"{root}: no velodyne directory")
    return sorted(p.stem for p in velo_dir.glob("*.bin"))


def load_frame(root, frame_id: str, with_labels: bool = True) -> Frame:
    paths = frame_paths(root, frame_id)
    labels: List[GroundTruthLabel] = []
    if with_labels and paths["label"].exists():
        labels = load_labels(paths["label"])
    return Frame(
        frame_id=frame_id,
        cloud=load_pointcloud(paths["velodyne"]),
        calib=load_calibration(paths["calib"]),
        image=load_image(paths["image"]),
        labels=labels,
    )
