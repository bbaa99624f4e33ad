"""Preprocessing geometry: landmark boxes, crops, Rects, label units and gaze directions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateLandmarksError, GeometryError

EYE_BOX_SCALE = 1.7
FACE_TO_EYE_RATIO = 0.3


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise GeometryError(f"box must have x2 > x1 and y2 > y1: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def square(cls, cx: float, cy: float, size: float) -> "BoundingBox":
        half = size / 2
        return cls(cx - half, cy - half, cx + half, cy + half)


@dataclass(frozen=True)
class Landmarks:
    left_eye_outer: tuple[float, float]
    left_eye_inner: tuple[float, float]
    right_eye_inner: tuple[float, float]
    right_eye_outer: tuple[float, float]
    mouth_left: tuple[float, float]
    mouth_right: tuple[float, float]

    def __post_init__(self):
        if not all(math.isfinite(v) for pt in self.points() for v in pt):
            raise ContractError("landmarks must be finite")

    def points(self):
        return (self.left_eye_outer, self.left_eye_inner, self.right_eye_inner,
                self.right_eye_outer, self.mouth_left, self.mouth_right)

    def scaled(self, s: float) -> "Landmarks":
        return Landmarks(*[(x * s, y * s) for x, y in self.points()])

    def translated(self, tx: float, ty: float) -> "Landmarks":
        return Landmarks(*[(x + tx, y + ty) for x, y in self.points()])


@dataclass(frozen=True)
class DeviceScreen:
    screen_w_cm: float
    screen_h_cm: float
    screen_w_px: int
    screen_h_px: int
    camera_offset_cm: tuple[float, float]

    def __post_init__(self):
        if min(self.screen_w_cm, self.screen_h_cm, self.screen_w_px, self.screen_h_px) <= 0:
            raise ContractError(f"screen sizes must be positive: {self}")


@dataclass(frozen=True)
class Calibration:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ContractError("calibration rotation must be 3x3 orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(np.eye(3), np.zeros(3))


def _eye_box(outer, inner) -> BoundingBox:
    width = abs(outer[0] - inner[0])
    if width == 0:
        raise DegenerateLandmarksError("eye corners share an x coordinate")
    cx, cy = (outer[0] + inner[0]) / 2, (outer[1] + inner[1]) / 2
    return BoundingBox.square(cx, cy, EYE_BOX_SCALE * width)


def boxes_from_landmarks(lm: Landmarks) -> tuple[BoundingBox, BoundingBox, BoundingBox]:
    """Face, left-eye and right-eye boxes from six facial landmarks."""
    left = _eye_box(lm.left_eye_outer, lm.left_eye_inner)
    right = _eye_box(lm.right_eye_outer, lm.right_eye_inner)
    eyes = np.array([lm.left_eye_outer, lm.left_eye_inner, lm.right_eye_inner, lm.right_eye_outer], dtype=float)
    mouth = np.array([lm.mouth_left, lm.mouth_right], dtype=float)
    center = (eyes.mean(axis=0) + mouth.mean(axis=0)) / 2
    eye_size = (left.width + right.width) / 2
    face = BoundingBox.square(float(center[0]), float(center[1]), eye_size / FACE_TO_EYE_RATIO)
    return face, left, right


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror a (C, H, W) image left-right."""
    return np.ascontiguousarray(image[..., ::-1])


def normalize_rects(face: BoundingBox, left_eye: BoundingBox, right_eye: BoundingBox,
                    frame_w: int, frame_h: int) -> np.ndarray:
    if frame_w <= 0 or frame_h <= 0:
        raise ContractError("frame dimensions must be positive")
    out = []
    for b in (face, left_eye, right_eye):
        out += [b.x1 / frame_w, b.y1 / frame_h, b.x2 / frame_w, b.y2 / frame_h]
    return np.array(out, dtype=np.float64)


def random_shift(boxes, rng: np.random.Generator, frame_w: int, frame_h: int, max_shift: int = 30):
    """Translate each box by independent integer offsets in [-max_shift, max_shift].

    Offsets are clamped so a box never moves further outside the frame than it
    already was; boxes that start inside the frame stay inside.
    """
    out = []
    for b in boxes:
        dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        dx = min(max(dx, min(0.0, -b.x1)), max(0.0, frame_w - b.x2))
        dy = min(max(dy, min(0.0, -b.y1)), max(0.0, frame_h - b.y2))
        out.append(b.translated(dx, dy))
    return tuple(out)


def crop_resize_normalize(frame: np.ndarray, box: BoundingBox, target: tuple[int, int]) -> np.ndarray:
    """Bilinear crop of ``box`` from an (H, W, 3) uint8 frame into a (3, th, tw) array in [0, 1].

    Corner-aligned sampling: output pixel 0 samples ``x1`` and the last pixel
    samples ``x2 - 1``.  Samples outside the frame read zeros.
    """
    fh, fw = frame.shape[:2]
    if box.x2 <= 0 or box.y2 <= 0 or box.x1 >= fw or box.y1 >= fh:
        raise GeometryError(f"box {box} lies entirely outside the {fw}x{fh} frame")
    th, tw = target
    xs = box.x1 + np.arange(tw) * ((box.width - 1) / (tw - 1) if tw > 1 else 0.0)
    ys = box.y1 + np.arange(th) * ((box.height - 1) / (th - 1) if th > 1 else 0.0)
    # zero-padded window covering every sample plus one pixel of margin
    c0, c1 = int(math.floor(xs.min())) - 1, int(math.floor(xs.max())) + 3
    r0, r1 = int(math.floor(ys.min())) - 1, int(math.floor(ys.max())) + 3
    window = np.zeros((r1 - r0, c1 - c0, frame.shape[2]), dtype=np.float64)
    sr0, sr1, sc0, sc1 = max(r0, 0), min(r1, fh), max(c0, 0), min(c1, fw)
    window[sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = frame[sr0:sr1, sc0:sc1]
    xs, ys = xs - c0, ys - r0
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    ax = (xs - x0)[None, :, None]
    ay = (ys - y0)[:, None, None]
    rows0, rows1 = window[y0], window[y0 + 1]
    top = rows0[:, x0] * (1 - ax) + rows0[:, x0 + 1] * ax
    bottom = rows1[:, x0] * (1 - ax) + rows1[:, x0 + 1] * ax
    out = top * (1 - ay) + bottom * ay
    return np.ascontiguousarray(out.transpose(2, 0, 1)) / 255.0


def pixels_to_camera_cm(point_px, dev: DeviceScreen) -> tuple[float, float]:
    x_cm = point_px[0] * dev.screen_w_cm / dev.screen_w_px - dev.camera_offset_cm[0]
    y_cm = point_px[1] * dev.screen_h_cm / dev.screen_h_px - dev.camera_offset_cm[1]
    return (x_cm, y_cm)


def camera_cm_to_pixels(point_cm, dev: DeviceScreen) -> tuple[float, float]:
    x_px = (point_cm[0] + dev.camera_offset_cm[0]) * dev.screen_w_px / dev.screen_w_cm
    y_px = (point_cm[1] + dev.camera_offset_cm[1]) * dev.screen_h_px / dev.screen_h_cm
    return (x_px, y_px)


def point_to_direction(point_cm, calib: Calibration, origin_cm) -> np.ndarray:
    """Unit vector from ``origin_cm`` to the screen point, in camera coordinates."""
    target = calib.rotation @ np.array([point_cm[0], point_cm[1], 0.0]) + calib.translation
    d = target - np.asarray(origin_cm, dtype=float)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise GeometryError("gaze origin coincides with the target point")
    return d / norm


def angular_error_deg(d1, d2) -> float:
    d1, d2 = np.asarray(d1, dtype=float), np.asarray(d2, dtype=float)
    for d in (d1, d2):
        if abs(np.linalg.norm(d) - 1) > 1e-6:
            raise ContractError("angular_error_deg expects unit vectors")
    return math.degrees(math.acos(max(-1.0, min(1.0, float(d1 @ d2)))))
