"""Manifest loading, synthetic data, sample preprocessing and batching."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ManifestError
from .geometry import (
    BoundingBox,
    DeviceScreen,
    Landmarks,
    boxes_from_landmarks,
    crop_resize_normalize,
    hflip,
    normalize_rects,
    pixels_to_camera_cm,
    random_shift,
)
from .model import BatchInput
from .tensor import Tensor

FACE_SIZE = 224
EYE_SIZE = 112
LANDMARK_FIELDS = ("left_eye_outer", "left_eye_inner", "right_eye_inner",
                   "right_eye_outer", "mouth_left", "mouth_right")


# PPM ------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    """Write an (H, W, 3) uint8 image as binary PPM (P6)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)


# manifest -------------------------------------------------------------------

@dataclass
class ManifestRecord:
    subject_id: str
    frame_path: str
    frame_w: int
    frame_h: int
    label_cm: tuple[float, float]
    landmarks: Landmarks | None = None
    face_box: BoundingBox | None = None
    left_eye_box: BoundingBox | None = None
    right_eye_box: BoundingBox | None = None
    device: DeviceScreen | None = None
    label_px: tuple[float, float] | None = None
    split: str | None = None

    def boxes(self) -> tuple[BoundingBox, BoundingBox, BoundingBox]:
        if self.face_box is not None:
            return self.face_box, self.left_eye_box, self.right_eye_box
        return boxes_from_landmarks(self.landmarks)

    def to_json(self) -> dict:
        d = {"subject_id": self.subject_id, "frame_path": self.frame_path,
             "frame_w": self.frame_w, "frame_h": self.frame_h, "label_cm": list(self.label_cm)}
        if self.landmarks is not None:
            d["landmarks"] = {k: list(getattr(self.landmarks, k)) for k in LANDMARK_FIELDS}
        for key in ("face_box", "left_eye_box", "right_eye_box"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key).as_list()
        if self.device is not None:
            dev = self.device
            d["device"] = {"screen_w_cm": dev.screen_w_cm, "screen_h_cm": dev.screen_h_cm,
                           "screen_w_px": dev.screen_w_px, "screen_h_px": dev.screen_h_px,
                           "camera_offset_cm": list(dev.camera_offset_cm)}
        if self.label_px is not None:
            d["label_px"] = list(self.label_px)
        if self.split is not None:
            d["split"] = self.split
        return d


def _parse_record(obj: dict, where: str) -> ManifestRecord:
    missing = [k for k in ("subject_id", "frame_path", "frame_w", "frame_h") if k not in obj]
    has_boxes = all(k in obj for k in ("face_box", "left_eye_box", "right_eye_box"))
    if not has_boxes and "landmarks" not in obj:
        missing.append("landmarks or face_box/left_eye_box/right_eye_box")
    if "label_cm" not in obj and not ("label_px" in obj and "device" in obj):
        missing.append("label_cm or label_px+device")
    if missing:
        raise ManifestError(f"{where}: record missing {', '.join(missing)}")
    try:
        landmarks = None
        if "landmarks" in obj:
            lm = obj["landmarks"]
            landmarks = Landmarks(*[tuple(float(v) for v in lm[k]) for k in LANDMARK_FIELDS])
        boxes = {k: BoundingBox(*map(float, obj[k])) for k in ("face_box", "left_eye_box", "right_eye_box") if has_boxes}
        device = None
        if "device" in obj:
            dv = obj["device"]
            device = DeviceScreen(float(dv["screen_w_cm"]), float(dv["screen_h_cm"]), int(dv["screen_w_px"]),
                                  int(dv["screen_h_px"]), tuple(float(v) for v in dv["camera_offset_cm"]))
        label_px = tuple(float(v) for v in obj["label_px"]) if "label_px" in obj else None
        if "label_cm" in obj:
            label_cm = tuple(float(v) for v in obj["label_cm"])
        else:
            label_cm = pixels_to_camera_cm(label_px, device)
        return ManifestRecord(
            subject_id=str(obj["subject_id"]), frame_path=str(obj["frame_path"]),
            frame_w=int(obj["frame_w"]), frame_h=int(obj["frame_h"]), label_cm=label_cm,
            landmarks=landmarks, device=device, label_px=label_px, split=obj.get("split"), **boxes,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: invalid record: {exc}") from exc


def load_manifest(path) -> list[ManifestRecord]:
    """Read a JSONL manifest; records keep file order."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            records.append(_parse_record(obj, f"{path}:{lineno}"))
    return records


def write_manifest(path, records: Sequence[ManifestRecord]):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# samples --------------------------------------------------------------------

@dataclass
class Sample:
    face: np.ndarray
    eye_left: np.ndarray
    eye_right_flipped: np.ndarray
    rects: np.ndarray
    label_cm: np.ndarray
    subject_id: str
    face_width_px: float
    frame_short_px: int


def preprocess_sample(record: ManifestRecord, augment: bool, rng: np.random.Generator | None,
                      frame: np.ndarray | None = None, max_shift: int = 30,
                      face_size: int = FACE_SIZE, eye_size: int = EYE_SIZE) -> Sample:
    """Crop face and eyes, flip the right eye and encode the Rects vector."""
    if frame is None:
        frame = read_ppm(record.frame_path)
    boxes = record.boxes()
    if augment:
        boxes = random_shift(boxes, rng, record.frame_w, record.frame_h, max_shift)
    face_box, left_box, right_box = boxes
    return Sample(
        face=crop_resize_normalize(frame, face_box, (face_size, face_size)).astype(np.float32),
        eye_left=crop_resize_normalize(frame, left_box, (eye_size, eye_size)).astype(np.float32),
        eye_right_flipped=hflip(crop_resize_normalize(frame, right_box, (eye_size, eye_size))).astype(np.float32),
        rects=normalize_rects(face_box, left_box, right_box, record.frame_w, record.frame_h),
        label_cm=np.asarray(record.label_cm, dtype=np.float64),
        subject_id=record.subject_id,
        face_width_px=float(face_box.width),
        frame_short_px=min(record.frame_w, record.frame_h),
    )


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("AFFNET_THREADS", "1")))
    except ValueError:
        return 1


class Dataset:
    """Manifest records plus a frame cache.

    Augmented samples draw their shift from a generator seeded by
    ``(seed, epoch, index)``, so results do not depend on worker count or
    visiting order.
    """

    def __init__(self, records: Sequence[ManifestRecord], root=None, max_shift: int = 30,
                 face_size: int = FACE_SIZE, eye_size: int = EYE_SIZE):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        self.max_shift = max_shift
        self.face_size, self.eye_size = face_size, eye_size
        self._frames: dict[int, np.ndarray] = {}
        self._clean: dict[int, Sample] = {}

    def sized(self, face_size: int, eye_size: int) -> "Dataset":
        """This dataset cropping at other sizes; the frame cache is shared."""
        if (face_size, eye_size) == (self.face_size, self.eye_size):
            return self
        other = Dataset(self.records, self.root, self.max_shift, face_size, eye_size)
        other._frames = self._frames
        return other

    @classmethod
    def from_manifest(cls, path, **kw) -> "Dataset":
        return cls(load_manifest(path), root=Path(path).parent, **kw)

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "Dataset":
        indices = [int(i) for i in indices]
        sub = Dataset([self.records[i] for i in indices], self.root, self.max_shift, self.face_size, self.eye_size)
        sub._frames = {j: self._frames[i] for j, i in enumerate(indices) if i in self._frames}
        return sub

    def frame(self, i: int) -> np.ndarray:
        if i not in self._frames:
            path = Path(self.records[i].frame_path)
            if self.root is not None and not path.is_absolute():
                path = self.root / path
            self._frames[i] = read_ppm(path)
        return self._frames[i]

    def sample(self, i: int, augment: bool = False, seed: int = 0, epoch: int = 0) -> Sample:
        if not augment:
            if i not in self._clean:
                self._clean[i] = preprocess_sample(self.records[i], False, None, self.frame(i), self.max_shift,
                                                   self.face_size, self.eye_size)
            return self._clean[i]
        rng = np.random.default_rng([seed, epoch, i])
        return preprocess_sample(self.records[i], True, rng, self.frame(i), self.max_shift,
                                 self.face_size, self.eye_size)

    def samples(self, indices, augment=False, seed=0, epoch=0) -> list[Sample]:
        indices = [int(i) for i in indices]
        workers = worker_count()
        if workers == 1 or len(indices) < 2:
            return [self.sample(i, augment, seed, epoch) for i in indices]
        for i in indices:  # load frames serially; crops are the parallel part
            self.frame(i)
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda i: self.sample(i, augment, seed, epoch), indices))


def batch_order(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def collate(samples: Sequence[Sample], dtype=np.float32) -> BatchInput:
    def stack(name):
        return Tensor(np.stack([getattr(s, name) for s in samples]).astype(dtype, copy=False))

    return BatchInput(
        face=stack("face"), eye_left=stack("eye_left"), eye_right=stack("eye_right_flipped"),
        rects=stack("rects"), labels=stack("label_cm"), meta=list(samples),
    )


def batches(samples: Sequence[Sample], batch_size: int, shuffle_seed: int | None = None, dtype=np.float32) -> list[BatchInput]:
    """Partition ``samples`` into batches (the last may be partial)."""
    return [collate([samples[i] for i in idx], dtype) for idx in batch_order(len(samples), batch_size, shuffle_seed)]


# synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale substitute for a gaze dataset.

    Each eye shows a bright disc on a dark patch.  The disc offset inside the
    eye box is an affine function of (label - head position), so recovering
    the label needs the eye images plus the head translation, which is
    visible in the Rects and as a marker rectangle in the face crop.
    """
    n_samples: int = 256
    label_range_cm: tuple = ((-6.0, 6.0), (1.0, 11.0))
    noise_level: float = 0.03
    seed: int = 7
    n_subjects: int = 4
    frame_w: int = 480
    frame_h: int = 360
    eye_corner_px: float = 30.0
    regime_px: float = 45.0
    jitter_px: float = 15.0
    head_cm_per_px: float = 0.03
    disc_gain: float = 0.3
    disc_radius: float = 0.12
    split: str | None = None

    def __post_init__(self):
        for lo, hi in self.label_range_cm:
            if not hi > lo:
                raise ValueError("label ranges must be non-empty")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "label_range_cm" in d:
            d["label_range_cm"] = tuple(tuple(r) for r in d["label_range_cm"])
        return cls(**d)

    def disc_map(self):
        """(A, b) with disc offset = A @ (label - head_cm) + b, in eye-box fractions."""
        (x0, x1), (y0, y1) = self.label_range_cm
        head_max = (self.regime_px + self.jitter_px) * self.head_cm_per_px
        half = np.array([(x1 - x0) / 2 + head_max, (y1 - y0) / 2 + head_max])
        mid = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
        a = np.diag(self.disc_gain / half)
        return a, -a @ mid


@dataclass
class SynthTruth:
    """Generator-side quantities for the linear-probe oracle."""
    disc_left: list = field(default_factory=list)
    disc_right: list = field(default_factory=list)
    head_cm: list = field(default_factory=list)
    labels: list = field(default_factory=list)


def _soft_disc(canvas, cx, cy, radius, value):
    h, w = canvas.shape
    r = int(np.ceil(radius)) + 2
    x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 2, w)
    y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 2, h)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    cover = np.clip(radius - np.hypot(xx - cx, yy - cy) + 0.5, 0.0, 1.0)
    patch = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = patch * (1 - cover) + value * cover


def _fill_box(canvas, box: BoundingBox, value):
    h, w = canvas.shape
    x0, x1 = max(int(round(box.x1)), 0), min(int(round(box.x2)), w)
    y0, y1 = max(int(round(box.y1)), 0), min(int(round(box.y2)), h)
    canvas[y0:y1, x0:x1] = value


def generate_synthetic(cfg: SynthConfig, out_dir) -> tuple[Path, SynthTruth]:
    """Write ``manifest.jsonl``, ``truth.jsonl`` and one PPM frame per sample."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    a, b = cfg.disc_map()
    angles = 2 * np.pi * np.arange(cfg.n_subjects) / max(cfg.n_subjects, 1)
    regimes = cfg.regime_px * np.stack([np.cos(angles + np.pi / 4), np.sin(angles + np.pi / 4)], axis=1)
    truth = SynthTruth()
    records = []
    half_eye = cfg.eye_corner_px / 2
    eye_dx = cfg.eye_corner_px * 1.35
    eye_dy = cfg.eye_corner_px * 0.9
    for i in range(cfg.n_samples):
        s = i % cfg.n_subjects
        (lx0, lx1), (ly0, ly1) = cfg.label_range_cm
        label = np.array([rng.uniform(lx0, lx1), rng.uniform(ly0, ly1)])
        t_px = regimes[s] + rng.uniform(-cfg.jitter_px, cfg.jitter_px, size=2)
        head_cm = t_px * cfg.head_cm_per_px
        cx, cy = cfg.frame_w / 2 + t_px[0], cfg.frame_h / 2 + t_px[1]
        ey, my = cy - eye_dy, cy + eye_dy
        lm = Landmarks(
            left_eye_outer=(cx - eye_dx - half_eye, ey), left_eye_inner=(cx - eye_dx + half_eye, ey),
            right_eye_inner=(cx + eye_dx - half_eye, ey), right_eye_outer=(cx + eye_dx + half_eye, ey),
            mouth_left=(cx - 0.8 * cfg.eye_corner_px, my), mouth_right=(cx + 0.8 * cfg.eye_corner_px, my),
        )
        face, left, right = boxes_from_landmarks(lm)

        canvas = np.full((cfg.frame_h, cfg.frame_w), 0.05)
        _fill_box(canvas, face, 0.35)
        marker = face.width * 0.12
        mx, my_ = face.center[0] + 0.8 * t_px[0], face.center[1] + 0.25 * face.height + 0.8 * t_px[1]
        _fill_box(canvas, BoundingBox(mx - marker, my_ - marker / 2, mx + marker, my_ + marker / 2), 0.6)
        offset = a @ (label - head_cm) + b
        discs = []
        for box in (left, right):
            _fill_box(canvas, box, 0.08)
            dcx = box.center[0] + offset[0] * box.width
            dcy = box.center[1] + offset[1] * box.height
            _soft_disc(canvas, dcx, dcy, cfg.disc_radius * box.width, 0.95)
            discs.append((dcx - box.center[0], dcy - box.center[1]))
        noisy = canvas + rng.uniform(0, cfg.noise_level, size=canvas.shape)
        tint = np.array([1.0, 0.92, 0.85])
        img = np.clip(np.round(noisy[..., None] * tint * 255), 0, 255).astype(np.uint8)
        name = f"frames/{i:06d}.ppm"
        write_ppm(out / name, img)

        records.append(ManifestRecord(
            subject_id=f"s{s}", frame_path=name, frame_w=cfg.frame_w, frame_h=cfg.frame_h,
            label_cm=(float(label[0]), float(label[1])), landmarks=lm, split=cfg.split,
        ))
        truth.disc_left.append([float(v) for v in discs[0]])
        truth.disc_right.append([float(v) for v in discs[1]])
        truth.head_cm.append([float(v) for v in head_cm])
        truth.labels.append([float(v) for v in label])
    path = out / "manifest.jsonl"
    write_manifest(path, records)
    with open(out / "truth.jsonl", "w", encoding="utf-8") as f:
        for row in zip(truth.disc_left, truth.disc_right, truth.head_cm, truth.labels):
            f.write(json.dumps(dict(zip(("disc_left", "disc_right", "head_cm", "label_cm"), row))) + "\n")
    return path, truth


def linear_probe_error(truth: SynthTruth) -> float:
    """Mean Euclidean error (cm) of a least-squares fit from disc centres and head position to labels."""
    feats = np.hstack([np.array(truth.disc_left), np.array(truth.disc_right), np.array(truth.head_cm),
                       np.ones((len(truth.labels), 1))])
    y = np.array(truth.labels)
    coef, *_ = np.linalg.lstsq(feats, y, rcond=None)
    return float(np.linalg.norm(feats @ coef - y, axis=1).mean())
