"""Raw heads to boxes: anchor decoding, IoU, confidence filtering, per-class NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

DEFAULT_DETECT_CONF = 0.25
DEFAULT_EVAL_CONF = 0.005
DEFAULT_NMS_IOU = 0.45

# exp() clip for box extents so a wild untrained head cannot overflow to inf
_MAX_LOG_EXTENT = 50.0


@dataclass(frozen=True)
class BBox:
    """Corner-form box in normalized image coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(
                f"degenerate box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clamped(self) -> "BBox":
        return BBox(
            min(max(self.x_min, 0.0), 1.0),
            min(max(self.y_min, 0.0), 1.0),
            min(max(self.x_max, 0.0), 1.0),
            min(max(self.y_max, 0.0), 1.0),
        )

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float
    scale_origin: str = ""

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def decode_predictions(
    head,
    anchors,
    input_width: int,
    conf_threshold: float,
    scale_origin: str = "",
) -> list:
    """Decode one raw head into per-image Detection lists.

    Per cell and anchor: center = (sigmoid(t) + cell) / S, extent =
    anchor * exp(t) / W, score = sigmoid(objectness) * sigmoid(class logit)
    independently per class.  Returns a list of length N.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    anchors = tuple((float(w), float(h)) for w, h in anchors)
    if len(anchors) != 3:
        raise ValueError(f"expected 3 anchors for one scale, got {len(anchors)}")
    data = head.data if isinstance(head, Tensor) else np.asarray(head, dtype=np.float64)
    if data.ndim != 4:
        raise ValueError(f"expected a [N, C, S, S] head, got shape {data.shape}")
    n, channels, grid_h, grid_w = data.shape
    if grid_h != grid_w:
        raise ValueError(f"expected a square grid, got {grid_h}x{grid_w}")
    if channels % 3 != 0 or channels // 3 - 5 < 1:
        raise ValueError(
            f"head has {channels} channels, inconsistent with 3 anchors x (5 + K) layout"
        )
    num_classes = channels // 3 - 5
    grid = grid_h

    per_anchor = data.reshape(n, 3, 5 + num_classes, grid, grid)
    cols = np.arange(grid, dtype=np.float64)[None, None, None, :]
    rows = np.arange(grid, dtype=np.float64)[None, None, :, None]
    cx = (_sigmoid(per_anchor[:, :, 0]) + cols) / grid
    cy = (_sigmoid(per_anchor[:, :, 1]) + rows) / grid
    anchor_w = np.array([a[0] for a in anchors])[None, :, None, None]
    anchor_h = np.array([a[1] for a in anchors])[None, :, None, None]
    bw = anchor_w * np.exp(np.minimum(per_anchor[:, :, 2], _MAX_LOG_EXTENT)) / input_width
    bh = anchor_h * np.exp(np.minimum(per_anchor[:, :, 3], _MAX_LOG_EXTENT)) / input_width
    objectness = _sigmoid(per_anchor[:, :, 4])
    class_prob = _sigmoid(per_anchor[:, :, 5:])
    scores = objectness[:, :, None] * class_prob  # [N, 3, K, S, S]

    results = []
    for i in range(n):
        keep = np.nonzero(scores[i] >= conf_threshold)
        dets = []
        for a, k, r, c in zip(*keep):
            half_w = bw[i, a, r, c] / 2.0
            half_h = bh[i, a, r, c] / 2.0
            box = BBox(
                cx[i, a, r, c] - half_w,
                cy[i, a, r, c] - half_h,
                cx[i, a, r, c] + half_w,
                cy[i, a, r, c] + half_h,
            ).clamped()
            dets.append(
                Detection(box, int(k), float(scores[i, a, k, r, c]), scale_origin)
            )
        results.append(dets)
    return results


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _nms_key(det: Detection):
    return (-det.score, det.class_id, det.bbox.as_tuple())


def nms(dets, iou_threshold: float) -> list:
    """Greedy per-class suppression with a total deterministic ordering."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    kept = []
    for det in sorted(dets, key=_nms_key):
        suppressed = any(
            prev.class_id == det.class_id and iou(prev.bbox, det.bbox) >= iou_threshold
            for prev in kept
        )
        if not suppressed:
            kept.append(det)
    return kept


# -- detection dump format ---------------------------------------------------


def format_detection_line(image_id: str, det: Detection) -> str:
    b = det.bbox
    return (
        f"{image_id} {det.class_id} {det.score:.6f} "
        f"{b.x_min:.6f} {b.y_min:.6f} {b.x_max:.6f} {b.y_max:.6f}"
    )


def write_detections(path, rows) -> None:
    """Write (image_id, Detection) rows, one line each, in the given order."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, det in rows:
            fh.write(format_detection_line(image_id, det) + "\n")


def parse_detections(path) -> list:
    """Read a detection dump back as (image_id, Detection) rows."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"line {lineno}: expected 7 fields, got {len(parts)}")
            image_id = parts[0]
            try:
                class_id = int(parts[1])
                score = float(parts[2])
                coords = [float(v) for v in parts[3:]]
            except ValueError:
                raise ValueError(f"line {lineno}: malformed numeric field") from None
            rows.append((image_id, Detection(BBox(*coords), class_id, score)))
    return rows
