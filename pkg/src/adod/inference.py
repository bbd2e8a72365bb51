"""Batched detection over a dataset manifest, plus overlay rendering.

Ties the pieces together: letterbox each image, run the network in eval mode,
decode every scale, suppress per class, then map boxes back into the source
image frame so they are comparable with the ground-truth labels.
"""

from __future__ import annotations

import os

import numpy as np

from .datasets import (
    DatasetManifest,
    _class_color,
    load_image,
    parse_label_file,
    resize_letterbox,
    write_ppm,
)
from .network import Network, anchors_for_scale, forward_multiscale
from .postprocess import Detection, decode_predictions, nms
from .tensor import Tensor


def image_id_for(sample) -> str:
    return os.path.splitext(os.path.basename(sample.image_path))[0]


def _check_unique_ids(manifest: DatasetManifest) -> None:
    seen = {}
    for sample in manifest.samples:
        stem = image_id_for(sample)
        if stem in seen:
            raise ValueError(
                f"image ids must be unique, but {stem!r} appears more than once "
                f"({seen[stem]} and {sample.image_path})"
            )
        seen[stem] = sample.image_path


def detect_on_manifest(
    net: Network,
    manifest: DatasetManifest,
    conf_threshold: float,
    nms_iou: float,
    batch_size: int = 8,
) -> list:
    """Run detection over every manifest sample.

    Returns (image_id, Detection) rows in manifest order; boxes are
    normalized source-image corner coordinates.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    _check_unique_ids(manifest)
    spec = net.spec
    prepared = []
    for sample in manifest.samples:
        image_path, _ = manifest.resolve(sample)
        canvas, transform = resize_letterbox(load_image(image_path), spec.input_width)
        prepared.append((image_id_for(sample), canvas, transform))

    rows = []
    for lo in range(0, len(prepared), batch_size):
        chunk = prepared[lo : lo + batch_size]
        images = Tensor(np.stack([canvas for _, canvas, _ in chunk]))
        output = forward_multiscale(net, images, "eval")
        per_image = [[] for _ in chunk]
        for scale, head in zip(output.scale_names, output.heads):
            decoded = decode_predictions(
                head,
                anchors_for_scale(spec, scale),
                spec.input_width,
                conf_threshold,
                scale_origin=scale,
            )
            for dets, bucket in zip(decoded, per_image):
                bucket.extend(dets)
        for (image_id, _, transform), dets in zip(chunk, per_image):
            for det in nms(dets, nms_iou):
                box = transform.invert_corner(det.bbox).clamped()
                rows.append(
                    (image_id, Detection(box, det.class_id, det.score, det.scale_origin))
                )
    return rows


def ground_truth_map(manifest: DatasetManifest) -> dict:
    """image_id -> [(class_id, corner BBox)] in normalized source coordinates."""
    _check_unique_ids(manifest)
    gts = {}
    for sample in manifest.samples:
        _, label_path = manifest.resolve(sample)
        boxes = parse_label_file(label_path)
        gts[image_id_for(sample)] = [(b.class_id, b.to_corner()) for b in boxes]
    return gts


def draw_detections(image, dets, num_classes: int) -> np.ndarray:
    """Copy of a [3, H, W] image with one-pixel box outlines in class colors."""
    data = np.array(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {data.shape}")
    _, height, width = data.shape
    for det in dets:
        color = _class_color(det.class_id, num_classes)
        box = det.bbox.clamped()
        x0 = min(int(box.x_min * width), width - 1)
        x1 = min(int(box.x_max * width), width - 1)
        y0 = min(int(box.y_min * height), height - 1)
        y1 = min(int(box.y_max * height), height - 1)
        data[:, y0, x0 : x1 + 1] = color[:, None]
        data[:, y1, x0 : x1 + 1] = color[:, None]
        data[:, y0 : y1 + 1, x0] = color[:, None]
        data[:, y0 : y1 + 1, x1] = color[:, None]
    return data


def write_overlays(manifest: DatasetManifest, rows, out_dir, num_classes: int) -> list:
    """Render per-image overlay PPMs for detection rows; returns written paths."""
    by_image = {}
    for image_id, det in rows:
        by_image.setdefault(image_id, []).append(det)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for sample in manifest.samples:
        image_id = image_id_for(sample)
        image_path, _ = manifest.resolve(sample)
        image = load_image(image_path)
        overlay = draw_detections(image, by_image.get(image_id, ()), num_classes)
        path = os.path.join(out_dir, f"{image_id}.ppm")
        write_ppm(path, overlay)
        written.append(path)
    return written


__all__ = [
    "detect_on_manifest",
    "draw_detections",
    "ground_truth_map",
    "image_id_for",
    "write_overlays",
]
