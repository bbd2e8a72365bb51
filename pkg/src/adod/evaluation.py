"""Per-class average precision and mAP over detection dumps and ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .postprocess import iou

DEFAULT_CLASS_NAMES = ("echinus", "starfish", "holothurian", "scallop", "waterweed")

INTERPOLATIONS = ("all_point", "eleven_point")


@dataclass(frozen=True)
class EvalConfig:
    iou_match_threshold: float = 0.5
    interpolation: str = "all_point"
    per_class_breakdown: bool = True

    def __post_init__(self):
        if not 0.0 < self.iou_match_threshold < 1.0:
            raise ValueError(
                f"iou_match_threshold must lie in (0, 1), got {self.iou_match_threshold}"
            )
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(
                f"interpolation must be one of {INTERPOLATIONS}, got {self.interpolation!r}"
            )


@dataclass(frozen=True)
class EvalReport:
    class_names: tuple
    ap_percent: tuple       # one 2-decimal percent per class
    map_percent: float
    gt_counts: tuple
    tp_total: int
    fp_total: int


def match_detections(dets, gts, iou_thr: float):
    """Label single-class detections TP/FP against single-class ground truth.

    ``dets`` are (image_id, Detection) rows; ``gts`` maps image_id to a list
    of BBox.  Detections are ranked by score descending (deterministic
    tie-break on image id and box), and each greedily takes the highest-IoU
    still-unmatched GT of its image when that IoU reaches ``iou_thr``.
    Returns (labeled, num_gt) where labeled is a ranked list of
    (score, is_tp).
    """
    num_gt = sum(len(boxes) for boxes in gts.values())
    ranked = sorted(
        dets, key=lambda row: (-row[1].score, row[0], row[1].bbox.as_tuple())
    )
    taken = {image_id: [False] * len(boxes) for image_id, boxes in gts.items()}
    labeled = []
    for image_id, det in ranked:
        boxes = gts.get(image_id, ())
        best_iou = 0.0
        best_idx = -1
        for idx, gt_box in enumerate(boxes):
            if taken[image_id][idx]:
                continue
            overlap = iou(det.bbox, gt_box)
            if overlap >= iou_thr and overlap > best_iou:
                best_iou = overlap
                best_idx = idx
        if best_idx >= 0:
            taken[image_id][best_idx] = True
            labeled.append((det.score, True))
        else:
            labeled.append((det.score, False))
    return labeled, num_gt


def precision_recall_points(labeled, num_gt: int):
    """Cumulative (recall, precision) arrays over the ranked label list."""
    flags = np.array([1.0 if tp else 0.0 for _, tp in labeled])
    cum_tp = np.cumsum(flags)
    cum_fp = np.cumsum(1.0 - flags)
    ranks = cum_tp + cum_fp
    precision = cum_tp / ranks
    recall = cum_tp / num_gt if num_gt > 0 else np.zeros_like(cum_tp)
    return recall, precision


def average_precision(labeled, num_gt: int, interpolation: str = "all_point") -> float:
    if interpolation not in INTERPOLATIONS:
        raise ValueError(
            f"interpolation must be one of {INTERPOLATIONS}, got {interpolation!r}"
        )
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0 or not labeled:
        return 0.0
    recall, precision = precision_recall_points(labeled, num_gt)
    # precision envelope: at each rank, the best precision at >= that recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "all_point":
        prev = np.concatenate(([0.0], recall[:-1]))
        return float(np.sum((recall - prev) * envelope))
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t - 1e-12
        total += float(envelope[mask].max()) if mask.any() else 0.0
    return total / 11.0


def mean_ap(per_class_ap) -> float:
    """Arithmetic mean of per-class AP fractions, as a 2-decimal percent."""
    aps = list(per_class_ap)
    if not aps:
        raise ValueError("mean_ap needs at least one class")
    return round(100.0 * sum(aps) / len(aps), 2)


def evaluate_detections(rows, gts, num_classes: int, config: EvalConfig):
    """Score (image_id, Detection) rows against per-image ground truth.

    ``gts`` maps image_id to a list of (class_id, BBox).  Returns
    (EvalReport, pr_curves) where pr_curves maps class_id to its
    (recall, precision) arrays for plotting.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    for image_id, det in rows:
        if det.class_id >= num_classes:
            raise ValueError(
                f"detection in image {image_id} has class {det.class_id}, "
                f"but only {num_classes} classes are configured"
            )
    aps = []
    gt_counts = []
    tp_total = 0
    fp_total = 0
    pr_curves = {}
    for class_id in range(num_classes):
        class_rows = [(img, det) for img, det in rows if det.class_id == class_id]
        class_gts = {}
        for image_id, entries in gts.items():
            boxes = [box for cid, box in entries if cid == class_id]
            if boxes:
                class_gts[image_id] = boxes
        labeled, num_gt = match_detections(class_rows, class_gts, config.iou_match_threshold)
        aps.append(average_precision(labeled, num_gt, config.interpolation))
        gt_counts.append(num_gt)
        tp_total += sum(1 for _, tp in labeled if tp)
        fp_total += sum(1 for _, tp in labeled if not tp)
        if labeled and num_gt > 0:
            pr_curves[class_id] = precision_recall_points(labeled, num_gt)
        else:
            pr_curves[class_id] = (np.zeros(0), np.zeros(0))
    return (
        EvalReport(
            class_names=tuple(DEFAULT_CLASS_NAMES[i] if i < len(DEFAULT_CLASS_NAMES) else f"class{i}"
                              for i in range(num_classes)),
            ap_percent=tuple(round(100.0 * ap, 2) for ap in aps),
            map_percent=mean_ap(aps),
            gt_counts=tuple(gt_counts),
            tp_total=tp_total,
            fp_total=fp_total,
        ),
        pr_curves,
    )


def with_class_names(report: EvalReport, class_names) -> EvalReport:
    names = tuple(class_names)
    if len(names) != len(report.ap_percent):
        raise ValueError(
            f"got {len(names)} class names for {len(report.ap_percent)} classes"
        )
    return EvalReport(
        class_names=names,
        ap_percent=report.ap_percent,
        map_percent=report.map_percent,
        gt_counts=report.gt_counts,
        tp_total=report.tp_total,
        fp_total=report.fp_total,
    )


# -- report output -----------------------------------------------------------


def _text_report(report: EvalReport) -> str:
    headers = ["class"] + list(report.class_names) + ["mAP"]
    ap_row = ["ap"] + [f"{v:.2f}" for v in report.ap_percent] + [f"{report.map_percent:.2f}"]
    gt_row = ["gt"] + [str(c) for c in report.gt_counts] + [str(sum(report.gt_counts))]
    widths = [max(len(col[i]) for col in (headers, ap_row, gt_row)) for i in range(len(headers))]
    lines = []
    for row in (headers, ap_row, gt_row):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip())
    lines.append(f"tp {report.tp_total}  fp {report.fp_total}")
    return "\n".join(lines) + "\n"


def _csv_report(report: EvalReport) -> str:
    lines = ["class,ap_percent,gt_count"]
    for name, ap, gt in zip(report.class_names, report.ap_percent, report.gt_counts):
        lines.append(f"{name},{ap:.2f},{gt}")
    lines.append(f"mAP,{report.map_percent:.2f},{sum(report.gt_counts)}")
    return "\n".join(lines) + "\n"


def _json_report(report: EvalReport) -> str:
    payload = {name: ap for name, ap in zip(report.class_names, report.ap_percent)}
    payload["mAP"] = report.map_percent
    payload["counts"] = {
        "gt": {name: gt for name, gt in zip(report.class_names, report.gt_counts)},
        "tp": report.tp_total,
        "fp": report.fp_total,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def render_report(report: EvalReport, format: str) -> str:
    if format == "text":
        return _text_report(report)
    if format == "csv":
        return _csv_report(report)
    if format == "json":
        return _json_report(report)
    raise ValueError(f"format must be text, csv or json, got {format!r}")


def emit_report(report: EvalReport, format: str, path) -> None:
    text = render_report(report, format)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def parse_report_csv(path):
    """Round-trip reader for the csv report: (names, ap_percents, gts, map_percent)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or lines[0] != "class,ap_percent,gt_count":
        raise ValueError("not a recognizable eval csv report")
    names, aps, gts = [], [], []
    map_percent = None
    for line in lines[1:]:
        name, ap, gt = line.split(",")
        if name == "mAP":
            map_percent = float(ap)
        else:
            names.append(name)
            aps.append(float(ap))
            gts.append(int(gt))
    if map_percent is None:
        raise ValueError("csv report is missing the mAP row")
    return names, aps, gts, map_percent
