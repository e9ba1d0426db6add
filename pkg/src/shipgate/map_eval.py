"""Single-class detection evaluation: IoU matching and 101-point average precision.

Conventions:

* boxes use inclusive pixel coordinates, so a box's width is ``x_max - x_min + 1``;
* detections are ranked by confidence (descending), ties broken by image id
  and then by the detection's position in its image's list;
* each detection greedily claims the unmatched ground-truth box with the
  highest IoU at or above the threshold;
* AP with no ground truth is 1.0 when there are also no detections, else 0.0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import IMAGE_SIZE, BBox, DatasetManifest
from .exceptions import MissingFileError, RecordFormatError

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
DETECTION_COLUMNS = ("image_id", "x_min", "y_min", "x_max", "y_max", "confidence")


@dataclass(frozen=True)
class Detection:
    image_id: str
    bbox: BBox
    confidence: float


@dataclass
class DetectionSet:
    by_image: dict[str, list[Detection]] = field(default_factory=dict)
    source: str = "imported"

    @classmethod
    def from_list(cls, detections, source: str = "imported") -> "DetectionSet":
        out = cls(source=source)
        for d in detections:
            out.by_image.setdefault(d.image_id, []).append(d)
        return out

    def __len__(self):
        return sum(len(v) for v in self.by_image.values())

    def all(self) -> list[Detection]:
        return [d for v in self.by_image.values() for d in v]

    def restrict(self, image_ids) -> "DetectionSet":
        keep = set(image_ids)
        return DetectionSet({k: v for k, v in self.by_image.items() if k in keep}, self.source)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _ranked(detections: DetectionSet) -> list[Detection]:
    keyed = [
        (-d.confidence, image_id, k, d)
        for image_id, dets in detections.by_image.items()
        for k, d in enumerate(dets)
    ]
    keyed.sort(key=lambda t: t[:3])
    return [t[3] for t in keyed]


def match_detections(detections: DetectionSet, ground_truth: dict[str, list[BBox]], iou_threshold: float = 0.5):
    """Return ranked ``(confidences, is_true_positive)`` arrays and the GT count."""
    ranked = _ranked(detections)
    claimed = {k: np.zeros(len(v), dtype=bool) for k, v in ground_truth.items()}
    hits = np.zeros(len(ranked), dtype=bool)
    for n, det in enumerate(ranked):
        gts = ground_truth.get(det.image_id, [])
        best, best_iou = -1, iou_threshold
        for g, box in enumerate(gts):
            if claimed[det.image_id][g]:
                continue
            overlap = iou(det.bbox, box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            claimed[det.image_id][best] = True
            hits[n] = True
    n_gt = sum(len(v) for v in ground_truth.values())
    return np.array([d.confidence for d in ranked]), hits, n_gt


def interpolated_ap(hits: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from ranked hit flags."""
    if n_gt == 0:
        return 1.0 if hits.size == 0 else 0.0
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    recall = tp / n_gt
    precision = tp / np.arange(1, hits.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < hits.size, envelope[np.minimum(idx, hits.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(detections: DetectionSet, ground_truth: dict[str, list[BBox]], iou_threshold: float = 0.5) -> float:
    _, hits, n_gt = match_detections(detections, ground_truth, iou_threshold)
    return interpolated_ap(hits, n_gt)


def mean_average_precision(detections, ground_truth, mode: str = "50") -> dict:
    """AP at IoU 0.5 (``mode="50"``) or averaged over 0.5:0.95:0.05 (``mode="50:95"``)."""
    thresholds = (0.5,) if mode == "50" else COCO_IOU_THRESHOLDS if mode == "50:95" else None
    if thresholds is None:
        raise ValueError("mode must be '50' or '50:95'")
    per = {f"{t:.2f}": average_precision(detections, ground_truth, t) for t in thresholds}
    return {"mode": mode, "map": float(np.mean(list(per.values()))), "per_threshold": per}


def eval_subsets(detections: DetectionSet, manifest: DatasetManifest, mode: str = "50") -> dict:
    """mAP over every image of ``manifest`` and over its ship images only."""
    gt_all = manifest.boxes()
    ship_ids = [k for k, v in gt_all.items() if v]
    gt_ship = {k: gt_all[k] for k in ship_ids}
    dets_all = detections.restrict(gt_all)
    dets_ship = detections.restrict(ship_ids)
    full = mean_average_precision(dets_all, gt_all, mode)
    ship = mean_average_precision(dets_ship, gt_ship, mode)
    return {
        "mode": mode,
        "map_full": full["map"],
        "map_ship_only": ship["map"],
        "delta": ship["map"] - full["map"],
        "per_threshold": {"full": full["per_threshold"], "ship_only": ship["per_threshold"]},
        "counts": {
            "images_full": len(gt_all),
            "images_ship_only": len(ship_ids),
            "gt_boxes": sum(len(v) for v in gt_all.values()),
            "detections_full": len(dets_all),
            "detections_ship_only": len(dets_ship),
        },
    }


def _beta_params(model: str, is_tp: bool) -> tuple[float, float]:
    if model == "informative":
        return (5.0, 2.0) if is_tp else (2.0, 5.0)
    if model == "uniform":
        return (1.0, 1.0)
    raise ValueError("confidence_model must be 'informative' or 'uniform'")


def synthetic_detector(
    manifest: DatasetManifest,
    seed: int = 0,
    tp_rate: float = 0.9,
    fp_rate_shipfree: float = 0.2,
    fp_rate_ship: float = 0.1,
    jitter_px: float = 2.0,
    confidence_model: str = "informative",
) -> DetectionSet:
    """Stand-in detector built from ground truth.

    Every GT box is echoed with probability ``tp_rate``, corners jittered
    uniformly by up to ``jitter_px``. Each image then gets one random false
    box with probability ``fp_rate_ship`` or ``fp_rate_shipfree``.
    Confidences come from Beta distributions (``"informative"`` separates
    true and false boxes, ``"uniform"`` does not). Images and boxes are
    processed in sorted order so the output depends only on the manifest contents and
    ``seed``.
    """
    for name, rate in (("tp_rate", tp_rate), ("fp_rate_shipfree", fp_rate_shipfree), ("fp_rate_ship", fp_rate_ship)):
        if not 0 <= rate <= 1:
            raise ValueError(f"{name} must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    w, h = manifest.width, manifest.height
    out = DetectionSet(source="synthetic")
    gt = manifest.boxes()
    for image_id in sorted(gt):
        dets = []
        for box in sorted(gt[image_id], key=BBox.as_tuple):
            if rng.random() >= tp_rate:
                continue
            j = rng.uniform(-jitter_px, jitter_px, size=4) if jitter_px > 0 else np.zeros(4)
            x0 = min(max(box.x_min + j[0], 0.0), w - 1)
            y0 = min(max(box.y_min + j[1], 0.0), h - 1)
            x1 = min(max(box.x_max + j[2], x0), w - 1)
            y1 = min(max(box.y_max + j[3], y0), h - 1)
            conf = rng.beta(*_beta_params(confidence_model, True))
            dets.append(Detection(image_id, BBox(float(x0), float(y0), float(x1), float(y1)), float(conf)))
        rate = fp_rate_ship if gt[image_id] else fp_rate_shipfree
        if rng.random() < rate:
            size = rng.integers(4, 65, size=2)
            x0 = float(rng.integers(0, w - size[0] + 1))
            y0 = float(rng.integers(0, h - size[1] + 1))
            conf = rng.beta(*_beta_params(confidence_model, False))
            dets.append(Detection(image_id, BBox(x0, y0, x0 + size[0] - 1, y0 + size[1] - 1), float(conf)))
        if dets:
            out.by_image[image_id] = dets
    return out


def import_detections(path, width: int = IMAGE_SIZE, height: int = IMAGE_SIZE) -> DetectionSet:
    """Read a detection CSV with columns ``image_id,x_min,y_min,x_max,y_max,confidence``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"detections not found: {path}")
    out = DetectionSet(source="imported")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(c.strip() for c in header) != DETECTION_COLUMNS:
            raise RecordFormatError(f"header must be {','.join(DETECTION_COLUMNS)}", 1)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DETECTION_COLUMNS):
                raise RecordFormatError(f"expected {len(DETECTION_COLUMNS)} fields, got {len(row)}", line)
            image_id = row[0].strip()
            if not image_id:
                raise RecordFormatError("empty image_id", line)
            try:
                x0, y0, x1, y1, conf = (float(v) for v in row[1:])
            except ValueError:
                raise RecordFormatError("non-numeric field", line) from None
            if not all(math.isfinite(v) for v in (x0, y0, x1, y1, conf)):
                raise RecordFormatError("non-finite field", line)
            if not 0 <= conf <= 1:
                raise RecordFormatError(f"confidence {conf} outside [0, 1]", line)
            if x0 > x1 or y0 > y1:
                raise RecordFormatError("box corners are inverted", line)
            box = BBox(x0, y0, x1, y1)
            if not box.within(width, height):
                raise RecordFormatError(f"box {box.as_tuple()} outside the {width}x{height} image", line)
            out.by_image.setdefault(image_id, []).append(Detection(image_id, box, conf))
    return out


def export_detections(detections: DetectionSet, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DETECTION_COLUMNS)
        for d in detections.all():
            writer.writerow([d.image_id, *(repr(float(v)) for v in d.bbox.as_tuple()), repr(d.confidence)])
    return path
