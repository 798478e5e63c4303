"""Detection metrics: AP over IoU 0.50:0.05:0.95, AP50/AP75, tag and size
breakdowns, AR at detection caps, and precision-recall curve export.

Conventions (COCO-style, desk scale):
  - 101-point interpolation: precision is a running max from the right,
    sampled on the recall grid {0.00, 0.01, ..., 1.00}.
  - AP is computed per instance per IoU threshold, averaged over thresholds,
    then over instances. An instance with no ground truth scores 0 when it
    has detections and is skipped when it has none.
  - Matching is greedy in score order; each ground truth matches at most one
    detection. Score ties break on (scene id, box coordinates), so metrics
    are invariant to input order.
  - Size slices restrict ground truth to one size class; unmatched
    detections whose own box falls outside the class are ignored rather
    than counted as false positives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .core import BoundingBox, SIZE_CLASSES, iou, size_class
from .errors import EngineError
from .matcher import Detection
from .store import atomic_output, write_json

if TYPE_CHECKING:
    from .store import DatasetManifest

IOU_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))
RECALL_GRID = tuple(i / 100.0 for i in range(101))


def match_detections_to_gt(
    det_boxes: Sequence[BoundingBox], gt_boxes: Sequence[BoundingBox], iou_t: float
) -> list[bool]:
    """Greedy TP/FP labels for one scene+instance group.

    ``det_boxes`` must already be sorted by descending score. Each detection
    takes the unmatched ground truth with the highest IoU >= iou_t (ties to
    the lower index); everything else is a false positive.
    """
    taken = [False] * len(gt_boxes)
    labels = []
    for db in det_boxes:
        best, best_iou = -1, iou_t
        for gi, gb in enumerate(gt_boxes):
            if taken[gi]:
                continue
            overlap = iou(db, gb)
            if overlap > best_iou or (overlap == best_iou and overlap >= iou_t and best < 0):
                best, best_iou = gi, overlap
        if best >= 0:
            taken[best] = True
            labels.append(True)
        else:
            labels.append(False)
    return labels


def _grid_precisions(labels: Sequence[bool], n_gt: int) -> np.ndarray:
    """Interpolated precision at each recall grid point."""
    if not labels or n_gt <= 0:
        return np.zeros(len(RECALL_GRID))
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    ranks = np.arange(1, len(labels) + 1, dtype=np.float64)
    recalls = tp / n_gt
    precisions = tp / ranks
    running = np.maximum.accumulate(precisions[::-1])[::-1]
    idx = np.searchsorted(recalls, np.asarray(RECALL_GRID), side="left")
    out = np.zeros(len(RECALL_GRID))
    in_range = idx < len(labels)
    out[in_range] = running[idx[in_range]]
    return out


def average_precision(labels: Sequence[bool], n_gt: int) -> float | None:
    """101-point interpolated AP; None when there is nothing to score."""
    if n_gt < 0:
        raise EngineError("BadConfig", f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0:
        return 0.0 if labels else None
    return float(_grid_precisions(labels, n_gt).mean())


@dataclass(frozen=True)
class _Det:
    scene_id: str
    instance: int
    box: BoundingBox
    score: float
    size: str


@dataclass(frozen=True)
class _Gt:
    scene_id: str
    instance: int
    box: BoundingBox
    size: str
    difficulty: str


def _rank_key(d: _Det):
    return (-d.score, d.scene_id, d.box.x, d.box.y, d.box.w, d.box.h)


def _prepare(detections: list[Detection], manifest: "DatasetManifest") -> tuple[list[_Det], list[_Gt]]:
    scene_ids = {s.scene_id for s in manifest.scenes}
    dets = []
    for d in detections:
        if d.scene_id not in scene_ids:
            raise EngineError("UnknownScene", f"detection references unknown scene {d.scene_id!r}")
        dets.append(
            _Det(d.scene_id, d.instance, d.box, d.score, size_class(d.box, manifest.size_thresholds))
        )
    dets.sort(key=_rank_key)
    gts = [
        _Gt(s.scene_id, g.instance, g.box, size_class(g.box, manifest.size_thresholds), s.difficulty)
        for s in manifest.scenes
        for g in s.ground_truth
    ]
    return dets, gts


def _label_ranked(
    ranked: list[_Det], gts: list[_Gt], iou_t: float, size_slice: str | None = None
) -> list[bool]:
    """Greedy labels across (scene, instance) groups, in global rank order.

    With a size slice, unmatched detections of another size class are ignored
    (dropped from the ranking) instead of counted as false positives.
    """
    available: dict[tuple[str, int], list[BoundingBox]] = {}
    for g in gts:
        available.setdefault((g.scene_id, g.instance), []).append(g.box)
    taken: dict[tuple[str, int], list[bool]] = {k: [False] * len(v) for k, v in available.items()}

    labels = []
    for det in ranked:
        key = (det.scene_id, det.instance)
        boxes = available.get(key, [])
        used = taken.get(key, [])
        best, best_iou = -1, iou_t
        for gi, gb in enumerate(boxes):
            if used[gi]:
                continue
            overlap = iou(det.box, gb)
            if overlap > best_iou or (overlap == best_iou and overlap >= iou_t and best < 0):
                best, best_iou = gi, overlap
        if best >= 0:
            used[best] = True
            labels.append(True)
        elif size_slice is not None and det.size != size_slice:
            continue  # cross-size false positives do not count in a size slice
        else:
            labels.append(False)
    return labels


def _instance_universe(manifest: "DatasetManifest", gts: list[_Gt]) -> list[int]:
    return sorted(manifest.reference_instances() | {g.instance for g in gts})


def _slice_ap(
    dets: list[_Det],
    gts: list[_Gt],
    instances: list[int],
    scene_tags: dict[str, str] | None = None,
    difficulty: str | None = None,
    size_slice: str | None = None,
) -> tuple[float | None, dict[int, float | None]]:
    if difficulty is not None:
        tags = scene_tags or {}
        dets = [d for d in dets if tags.get(d.scene_id) == difficulty]
    sliced_gts = gts
    if difficulty is not None:
        sliced_gts = [g for g in sliced_gts if g.difficulty == difficulty]
    if size_slice is not None:
        sliced_gts = [g for g in sliced_gts if g.size == size_slice]

    per_instance: dict[int, float | None] = {}
    values = []
    for c in instances:
        dets_c = [d for d in dets if d.instance == c]
        gts_c = [g for g in sliced_gts if g.instance == c]
        n_gt = len(gts_c)
        aps = []
        for iou_t in IOU_THRESHOLDS:
            labels = _label_ranked(dets_c, gts_c, iou_t, size_slice)
            ap = average_precision(labels, n_gt)
            if ap is None:
                aps = None
                break
            aps.append(ap)
        value = None if aps is None else float(np.mean(aps))
        per_instance[c] = value
        if value is not None:
            values.append(value)
    return (float(np.mean(values)) if values else None), per_instance


def _ap_at(dets: list[_Det], gts: list[_Gt], instances: list[int], iou_t: float) -> float | None:
    values = []
    for c in instances:
        dets_c = [d for d in dets if d.instance == c]
        gts_c = [g for g in gts if g.instance == c]
        ap = average_precision(_label_ranked(dets_c, gts_c, iou_t), len(gts_c))
        if ap is not None:
            values.append(ap)
    return float(np.mean(values)) if values else None


def _topk_per_scene(dets: list[_Det], k: int) -> list[_Det]:
    per_scene: dict[str, int] = {}
    kept = []
    for d in dets:  # already globally ranked
        count = per_scene.get(d.scene_id, 0)
        if count < k:
            per_scene[d.scene_id] = count + 1
            kept.append(d)
    return kept


def _slice_ar(
    dets: list[_Det],
    gts: list[_Gt],
    instances: list[int],
    max_dets: int,
    size_slice: str | None = None,
) -> float | None:
    kept = _topk_per_scene(dets, max_dets)
    sliced_gts = [g for g in gts if size_slice is None or g.size == size_slice]
    values = []
    for c in instances:
        dets_c = [d for d in kept if d.instance == c]
        gts_c = [g for g in sliced_gts if g.instance == c]
        if not gts_c:
            continue
        recalls = []
        for iou_t in IOU_THRESHOLDS:
            labels = _label_ranked(dets_c, gts_c, iou_t)
            recalls.append(sum(labels) / len(gts_c))
        values.append(float(np.mean(recalls)))
    return float(np.mean(values)) if values else None


@dataclass
class MetricsReport:
    """AP/AR family on the [0, 1] scale; serialized x100 with two decimals."""

    ap_avg: float | None
    ap50: float | None
    ap75: float | None
    ap_hard: float | None
    ap_easy: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ar_max10: float | None
    ar_max100: float | None
    ar_small: float | None
    ar_medium: float | None
    ar_large: float | None
    per_instance_ap: dict[int, float | None]

    def to_dict(self) -> dict:
        def scale(v):
            return None if v is None else round(100.0 * v, 2)

        return {
            "ap": {
                "avg": scale(self.ap_avg),
                "ap50": scale(self.ap50),
                "ap75": scale(self.ap75),
                "hard": scale(self.ap_hard),
                "easy": scale(self.ap_easy),
                "small": scale(self.ap_small),
                "medium": scale(self.ap_medium),
                "large": scale(self.ap_large),
            },
            "ar": {
                "max10": scale(self.ar_max10),
                "max100": scale(self.ar_max100),
                "small_max100": scale(self.ar_small),
                "medium_max100": scale(self.ar_medium),
                "large_max100": scale(self.ar_large),
            },
            "per_instance_ap": {str(k): scale(v) for k, v in sorted(self.per_instance_ap.items())},
        }


def evaluate(detections: list[Detection], manifest: "DatasetManifest") -> MetricsReport:
    """Full metric report for a detection set against the manifest's ground truth."""
    dets, gts = _prepare(detections, manifest)
    instances = _instance_universe(manifest, gts)
    scene_tags = {s.scene_id: s.difficulty for s in manifest.scenes}

    ap_avg, per_instance = _slice_ap(dets, gts, instances)
    sizes = {
        s: _slice_ap(dets, gts, instances, size_slice=s)[0] for s in SIZE_CLASSES
    }
    return MetricsReport(
        ap_avg=ap_avg,
        ap50=_ap_at(dets, gts, instances, 0.5),
        ap75=_ap_at(dets, gts, instances, 0.75),
        ap_hard=_slice_ap(dets, gts, instances, scene_tags, difficulty="hard")[0],
        ap_easy=_slice_ap(dets, gts, instances, scene_tags, difficulty="easy")[0],
        ap_small=sizes["small"],
        ap_medium=sizes["medium"],
        ap_large=sizes["large"],
        ar_max10=_slice_ar(dets, gts, instances, 10),
        ar_max100=_slice_ar(dets, gts, instances, 100),
        ar_small=_slice_ar(dets, gts, instances, 100, size_slice="small"),
        ar_medium=_slice_ar(dets, gts, instances, 100, size_slice="medium"),
        ar_large=_slice_ar(dets, gts, instances, 100, size_slice="large"),
        per_instance_ap=per_instance,
    )


def write_metrics(report: MetricsReport, path) -> None:
    write_json(report.to_dict(), path)


@dataclass
class PrCurve:
    """Micro-averaged interpolated precision over the 101-point recall grid."""

    iou_threshold: float
    recalls: np.ndarray
    precisions: np.ndarray


def pr_curve(detections: list[Detection], manifest: "DatasetManifest", iou_t: float = 0.5) -> PrCurve:
    """Precision-recall curve pooled over all instances at one IoU threshold."""
    dets, gts = _prepare(detections, manifest)
    n_gt = len(gts)
    if n_gt == 0:
        raise EngineError("EmptyInput", "precision-recall needs at least one ground-truth box")
    labels = _label_ranked(dets, gts, iou_t)
    return PrCurve(
        iou_threshold=iou_t,
        recalls=np.asarray(RECALL_GRID),
        precisions=_grid_precisions(labels, n_gt),
    )


def write_pr_curve(curve: PrCurve, path) -> None:
    lines = ["recall,precision"]
    for r, p in zip(curve.recalls, curve.precisions):
        lines.append(f"{r:.2f},{p:.10g}")
    with atomic_output(path) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
