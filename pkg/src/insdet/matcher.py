"""Inference: proposal/reference similarity, stable matching, detections.

Scenes are independent units of work. Matching is one-to-one between the
scene's proposals and the selected reference images (proposals propose, so
the result is proposer-optimal); a matched pair becomes a detection only if
its similarity strictly exceeds the acceptance threshold.
"""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .core import BoundingBox, ReferenceImage, Scene
from .errors import EngineError
from .store import atomic_output
from .trainer import Adapter, forward_rows

if TYPE_CHECKING:
    from .augment import AugmentationConfig
    from .store import DatasetManifest

DEFAULT_THRESHOLD = 0.4


@dataclass(frozen=True)
class Detection:
    """An accepted proposal/reference pair for one scene."""

    scene_id: str
    instance: int
    box: BoundingBox
    score: float
    matched_reference: int = -1  # row of the matched reference, -1 if unknown
    proposal_index: int = -1


def similarity_matrix(adapter: Adapter, proposals: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of adapted features, clipped to [-1, 1]."""
    proposals = np.asarray(proposals, dtype=np.float64)
    references = np.asarray(references, dtype=np.float64)
    if proposals.shape[0] == 0 or references.shape[0] == 0:
        return np.zeros((proposals.shape[0], references.shape[0]))
    feats_p = forward_rows(adapter, proposals, what="proposal")
    feats_r = forward_rows(adapter, references, what="reference")
    return np.clip(feats_p @ feats_r.T, -1.0, 1.0)


def stable_match(similarity: np.ndarray) -> dict[int, int]:
    """Proposer-optimal stable matching over a similarity matrix.

    Rows (proposals) propose in decreasing-similarity order; columns accept
    the best offer seen so far. Both sides break similarity ties toward the
    lower index. Every row is matched whenever columns are plentiful; the
    result is the unique row-optimal stable matching.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    if similarity.ndim != 2:
        raise EngineError("BadShape", f"similarity matrix must be 2-D, got {similarity.shape}")
    if not np.all(np.isfinite(similarity)):
        raise EngineError("NonFinite", "similarity matrix contains NaN or Inf")
    n, m = similarity.shape
    if n == 0 or m == 0:
        return {}

    # Stable argsort of -similarity keeps equal entries in index order.
    preference = np.argsort(-similarity, axis=1, kind="stable")
    next_choice = np.zeros(n, dtype=np.intp)
    holder = np.full(m, -1, dtype=np.intp)
    free = deque(range(n))
    while free:
        p = free.popleft()
        while next_choice[p] < m:
            r = int(preference[p, next_choice[p]])
            next_choice[p] += 1
            h = int(holder[r])
            if h < 0:
                holder[r] = p
                break
            if similarity[p, r] > similarity[h, r] or (similarity[p, r] == similarity[h, r] and p < h):
                holder[r] = p
                free.append(h)
                break
        # A row that exhausts its list stays unmatched (only when n > m).
    return {int(p): int(r) for r, p in enumerate(holder) if p >= 0}


def emit_detections(
    assignment: dict[int, int],
    similarity: np.ndarray,
    scene: Scene,
    selected: list[ReferenceImage],
    threshold: float = DEFAULT_THRESHOLD,
) -> list[Detection]:
    """One detection per matched pair whose similarity strictly exceeds the threshold."""
    detections = []
    for p in sorted(assignment):
        r = assignment[p]
        score = float(similarity[p, r])
        if score > threshold:
            ref = selected[r]
            detections.append(
                Detection(
                    scene_id=scene.scene_id,
                    instance=ref.instance,
                    box=scene.proposals[p].box,
                    score=score,
                    matched_reference=ref.row,
                    proposal_index=p,
                )
            )
    return detections


def run_inference(
    manifest: "DatasetManifest",
    adapter: Adapter,
    aug: "AugmentationConfig",
    threshold: float = DEFAULT_THRESHOLD,
    threads: int = 1,
) -> list[Detection]:
    """Match every scene's proposals against the test-phase reference set.

    Output is canonically ordered by (scene order, proposal index) regardless
    of the thread count.
    """
    from .augment import select_references

    selected = select_references(manifest, aug, "test")
    if not selected:
        return []
    ref_rows = manifest.reference_matrix[[r.row for r in selected]].astype(np.float64)
    feats_r = forward_rows(adapter, ref_rows, what="reference")

    def match_scene(scene: Scene) -> list[Detection]:
        if not scene.proposals:
            return []
        prop_rows = manifest.proposal_matrix[[p.row for p in scene.proposals]].astype(np.float64)
        feats_p = forward_rows(adapter, prop_rows, what="proposal")
        similarity = np.clip(feats_p @ feats_r.T, -1.0, 1.0)
        assignment = stable_match(similarity)
        return emit_detections(assignment, similarity, scene, selected, threshold)

    scenes = sorted(manifest.scenes, key=lambda s: s.scene_id)
    if threads > 1 and len(scenes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_scene = list(pool.map(match_scene, scenes))
    else:
        per_scene = [match_scene(scene) for scene in scenes]
    return [det for scene_dets in per_scene for det in scene_dets]


def write_detections(detections: list[Detection], path) -> None:
    """COCO-results-style JSON array: image_id, instance_id, bbox, score."""
    records = [
        {
            "image_id": d.scene_id,
            "instance_id": d.instance,
            "bbox": d.box.as_list(),
            "score": d.score,
        }
        for d in detections
    ]
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(records, fh, indent=2)
            fh.write("\n")


def read_detections(path) -> list[Detection]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            records = json.load(fh)
    except FileNotFoundError:
        raise EngineError("MissingFile", f"detections file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise EngineError("SchemaViolation", f"{path}: not valid JSON ({exc})")
    if not isinstance(records, list):
        raise EngineError("SchemaViolation", f"{path}: detections must be a JSON array")
    detections = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise EngineError("SchemaViolation", f"{path}: record {i} must be an object")
        try:
            box = rec["bbox"]
            detections.append(
                Detection(
                    scene_id=str(rec["image_id"]),
                    instance=int(rec["instance_id"]),
                    box=BoundingBox(float(box[0]), float(box[1]), float(box[2]), float(box[3])),
                    score=float(rec["score"]),
                    proposal_index=i,
                )
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise EngineError("SchemaViolation", f"{path}: record {i} is malformed ({exc})")
    return detections
