"""Deterministic synthetic instance worlds with known ground truth.

A world consists of unit-sphere instance prototypes, noisy reference views of
each prototype (real plus held-out synthetic views), scene proposals obtained
by pushing prototypes through an invertible domain shift (random rotation
composed with diagonal scaling) plus noise, clutter proposals derived from
distractor directions, and non-overlapping boxes on a virtual canvas. The
prototypes and the shift are stored in a truth file beside the manifest; the
engine's input schema never reads it, so production code cannot cheat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EngineError
from .store import write_embeddings, write_json, write_truth, read_truth
from .trainer import Adapter

TRUTH_FILENAME = "truth.idot"
MANIFEST_FILENAME = "manifest.json"


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the generated world; all randomness derives from the seed."""

    n_instances: int = 25
    refs_per_instance: int = 200
    synth_views_per_instance: int = 12
    dim: int = 128
    scenes: int = 12
    proposals_per_scene: int = 24
    distractor_count: int = 256
    ref_noise: float = 0.066  # per-component stddev before renormalization
    proposal_noise: float = 0.26
    shift_rotation: float = 0.7  # 0 disables the rotation part
    shift_scale_spread: float = 0.9  # diagonal scales in exp(U(0, spread)); 0 disables
    clutter_fraction: float = 0.25
    seed: int = 0
    canvas_size: int = 1024
    box_side_min: int = 12
    box_side_max: int = 160

    def __post_init__(self):
        if min(self.n_instances, self.dim, self.canvas_size) <= 0:
            raise EngineError("BadConfig", "n_instances, dim and canvas_size must be positive")
        if min(
            self.refs_per_instance,
            self.synth_views_per_instance,
            self.scenes,
            self.proposals_per_scene,
            self.distractor_count,
        ) < 0:
            raise EngineError("BadConfig", "counts must be non-negative")
        if self.ref_noise < 0 or self.proposal_noise < 0:
            raise EngineError("BadConfig", "noise levels must be non-negative")
        if self.shift_rotation < 0 or self.shift_scale_spread < 0:
            raise EngineError("BadConfig", "shift strengths must be non-negative")
        if not 0.0 <= self.clutter_fraction <= 1.0:
            raise EngineError("BadConfig", "clutter_fraction must be in [0, 1]")
        if not 0 < self.box_side_min <= self.box_side_max <= self.canvas_size:
            raise EngineError("BadConfig", "box side range must fit inside the canvas")


@dataclass(frozen=True)
class GeneratedWorld:
    out_dir: Path
    manifest_path: Path
    truth_path: Path


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1)[:, None]


def _domain_shift(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    """Rotation (Cayley transform of a scaled skew matrix) composed with
    expansion-only diagonal scaling; invertible by construction.

    Scales are drawn in exp(U(0, spread)) so the inverse map never amplifies
    additive noise, which keeps the analytic inverse a strict upper baseline
    on noisy worlds."""
    q = config.dim
    rotation = np.eye(q)
    if config.shift_rotation > 0:
        raw = rng.standard_normal((q, q))
        skew = (raw - raw.T) / 2.0
        skew *= config.shift_rotation / np.linalg.norm(skew, 2)
        rotation = (np.eye(q) - skew) @ np.linalg.inv(np.eye(q) + skew)
    scales = np.ones(q)
    if config.shift_scale_spread > 0:
        scales = np.exp(rng.uniform(0.0, config.shift_scale_spread, q))
    return rotation * scales[None, :]


def _place_boxes(rng: np.random.Generator, config: SynthConfig, count: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping integer boxes with log-uniform side lengths."""
    log_lo, log_hi = math.log(config.box_side_min), math.log(config.box_side_max)
    placed: list[tuple[int, int, int, int]] = []
    for k in range(count):
        for _ in range(500):
            w = int(round(math.exp(rng.uniform(log_lo, log_hi))))
            h = int(round(math.exp(rng.uniform(log_lo, log_hi))))
            x = int(rng.integers(0, config.canvas_size - w + 1))
            y = int(rng.integers(0, config.canvas_size - h + 1))
            if all(x + w <= px or px + pw <= x or y + h <= py or ph + py <= y for px, py, pw, ph in placed):
                placed.append((x, y, w, h))
                break
        else:
            raise EngineError(
                "PlacementFailed",
                f"could not place box {k + 1}/{count} on a {config.canvas_size}px canvas "
                f"after 500 tries; reduce box sizes or proposal count",
            )
    return placed


def generate(config: SynthConfig, out_dir: str | Path) -> GeneratedWorld:
    """Emit a complete dataset (embedding files, manifest, truth file)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    q = config.dim

    # Prototypes and shift are rounded to float32 immediately so the stored
    # truth file is exact for the oracle adapter.
    prototypes = _unit_rows(rng.standard_normal((config.n_instances, q))).astype(np.float32).astype(np.float64)
    shift = _domain_shift(rng, config).astype(np.float32).astype(np.float64)

    def noisy_view(prototype: np.ndarray, sigma: float) -> np.ndarray:
        v = prototype + sigma * rng.standard_normal(q)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            v = prototype.copy()
            norm = np.linalg.norm(v)
        return v / norm

    real_rows, real_items = [], []
    synth_rows, synth_items = [], []
    for inst in range(config.n_instances):
        for view in range(config.refs_per_instance):
            real_items.append({"instance": inst, "row": len(real_rows), "view_index": view})
            real_rows.append(noisy_view(prototypes[inst], config.ref_noise))
        for view in range(config.synth_views_per_instance):
            synth_items.append({"instance": inst, "row": len(synth_rows), "view_index": view})
            synth_rows.append(noisy_view(prototypes[inst], config.ref_noise))

    distractors = (
        _unit_rows(rng.standard_normal((config.distractor_count, q)))
        if config.distractor_count > 0
        else np.zeros((0, q))
    )

    proposal_rows: list[np.ndarray] = []
    scene_docs = []
    n_clutter = int(round(config.clutter_fraction * config.proposals_per_scene))
    for s in range(config.scenes):
        boxes = _place_boxes(rng, config, config.proposals_per_scene)
        kinds = np.zeros(config.proposals_per_scene, dtype=bool)
        kinds[:n_clutter] = True
        kinds = rng.permutation(kinds)
        proposals_doc, gt_doc = [], []
        for j in range(config.proposals_per_scene):
            if kinds[j]:
                if config.distractor_count > 0:
                    base = distractors[int(rng.integers(config.distractor_count))]
                else:
                    base = rng.standard_normal(q)
                    base = base / np.linalg.norm(base)
            else:
                inst = int(rng.integers(config.n_instances))
                base = prototypes[inst]
                gt_doc.append({"instance": inst, "box": list(boxes[j])})
            emb = shift @ base + config.proposal_noise * rng.standard_normal(q)
            norm = np.linalg.norm(emb)
            if norm == 0.0:
                emb, norm = shift @ base, np.linalg.norm(shift @ base)
            proposals_doc.append(
                {
                    "row": len(proposal_rows),
                    "box": list(boxes[j]),
                    "detector_score": round(float(rng.uniform(0.5, 1.0)), 4),
                }
            )
            proposal_rows.append(emb / norm)
        scene_docs.append(
            {
                "id": f"scene_{s:03d}",
                "width": config.canvas_size,
                "height": config.canvas_size,
                "difficulty": "hard" if s % 2 else "easy",
                "proposals": proposals_doc,
                "ground_truth": gt_doc,
            }
        )

    write_embeddings(np.asarray(real_rows, dtype=np.float64).reshape(-1, q), out / "references_real.idow")
    groups = [{"path": "references_real.idow", "origin": "real", "items": real_items}]
    if synth_rows:
        write_embeddings(np.asarray(synth_rows, dtype=np.float64).reshape(-1, q), out / "references_synth.idow")
        groups.append({"path": "references_synth.idow", "origin": "synthetic", "items": synth_items})
    write_embeddings(np.asarray(proposal_rows, dtype=np.float64).reshape(-1, q), out / "proposals.idow")

    manifest_doc = {
        "format_version": 1,
        "dim": q,
        "size_thresholds": [1024.0, 9216.0],
        "reference_groups": groups,
        "proposals_file": "proposals.idow",
        "scenes": scene_docs,
    }
    if config.distractor_count > 0:
        write_embeddings(distractors, out / "distractors.idow")
        manifest_doc["distractors"] = {
            "path": "distractors.idow",
            "count": config.distractor_count,
            "source": "synthetic background pool",
        }

    truth_path = out / TRUTH_FILENAME
    write_truth(prototypes, shift, truth_path)
    manifest_path = out / MANIFEST_FILENAME
    write_json(manifest_doc, manifest_path)
    return GeneratedWorld(out_dir=out, manifest_path=manifest_path, truth_path=truth_path)


def oracle_adapter(truth_path: str | Path) -> Adapter:
    """The analytic inverse of the generated domain shift; for tests only."""
    truth_path = Path(truth_path)
    if not truth_path.exists():
        raise EngineError("MissingFile", f"truth file {truth_path} does not exist")
    _, shift = read_truth(truth_path)
    return Adapter(np.linalg.inv(shift), np.zeros(shift.shape[0]))
