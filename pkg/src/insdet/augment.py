"""Reference-set augmentation and distractor statistics.

Synthetic references (externally rendered novel views, or generator output)
are merged into the working reference set per phase. Selection is seeded and
per-instance, so adding instances never reshuffles the views picked for the
others.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .core import ReferenceImage
from .errors import EngineError
from .store import DistractorPool, atomic_output

if TYPE_CHECKING:
    from .store import DatasetManifest

_PHASES = {"train": 0, "test": 1}


@dataclass(frozen=True)
class AugmentationConfig:
    """Which synthetic views join the reference set, per phase."""

    use_synthetic_in_train: bool = False
    synth_per_instance_train: int = 0
    use_synthetic_in_test: bool = False
    synth_per_instance_test: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.synth_per_instance_train < 0 or self.synth_per_instance_test < 0:
            raise EngineError("BadConfig", "synthetic view counts must be non-negative")

    def count_for(self, phase: str) -> int:
        if phase == "train":
            return self.synth_per_instance_train if self.use_synthetic_in_train else 0
        return self.synth_per_instance_test if self.use_synthetic_in_test else 0


def select_references(
    manifest: "DatasetManifest", config: AugmentationConfig, phase: str
) -> list[ReferenceImage]:
    """All real references, plus the configured synthetic views per instance.

    Synthetic views are drawn uniformly without replacement over view_index,
    deterministically from (seed, phase, instance). Real references always
    come first, in manifest order; selected synthetic views follow, ordered
    by (instance, view_index).
    """
    if phase not in _PHASES:
        raise EngineError("BadConfig", f"phase must be 'train' or 'test', got {phase!r}")
    real = [r for r in manifest.references if r.origin == "real"]
    count = config.count_for(phase)
    if count == 0:
        return real

    selected: list[ReferenceImage] = []
    instances = sorted({r.instance for r in manifest.references})
    for instance in instances:
        views = sorted(
            (r for r in manifest.references if r.instance == instance and r.origin == "synthetic"),
            key=lambda r: (r.view_index, r.row),
        )
        if count > len(views):
            raise EngineError(
                "InsufficientViews",
                f"instance {instance} has {len(views)} synthetic views, {count} requested",
            )
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _PHASES[phase], instance]))
        picked = sorted(rng.choice(len(views), size=count, replace=False).tolist())
        selected.extend(views[i] for i in picked)
    return real + selected


def distractor_correlation(
    pool: DistractorPool, references: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-distractor (average, maximum) cosine similarity against all references."""
    dmat = np.asarray(pool.embeddings, dtype=np.float64)
    refs = np.asarray(references, dtype=np.float64)
    if dmat.shape[0] == 0 or refs.shape[0] == 0:
        raise EngineError("EmptyInput", "distractor correlation needs a non-empty pool and reference set")
    dn = np.linalg.norm(dmat, axis=1)
    rn = np.linalg.norm(refs, axis=1)
    if np.any(dn == 0) or np.any(rn == 0):
        raise EngineError("ZeroNorm", "zero-norm row in distractor or reference matrix")
    sims = (dmat / dn[:, None]) @ (refs / rn[:, None]).T
    sims = np.clip(sims, -1.0, 1.0)
    return sims.mean(axis=1), sims.max(axis=1)


def write_distractor_stats(avg: np.ndarray, peak: np.ndarray, path) -> None:
    """CSV export: one row per distractor with its similarity statistics."""
    lines = ["distractor_index,avg_sim,max_sim"]
    for i, (a, m) in enumerate(zip(avg, peak)):
        lines.append(f"{i},{a:.10g},{m:.10g}")
    with atomic_output(path) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
