"""Feature-space instance detection engine.

Pipeline: ingest embedding files and a dataset manifest, adapt the embedding
map by metric learning (triplet loss, hard-negative mining, distractor
negatives), match scene proposals to visual references with a stable matching
over cosine similarities, and score the detections with AP/AR metrics. A
deterministic synthetic-world generator provides ground truth for end-to-end
verification.
"""

from .augment import AugmentationConfig, distractor_correlation, select_references
from .core import BoundingBox, GroundTruth, Proposal, ReferenceImage, Scene, cosine_distance, iou, size_class
from .errors import EngineError
from .evaluator import MetricsReport, PrCurve, average_precision, evaluate, match_detections_to_gt, pr_curve
from .matcher import Detection, emit_detections, run_inference, similarity_matrix, stable_match
from .store import (
    DatasetManifest,
    DistractorPool,
    load_manifest,
    read_adapter_checkpoint,
    read_embeddings,
    write_adapter_checkpoint,
    write_embeddings,
)
from .synthgen import GeneratedWorld, SynthConfig, generate, oracle_adapter
from .trainer import (
    Adam,
    Adapter,
    Triplet,
    TripletConfig,
    TrainResult,
    ce_loss,
    contrastive_loss,
    forward,
    hard_negative,
    identity_adapter,
    init_adapter,
    loss_gradient,
    train,
    triplet_loss,
)

__version__ = "0.1.0"
