"""Embedding adapter and its metric-learning optimization.

The adapter is an affine map followed by L2 normalization over frozen input
embeddings. Training minimizes a margin (triplet) loss with batch-level
hard-negative mining and distractor negatives, using a from-scratch Adam
optimizer; contrastive and cross-entropy objectives are available for
comparison runs. All gradients are analytic and are verified against central
finite differences in the test suite.

Everything here computes in float64; training is deterministic given the
config seed (fixed sampling and reduction order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import EngineError
from .store import DistractorPool, atomic_output

if TYPE_CHECKING:
    from .augment import AugmentationConfig
    from .store import DatasetManifest


@dataclass
class Adapter:
    """Affine map plus L2 normalization: x -> normalize(W x + b)."""

    weight: np.ndarray  # p x q, float64
    bias: np.ndarray  # p, float64

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise EngineError(
                "BadShape",
                f"adapter shapes disagree: W {self.weight.shape}, b {self.bias.shape}",
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise EngineError("NonFinite", "adapter parameters must be finite")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "Adapter":
        return Adapter(self.weight.copy(), self.bias.copy())


def identity_adapter(dim: int) -> Adapter:
    return Adapter(np.eye(dim), np.zeros(dim))


def init_adapter(dim: int, rng: np.random.Generator, out_dim: int | None = None, noise: float = 0.01) -> Adapter:
    """Near-identity starting point: W = I + noise * N(0, 1), b = 0."""
    p = dim if out_dim is None else out_dim
    weight = np.eye(p, dim) + noise * rng.standard_normal((p, dim))
    return Adapter(weight, np.zeros(p))


def forward(adapter: Adapter, x: np.ndarray) -> np.ndarray:
    """Unit-norm feature for one input vector."""
    z = adapter.weight @ np.asarray(x, dtype=np.float64) + adapter.bias
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise EngineError("DegenerateProjection", "adapter mapped the input exactly to zero")
    return z / norm


def forward_rows(adapter: Adapter, rows: np.ndarray, what: str = "input") -> np.ndarray:
    """Unit-norm features for a stack of row vectors."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        return np.zeros((0, adapter.out_dim))
    z = rows @ adapter.weight.T + adapter.bias
    norms = np.linalg.norm(z, axis=1)
    bad = np.nonzero(norms == 0.0)[0]
    if bad.size:
        raise EngineError("DegenerateProjection", f"adapter mapped {what} row {int(bad[0])} exactly to zero")
    return z / norms[:, None]


@dataclass(frozen=True)
class Triplet:
    """Anchor/positive/negative raw embedding rows with their provenance.

    The sampler guarantees anchor and positive share an instance and differ,
    and that the negative comes from another instance or the distractor pool.
    """

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_index: int = -1
    positive_index: int = -1
    negative_index: int = -1
    negative_is_distractor: bool = False


@dataclass(frozen=True)
class TripletConfig:
    """Training hyperparameters (margin loss, Adam, mining)."""

    margin: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 0.5
    batch_size: int = 100
    epochs: int = 10
    distractors_per_batch: int = 100
    seed: int = 0
    loss: str = "triplet"  # triplet | contrastive | ce
    # Decay of 0.5 applied inside the Adam moments swamps the loss signal at
    # this learning rate and freezes all relative parameter structure, so the
    # decoupled form is the default; the coupled classic form stays available.
    decoupled_weight_decay: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise EngineError("BadConfig", f"batch_size must be >= 2, got {self.batch_size}")
        if self.margin < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise EngineError("BadConfig", "margin and weight_decay must be >= 0 and lr > 0")
        if self.epochs < 0 or self.distractors_per_batch < 0:
            raise EngineError("BadConfig", "epochs and distractors_per_batch must be >= 0")
        if self.loss not in ("triplet", "contrastive", "ce"):
            raise EngineError("BadConfig", f"unknown loss {self.loss!r}")


def _normalize_backward(z: np.ndarray, f: np.ndarray, grad_f: np.ndarray) -> np.ndarray:
    # d/dz of f = z/|z| applied to an upstream gradient: (g - f (f.g)) / |z|
    return (grad_f - f * float(f @ grad_f)) / float(np.linalg.norm(z))


def _affine_forward(adapter: Adapter, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = adapter.weight @ x + adapter.bias
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise EngineError("DegenerateProjection", "adapter mapped the input exactly to zero")
    return z, z / norm


def triplet_loss(adapter: Adapter, t: Triplet, margin: float) -> float:
    """Hinge of d(f(a), f(p)) - d(f(a), f(n)) + margin, with cosine distance."""
    f_a = forward(adapter, t.anchor)
    f_p = forward(adapter, t.positive)
    f_n = forward(adapter, t.negative)
    pre = float(f_a @ f_n) - float(f_a @ f_p) + margin
    return max(0.0, pre)


def _triplet_grad(
    adapter: Adapter, t: Triplet, margin: float
) -> tuple[float, np.ndarray, np.ndarray, bool]:
    x_a = np.asarray(t.anchor, dtype=np.float64)
    x_p = np.asarray(t.positive, dtype=np.float64)
    x_n = np.asarray(t.negative, dtype=np.float64)
    z_a, f_a = _affine_forward(adapter, x_a)
    z_p, f_p = _affine_forward(adapter, x_p)
    z_n, f_n = _affine_forward(adapter, x_n)
    pre = float(f_a @ f_n) - float(f_a @ f_p) + margin
    if pre <= 0.0:
        # Inactive hinge: subgradient taken as zero.
        zero_w = np.zeros_like(adapter.weight)
        zero_b = np.zeros_like(adapter.bias)
        return 0.0, zero_w, zero_b, False
    g_za = _normalize_backward(z_a, f_a, f_n - f_p)
    g_zp = _normalize_backward(z_p, f_p, -f_a)
    g_zn = _normalize_backward(z_n, f_n, f_a)
    d_w = np.outer(g_za, x_a) + np.outer(g_zp, x_p) + np.outer(g_zn, x_n)
    d_b = g_za + g_zp + g_zn
    return pre, d_w, d_b, True


def loss_gradient(
    adapter: Adapter, batch: list[Triplet], margin: float
) -> tuple[np.ndarray, np.ndarray]:
    """Mean analytic gradient of the triplet loss over a batch."""
    if not batch:
        raise EngineError("EmptyBatch", "loss_gradient needs at least one triplet")
    d_w = np.zeros_like(adapter.weight)
    d_b = np.zeros_like(adapter.bias)
    for t in batch:
        _, g_w, g_b, _ = _triplet_grad(adapter, t, margin)
        d_w += g_w
        d_b += g_b
    return d_w / len(batch), d_b / len(batch)


def contrastive_loss(
    adapter: Adapter, x: np.ndarray, y: np.ndarray, positive: bool, margin: float
) -> float:
    """Pairwise margin loss: d^2 for positives, hinge(margin - d)^2 for negatives."""
    d = 1.0 - float(forward(adapter, x) @ forward(adapter, y))
    if positive:
        return d * d
    gap = margin - d
    return gap * gap if gap > 0 else 0.0


def _contrastive_grad(
    adapter: Adapter, x: np.ndarray, y: np.ndarray, positive: bool, margin: float
) -> tuple[float, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z_x, f_x = _affine_forward(adapter, x)
    z_y, f_y = _affine_forward(adapter, y)
    d = 1.0 - float(f_x @ f_y)
    if positive:
        loss, dloss_dd = d * d, 2.0 * d
    else:
        gap = margin - d
        if gap <= 0:
            return 0.0, np.zeros_like(adapter.weight), np.zeros_like(adapter.bias)
        loss, dloss_dd = gap * gap, -2.0 * gap
    g_zx = _normalize_backward(z_x, f_x, -dloss_dd * f_y)
    g_zy = _normalize_backward(z_y, f_y, -dloss_dd * f_x)
    d_w = np.outer(g_zx, x) + np.outer(g_zy, y)
    d_b = g_zx + g_zy
    return loss, d_w, d_b


def ce_loss(adapter: Adapter, head: np.ndarray, x: np.ndarray, label: int) -> float:
    """Softmax cross-entropy over instance classes via a linear head."""
    head = np.asarray(head, dtype=np.float64)
    if not 0 <= label < head.shape[0]:
        raise EngineError("BadConfig", f"label {label} out of range for {head.shape[0]} classes")
    logits = head @ forward(adapter, x)
    m = float(logits.max())
    return m + float(np.log(np.sum(np.exp(logits - m)))) - float(logits[label])


def _ce_grad(
    adapter: Adapter, head: np.ndarray, x: np.ndarray, label: int
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    head = np.asarray(head, dtype=np.float64)
    z, f = _affine_forward(adapter, x)
    logits = head @ f
    m = float(logits.max())
    exp = np.exp(logits - m)
    softmax = exp / exp.sum()
    loss = m + float(np.log(exp.sum())) - float(logits[label])
    d_logits = softmax.copy()
    d_logits[label] -= 1.0
    d_head = np.outer(d_logits, f)
    g_z = _normalize_backward(z, f, head.T @ d_logits)
    return loss, np.outer(g_z, x), g_z, d_head


def hard_negative(adapter: Adapter, anchor: np.ndarray, candidates: np.ndarray) -> int:
    """Index of the candidate closest (cosine distance) to the anchor post-adapter.

    Ties break toward the lowest candidate index.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise EngineError("EmptyCandidates", "hard-negative mining needs a non-empty candidate set")
    f_a = forward(adapter, anchor)
    feats = forward_rows(adapter, candidates, what="candidate")
    distances = 1.0 - feats @ f_a
    return int(np.argmin(distances))


class Adam:
    """Adam with classic (coupled) L2 weight decay; decoupled optional.

    Updates the given parameter arrays in place. With zero gradient and zero
    weight decay a step leaves parameters unchanged.
    """

    def __init__(
        self,
        params: list[np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = False,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise EngineError("BadShape", "gradient list does not match parameter list")
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.weight_decay * p
            p -= self.lr * update


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    active_fraction: float


@dataclass
class TrainResult:
    adapter: Adapter
    trace: list[EpochStats] = field(default_factory=list)


def write_loss_trace(trace: list[EpochStats], path) -> None:
    lines = ["epoch,mean_loss,active_triplet_fraction"]
    for row in trace:
        lines.append(f"{row.epoch},{row.mean_loss:.10g},{row.active_fraction:.10g}")
    with atomic_output(path) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")


def mean_triplet_loss(adapter: Adapter, triplets: list[Triplet], margin: float) -> float:
    if not triplets:
        raise EngineError("EmptyBatch", "cannot average over zero triplets")
    return sum(triplet_loss(adapter, t, margin) for t in triplets) / len(triplets)


def _chunks(seq: np.ndarray, size: int):
    for start in range(0, len(seq), size):
        yield seq[start : start + size]


def train(
    manifest: "DatasetManifest",
    pool: DistractorPool | None,
    config: TripletConfig,
    aug: "AugmentationConfig",
) -> TrainResult:
    """Adapt the embedding map on the manifest's references.

    One epoch is a shuffled pass in which every eligible selected reference
    serves as anchor once; the positive is a uniform same-instance draw and
    the negative is the hardest candidate among other-instance batch members
    plus a fresh per-batch distractor sample. Deterministic given the seed.
    """
    from .augment import select_references

    selected = select_references(manifest, aug, "train")
    rows = np.array([r.row for r in selected], dtype=np.intp)
    labels = np.array([r.instance for r in selected], dtype=np.intp)
    inputs = manifest.reference_matrix[rows].astype(np.float64)

    by_instance: dict[int, list[int]] = {}
    for i, lab in enumerate(labels.tolist()):
        by_instance.setdefault(lab, []).append(i)
    rich = {lab for lab, idxs in by_instance.items() if len(idxs) >= 2}
    if len(rich) < 2:
        raise EngineError(
            "InsufficientReferences",
            "training needs at least 2 instances with at least 2 references each",
        )

    if config.loss == "ce":
        anchors = np.arange(len(selected), dtype=np.intp)
    else:
        anchors = np.array([i for i in range(len(selected)) if labels[i] in rich], dtype=np.intp)

    pool_rows = (
        np.asarray(pool.embeddings, dtype=np.float64)
        if pool is not None and len(pool) > 0
        else np.zeros((0, manifest.dim))
    )

    rng = np.random.default_rng(config.seed)
    adapter = init_adapter(manifest.dim, rng)
    params = [adapter.weight, adapter.bias]
    head = None
    classes: list[int] = []
    if config.loss == "ce":
        classes = sorted(by_instance)
        head = 0.01 * rng.standard_normal((len(classes), adapter.out_dim))
        params.append(head)
    class_index = {lab: k for k, lab in enumerate(classes)}
    optimizer = Adam(
        params,
        lr=config.lr,
        weight_decay=config.weight_decay,
        decoupled=config.decoupled_weight_decay,
    )

    trace: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(anchors)
        epoch_losses: list[float] = []
        epoch_active = 0
        for batch in _chunks(order, config.batch_size):
            n_dist = min(config.distractors_per_batch, pool_rows.shape[0])
            if n_dist > 0:
                picked = rng.choice(pool_rows.shape[0], size=n_dist, replace=False)
                distractors = pool_rows[picked]
            else:
                distractors = np.zeros((0, manifest.dim))

            grad_w = np.zeros_like(adapter.weight)
            grad_b = np.zeros_like(adapter.bias)
            grad_head = np.zeros_like(head) if head is not None else None
            formed = 0
            batch_list = batch.tolist()
            batch_losses: list[float] = []
            for i in batch_list:
                if config.loss == "ce":
                    loss, g_w, g_b, g_h = _ce_grad(adapter, head, inputs[i], class_index[labels[i]])
                    grad_w += g_w
                    grad_b += g_b
                    grad_head += g_h
                    formed += 1
                    batch_losses.append(loss)
                    epoch_active += int(loss > 0)
                    continue

                mates = [j for j in by_instance[labels[i]] if j != i]
                j = int(rng.choice(mates)) if len(mates) > 1 else mates[0]
                others = [k for k in batch_list if labels[k] != labels[i]]
                if not others and distractors.shape[0] == 0:
                    continue  # no admissible negative in this batch
                candidates = (
                    np.concatenate([inputs[others], distractors], axis=0)
                    if others
                    else distractors
                )
                hn = hard_negative(adapter, inputs[i], candidates)
                negative = candidates[hn]
                if config.loss == "contrastive":
                    lp, gw_p, gb_p = _contrastive_grad(adapter, inputs[i], inputs[j], True, config.margin)
                    ln, gw_n, gb_n = _contrastive_grad(adapter, inputs[i], negative, False, config.margin)
                    loss = lp + ln
                    grad_w += gw_p + gw_n
                    grad_b += gb_p + gb_n
                    active = loss > 0
                else:
                    t = Triplet(
                        anchor=inputs[i],
                        positive=inputs[j],
                        negative=negative,
                        anchor_index=i,
                        positive_index=j,
                        negative_is_distractor=hn >= len(others),
                    )
                    loss, g_w, g_b, active = _triplet_grad(adapter, t, config.margin)
                    grad_w += g_w
                    grad_b += g_b
                formed += 1
                batch_losses.append(loss)
                epoch_active += int(active)

            epoch_losses.extend(batch_losses)
            if formed == 0:
                continue
            # abort on NaN/Inf before it can reach the parameters
            if not np.isfinite(sum(batch_losses)):
                raise EngineError(
                    "NonFiniteLoss",
                    f"epoch {epoch} produced a non-finite batch loss; check hyperparameters",
                )
            grads = [grad_w / formed, grad_b / formed]
            if grad_head is not None:
                grads.append(grad_head / formed)
            optimizer.step(grads)

        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        trace.append(
            EpochStats(
                epoch=epoch,
                mean_loss=mean_loss,
                active_fraction=(epoch_active / len(epoch_losses)) if epoch_losses else 0.0,
            )
        )

    return TrainResult(adapter=adapter, trace=trace)
