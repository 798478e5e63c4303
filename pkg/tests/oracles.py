"""Independent brute-force oracles.

Each oracle is a deliberately simple, slow reimplementation used to verify
the optimized code paths. They share no code with the package: plain Python
loops, explicit enumeration, and finite differences only.
"""

from __future__ import annotations

import itertools
import math


# ---------------------------------------------------------------- geometry


def brute_cosine_distance(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return 1.0 - dot / (nu * nv)


def brute_iou(a, b):
    """IoU of two (x, y, w, h) tuples."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


# ----------------------------------------------------------- stable matching


def _prefers(similarity, p, r, over_p):
    """Does reference r prefer proposal p over proposal over_p (ties: lower index)?"""
    if over_p is None:
        return True
    a, b = similarity[p][r], similarity[over_p][r]
    return a > b or (a == b and p < over_p)


def _proposal_prefers(similarity, p, r, over_r):
    if over_r is None:
        return True
    a, b = similarity[p][r], similarity[p][over_r]
    return a > b or (a == b and r < over_r)


def blocking_pairs(similarity, assignment):
    """All (p, r) pairs that mutually prefer each other over their partners."""
    n = len(similarity)
    m = len(similarity[0]) if n else 0
    partner_of_ref = {r: p for p, r in assignment.items()}
    pairs = []
    for p in range(n):
        for r in range(m):
            if assignment.get(p) == r:
                continue
            if _proposal_prefers(similarity, p, r, assignment.get(p)) and _prefers(
                similarity, p, r, partner_of_ref.get(r)
            ):
                pairs.append((p, r))
    return pairs


def all_stable_matchings(similarity):
    """Every stable one-to-one assignment, by exhaustive enumeration.

    With universal acceptability a stable matching saturates the smaller
    side, so only those assignments need checking.
    """
    n = len(similarity)
    m = len(similarity[0]) if n else 0
    stable = []
    if n == 0 or m == 0:
        return [{}]
    if n <= m:
        for refs in itertools.permutations(range(m), n):
            assignment = dict(enumerate(refs))
            if not blocking_pairs(similarity, assignment):
                stable.append(assignment)
    else:
        for props in itertools.permutations(range(n), m):
            assignment = {p: r for r, p in enumerate(props)}
            if not blocking_pairs(similarity, assignment):
                stable.append(assignment)
    return stable


def brute_proposer_optimal(similarity):
    """The stable matching every proposal weakly prefers (unique by lattice)."""

    def weakly_prefers(p, r, over_r):
        if r == over_r:
            return True
        if r is None:
            return False  # being unmatched is worst
        return _proposal_prefers(similarity, p, r, over_r)

    def dominates(a, b):
        return all(weakly_prefers(p, a.get(p), b.get(p)) for p in set(a) | set(b))

    candidates = all_stable_matchings(similarity)
    assert candidates, "a stable matching always exists"
    for cand in candidates:
        if all(dominates(cand, other) for other in candidates):
            return cand
    raise AssertionError("no proposer-optimal stable matching found")


# ------------------------------------------------------------- detection AP


def brute_greedy_match(det_boxes, gt_boxes, iou_t):
    """TP/FP labels by searching all valid one-to-one assignments and keeping
    the one that maximizes the greedy order (higher IoU first per detection,
    ties to the lower ground-truth index)."""
    n, m = len(det_boxes), len(gt_boxes)
    best_sig, best_labels = None, [False] * n

    def signatures(assignment):
        sig = []
        for k in range(n):
            g = assignment.get(k)
            if g is None:
                sig.append((0, 0.0, 0))
            else:
                sig.append((1, brute_iou(det_boxes[k], gt_boxes[g]), -g))
        return tuple(sig)

    gt_indices = list(range(m))
    for size in range(min(n, m) + 1):
        for det_subset in itertools.combinations(range(n), size):
            for gt_perm in itertools.permutations(gt_indices, size):
                assignment = dict(zip(det_subset, gt_perm))
                if any(brute_iou(det_boxes[k], gt_boxes[g]) < iou_t for k, g in assignment.items()):
                    continue
                sig = signatures(assignment)
                if best_sig is None or sig > best_sig:
                    best_sig = sig
                    best_labels = [k in assignment for k in range(n)]
    return best_labels


def brute_average_precision(labels, n_gt):
    """101-point interpolated AP via direct enumeration of the grid."""
    if n_gt == 0:
        return 0.0 if labels else None
    points = []
    tp = 0
    for k, label in enumerate(labels, start=1):
        tp += 1 if label else 0
        points.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(101):
        r = i / 100.0
        best = 0.0
        for recall, precision in points:
            if recall >= r and precision > best:
                best = precision
        total += best
    return total / 101.0


def brute_evaluate(detections, ground_truth, instances, iou_thresholds):
    """Mean AP over instances and thresholds for a tiny world.

    detections: list of (scene, instance, box, score); ground_truth: list of
    (scene, instance, box). Ties in score break on (scene, box) to mirror the
    engine's deterministic ordering. Returns (ap_per_threshold, mean).
    """
    per_threshold = []
    for iou_t in iou_thresholds:
        values = []
        for inst in instances:
            dets = sorted(
                [d for d in detections if d[1] == inst],
                key=lambda d: (-d[3], d[0], d[2][0], d[2][1], d[2][2], d[2][3]),
            )
            gts = [g for g in ground_truth if g[1] == inst]
            n_gt = len(gts)
            scenes = sorted({d[0] for d in dets} | {g[0] for g in gts})
            labels_by_pos = {}
            for scene in scenes:
                scene_dets = [(i, d) for i, d in enumerate(dets) if d[0] == scene]
                scene_gts = [g[2] for g in gts if g[0] == scene]
                scene_labels = brute_greedy_match([d[2] for _, d in scene_dets], scene_gts, iou_t)
                for (pos, _), lab in zip(scene_dets, scene_labels):
                    labels_by_pos[pos] = lab
            labels = [labels_by_pos[i] for i in range(len(dets))]
            ap = brute_average_precision(labels, n_gt)
            if ap is not None:
                values.append(ap)
        per_threshold.append(sum(values) / len(values) if values else None)
    defined = [v for v in per_threshold if v is not None]
    return per_threshold, (sum(defined) / len(defined) if defined else None)


# ----------------------------------------------------------------- gradient


def finite_difference(loss_fn, arrays, h=1e-5):
    """Central-difference gradients of loss_fn() w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        grad = [0.0] * arr.size
        flat = arr.reshape(-1)
        for i in range(arr.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn()
            flat[i] = keep - h
            down = loss_fn()
            flat[i] = keep
            grad[i] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def brute_hard_negative(weight, bias, anchor, candidates):
    """Exhaustive argmin of post-adapter cosine distance, plain loops."""

    def project(x):
        z = [sum(weight[i][j] * x[j] for j in range(len(x))) + bias[i] for i in range(len(bias))]
        norm = math.sqrt(sum(v * v for v in z))
        return [v / norm for v in z]

    f_a = project(anchor)
    best, best_d = -1, None
    for idx, cand in enumerate(candidates):
        f_c = project(cand)
        d = 1.0 - sum(a * b for a, b in zip(f_a, f_c))
        if best_d is None or d < best_d:
            best, best_d = idx, d
    return best


def brute_distractor_correlation(pool, references):
    """Per-distractor (avg, max) cosine similarity by double loop."""
    stats = []
    for d in pool:
        sims = [1.0 - brute_cosine_distance(d, r) for r in references]
        stats.append((sum(sims) / len(sims), max(sims)))
    return stats
