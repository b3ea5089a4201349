"""Scene-graph metrics: triplet recall (graph-constrained or not), mean and
zero-shot recall, and box AP at IoU 0.5."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from ..fields import Detection, ImagePrediction, TripletPrediction, apply_graph_constraint
from ..scenes.graph import SceneGraph

IOU_THRESHOLD = 0.5


class EvalTask(str, Enum):
    PREDCLS = "PredCls"
    SGCLS = "SGCls"
    SGDET = "SGDet"


TASKS = (EvalTask.PREDCLS, EvalTask.SGCLS, EvalTask.SGDET)


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class ImageResult:
    """Ranked predictions for one image next to its ground truth."""

    gt: SceneGraph
    pred: ImagePrediction


def triplet_matches(t: TripletPrediction, dets: Sequence[Detection], gt: SceneGraph, g: int) -> bool:
    r = gt.relations[g]
    s, o = dets[t.subj], dets[t.obj]
    gs, go = gt.objects[r.subj], gt.objects[r.obj]
    return (
        t.pred == r.pred
        and s.class_id == gs.cls
        and o.class_id == go.cls
        and iou(s.bbox, gs.bbox) >= IOU_THRESHOLD
        and iou(o.bbox, go.bbox) >= IOU_THRESHOLD
    )


def match_triplets(
    triplets: Sequence[TripletPrediction],
    dets: Sequence[Detection],
    gt: SceneGraph,
    k: int,
    gt_subset: Iterable[int] | None = None,
) -> set[int]:
    """Greedy first-come matching of the top-``k`` ranked triplets to GT relation indices.

    Every task requires class, predicate and IoU >= 0.5 on both boxes; in
    PredCls and SGCls the boxes are the GT boxes so the IoU test always passes.
    """
    pool = list(range(len(gt.relations))) if gt_subset is None else sorted(gt_subset)
    matched: set[int] = set()
    for t in triplets[:k]:
        for g in pool:
            if g not in matched and triplet_matches(t, dets, gt, g):
                matched.add(g)
                break
    return matched


def _exact_mean(ratios: Sequence[tuple[int, int]]) -> float:
    """Mean of m/n pairs in exact arithmetic, rounded once."""
    return float(sum(Fraction(m, n) for m, n in ratios) / len(ratios))


def _ranked(pred: ImagePrediction, k: int, graph_constraint: bool) -> list[TripletPrediction]:
    """The top-``k`` triplets, filtered to one predicate per pair when constrained.

    Filtering inside the top k keeps the constrained list a subset of the
    unconstrained one, so constrained recall can never be the larger.
    """
    top = list(pred.triplets[:k])
    return apply_graph_constraint(top) if graph_constraint else top


def _per_image(results: Sequence[ImageResult], k: int, graph_constraint: bool, select) -> list[tuple[int, int]]:
    """(matched, counted) per image over the GT indices chosen by ``select(gt)``."""
    out = []
    for res in results:
        subset = select(res.gt)
        if not subset:
            continue
        m = match_triplets(_ranked(res.pred, k, graph_constraint), res.pred.detections, res.gt, k, subset)
        out.append((len(m), len(subset)))
    return out


def recall_at_k(results: Sequence[ImageResult], k: int, graph_constraint: bool = True) -> float:
    """Mean over images (with at least one GT triple) of matched / |GT|."""
    if not results:
        raise ValueError("recall over an empty dataset")
    rows = _per_image(results, k, graph_constraint, lambda gt: list(range(len(gt.relations))))
    if not rows:
        raise ValueError("no image has a ground-truth relation")
    return _exact_mean(rows)


def mean_recall(results: Sequence[ImageResult], k: int, graph_constraint: bool = True, num_predicates: int | None = None) -> float:
    """Per-predicate recall pooled over the dataset, averaged over predicates that occur."""
    if not results:
        raise ValueError("recall over an empty dataset")
    hit: dict[int, int] = {}
    tot: dict[int, int] = {}
    for res in results:
        if not res.gt.relations:
            continue
        m = match_triplets(_ranked(res.pred, k, graph_constraint), res.pred.detections, res.gt, k)
        for g, r in enumerate(res.gt.relations):
            tot[r.pred] = tot.get(r.pred, 0) + 1
            hit[r.pred] = hit.get(r.pred, 0) + (g in m)
    if not tot:
        raise ValueError("no image has a ground-truth relation")
    return _exact_mean([(hit[p], tot[p]) for p in sorted(tot)])


def zero_shot_recall(
    results: Sequence[ImageResult], inventory: set[tuple[int, int, int]], k: int, graph_constraint: bool = True
) -> float | None:
    """Recall over GT triples whose class-level type never occurs in training; ``None`` if there are none."""
    if not results:
        raise ValueError("recall over an empty dataset")

    def novel(gt: SceneGraph) -> list[int]:
        return [g for g, r in enumerate(gt.relations) if (gt.objects[r.subj].cls, r.pred, gt.objects[r.obj].cls) not in inventory]

    rows = _per_image(results, k, graph_constraint, novel)
    if not rows:
        return None
    return _exact_mean(rows)


def interpolated_ap(tp: np.ndarray, n_gt: int, points: int = 101) -> float:
    """Area under the interpolated precision/recall curve sampled at ``points`` recall levels."""
    if n_gt == 0:
        raise ValueError("AP needs at least one ground-truth box")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    # i / (points - 1) is correctly rounded, so recall levels equal to k/n compare exactly
    for r in np.arange(points) / (points - 1):
        idx = np.searchsorted(recall, r, side="left")
        total += env[idx] if idx < len(env) else 0.0
    return float(total / points)


def ap50(detections: Sequence[Sequence[Detection]], gts: Sequence[SceneGraph]) -> float:
    """Mean over classes with GT of the 101-point AP at IoU >= 0.5."""
    if len(detections) != len(gts):
        raise ValueError("one detection list per image is required")
    classes = sorted({o.cls for g in gts for o in g.objects})
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        n_gt = sum(1 for g in gts for o in g.objects if o.cls == c)
        pooled = [(d.score, i, j) for i, ds in enumerate(detections) for j, d in enumerate(ds) if d.class_id == c]
        pooled.sort(key=lambda x: -x[0])  # stable: image then detection order on ties
        used = [set() for _ in gts]
        tp = np.zeros(len(pooled))
        for n, (_, i, j) in enumerate(pooled):
            box = detections[i][j].bbox
            best, best_g = IOU_THRESHOLD, None
            for g, o in enumerate(gts[i].objects):
                if o.cls != c or g in used[i]:
                    continue
                v = iou(box, o.bbox)
                if v >= best and (best_g is None or v > best):
                    best, best_g = v, g
            if best_g is not None:
                used[i].add(best_g)
                tp[n] = 1.0
        aps.append(interpolated_ap(tp, n_gt))
    return float(np.mean(aps))
