"""Dense targets for the detection and relation heads, and their decoders.

Coordinates on the feature grid use cell units with cell ``(row, col)``
centred at ``((col + 0.5) * R, (row + 0.5) * R)`` in input pixels, where ``R``
is the feature stride. Relation fields are ``[P, 7, Hf, Wf]`` with per-cell
channels ``[alpha, x_obj, y_obj, x_subj, y_subj, s_subj, s_obj]``; the four
coordinate channels hold displacements from the writing cell to the subject
and object centre cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenes.graph import SceneGraph

ALPHA, X_OBJ, Y_OBJ, X_SUBJ, Y_SUBJ, S_SUBJ, S_OBJ = range(7)


@dataclass
class ObjectTargets:
    heatmap: np.ndarray  # [C, Hf, Wf]
    size: np.ndarray  # [2, Hf, Wf], (w, h) in cells
    center_mask: np.ndarray  # [Hf, Wf]
    stride: int
    collisions: int = 0


@dataclass
class RelationTargets:
    field: np.ndarray  # [P, 7, Hf, Wf]
    support: np.ndarray  # [P, Hf, Wf]
    stride: int
    collisions: int = 0


@dataclass
class Detection:
    class_id: int
    score: float
    bbox: tuple[float, float, float, float]
    center: tuple[float, float]  # (x, y) in feature cells


@dataclass
class TripletPrediction:
    subj: int  # index into the detection list
    pred: int
    obj: int
    score: float
    alpha: float


@dataclass
class ImagePrediction:
    id: str
    detections: list[Detection] = field(default_factory=list)
    triplets: list[TripletPrediction] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "detections": [{"class": d.class_id, "bbox": [float(v) for v in d.bbox], "score": float(d.score)} for d in self.detections],
            "triplets": [{"subj": t.subj, "pred": t.pred, "obj": t.obj, "score": float(t.score)} for t in self.triplets],
        }

    @classmethod
    def from_json(cls, d: dict, stride: int = 4) -> "ImagePrediction":
        dets = []
        for e in d["detections"]:
            bbox = tuple(float(v) for v in e["bbox"])
            dets.append(Detection(int(e["class"]), float(e["score"]), bbox, box_center_cells(bbox, stride)))
        trips = []
        for t in d["triplets"]:
            s, o = int(t["subj"]), int(t["obj"])
            if not (0 <= s < len(dets) and 0 <= o < len(dets)):
                raise ValueError(f"triplet references missing detection: {t}")
            denom = dets[s].score * dets[o].score
            trips.append(TripletPrediction(s, int(t["pred"]), o, float(t["score"]), float(t["score"]) / denom if denom else 0.0))
        return cls(str(d["id"]), dets, trips)


def box_center_cells(bbox, stride: int) -> tuple[float, float]:
    x, y, w, h = bbox
    return (x + w / 2.0) / stride - 0.5, (y + h / 2.0) / stride - 0.5


def center_cell(bbox, stride: int, grid: tuple[int, int]) -> tuple[int, int]:
    """(row, col) of the cell containing the box centre."""
    x, y, w, h = bbox
    row = int(math.floor((y + h / 2.0) / stride))
    col = int(math.floor((x + w / 2.0) / stride))
    return min(max(row, 0), grid[0] - 1), min(max(col, 0), grid[1] - 1)


def gaussian_sigma(bbox, stride: int) -> float:
    return max(0.8, min(bbox[2], bbox[3]) / (6.0 * stride))


def _grid(dims: tuple[int, int], stride: int) -> tuple[int, int]:
    H, W = dims
    if H % stride or W % stride:
        raise ValueError(f"image dims {dims} not divisible by stride {stride}")
    return H // stride, W // stride


def encode_objects(graph: SceneGraph, dims: tuple[int, int], stride: int, num_classes: int) -> ObjectTargets:
    hf, wf = _grid(dims, stride)
    heat = np.zeros((num_classes, hf, wf))
    size = np.zeros((2, hf, wf))
    mask = np.zeros((hf, wf))
    owner_area = np.zeros((hf, wf))
    rows = np.arange(hf)[:, None]
    cols = np.arange(wf)[None, :]
    collisions = 0
    for obj in graph.objects:
        x, y, w, h = obj.bbox
        if x < 0 or y < 0 or x + w > dims[1] + 1e-9 or y + h > dims[0] + 1e-9:
            raise ValueError(f"box {obj.bbox} outside image {dims}")
        r, c = center_cell(obj.bbox, stride, (hf, wf))
        sigma = gaussian_sigma(obj.bbox, stride)
        g = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma * sigma))
        np.maximum(heat[obj.cls], g, out=heat[obj.cls])
        area = w * h
        if mask[r, c]:
            collisions += 1
            if area <= owner_area[r, c]:
                continue
        size[:, r, c] = (w / stride, h / stride)
        mask[r, c] = 1.0
        owner_area[r, c] = area
    return ObjectTargets(heat, size, mask, stride, collisions)


def local_peaks(score: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3 local maxima of a 2-D map.

    Plateaus resolve to their first cell in (row, col) order: a cell must be
    strictly above earlier neighbours and at least equal to later ones.
    """
    H, W = score.shape
    padded = np.pad(score, 1, constant_values=-np.inf)
    peak = np.ones_like(score, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W]
            if (dr, dc) < (0, 0):
                peak &= score > nb
            else:
                peak &= score >= nb
    return peak


def decode_objects(h: np.ndarray, s: np.ndarray, stride: int, top_n: int = 100, score_threshold: float = 0.1) -> list[Detection]:
    cands = []
    for c in range(h.shape[0]):
        pk = local_peaks(h[c]) & (h[c] >= score_threshold) & (h[c] > 0)
        for r, col in zip(*np.nonzero(pk)):
            cands.append((-float(h[c, r, col]), int(r), int(col), c))
    cands.sort()
    dets = []
    for neg, r, col, c in cands[:top_n]:
        w = max(float(s[0, r, col]) * stride, 1.0)
        hh = max(float(s[1, r, col]) * stride, 1.0)
        cx, cy = (col + 0.5) * stride, (r + 0.5) * stride
        dets.append(Detection(c, -neg, (cx - w / 2, cy - hh / 2, w, hh), (float(col), float(r))))
    return dets


def encode_relations(
    graph: SceneGraph,
    dims: tuple[int, int],
    stride: int,
    num_predicates: int,
    radius: float = 2.0,
    sigma: float = 1.0,
) -> RelationTargets:
    hf, wf = _grid(dims, stride)
    fld = np.zeros((num_predicates, 7, hf, wf))
    support = np.zeros((num_predicates, hf, wf))
    rows, cols = np.mgrid[:hf, :wf]
    centers = [center_cell(o.bbox, stride, (hf, wf)) for o in graph.objects]
    scales = [o.min_side / (9.0 * stride) for o in graph.objects]
    midpoints: set[tuple[int, int, int]] = set()
    collisions = 0
    for rel in graph.relations:
        (rs, cs), (ro, co) = centers[rel.subj], centers[rel.obj]
        mr, mc = (rs + ro) // 2, (cs + co) // 2
        if (rel.pred, mr, mc) in midpoints:
            collisions += 1
        midpoints.add((rel.pred, mr, mc))
        d2 = (rows - mr) ** 2 + (cols - mc) ** 2
        alpha = np.where(d2 <= radius * radius, np.exp(-d2 / (2 * sigma * sigma)), 0.0)
        win = alpha > fld[rel.pred, ALPHA]
        p = rel.pred
        fld[p, ALPHA][win] = alpha[win]
        fld[p, X_OBJ][win] = (co - cols)[win]
        fld[p, Y_OBJ][win] = (ro - rows)[win]
        fld[p, X_SUBJ][win] = (cs - cols)[win]
        fld[p, Y_SUBJ][win] = (rs - rows)[win]
        fld[p, S_SUBJ][win] = scales[rel.subj]
        fld[p, S_OBJ][win] = scales[rel.obj]
        support[p][win] = 1.0
    return RelationTargets(fld, support, stride, collisions)


def decode_relations(
    r: np.ndarray,
    detections: list[Detection],
    top_k: int = 100,
    tau: float = 1.0,
    alpha_threshold: float = 0.05,
    stats: dict | None = None,
) -> list[TripletPrediction]:
    """Ranked triplets from a relation field.

    Each confidence peak names a subject and object point; each is snapped to
    the nearest detection centre, accepted only within ``tau`` times the
    decoded minimum side (``9 * s``). Duplicate (subj, pred, obj) keep their
    best score.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not detections:
        return []
    centers = np.array([d.center for d in detections])
    best: dict[tuple[int, int, int], TripletPrediction] = {}
    dropped = 0
    for p in range(r.shape[0]):
        a = r[p, ALPHA]
        pk = local_peaks(a) & (a >= alpha_threshold) & (a > 0)
        for row, col in zip(*np.nonzero(pk)):
            alpha = float(a[row, col])
            ends = []
            for xc, yc, sc in ((X_SUBJ, Y_SUBJ, S_SUBJ), (X_OBJ, Y_OBJ, S_OBJ)):
                pt = np.array([col + r[p, xc, row, col], row + r[p, yc, row, col]])
                dist = np.hypot(*(centers - pt).T)
                j = int(np.argmin(dist))
                ends.append(j if dist[j] <= tau * 9.0 * r[p, sc, row, col] else None)
            si, oi = ends
            if si is None or oi is None:
                dropped += 1
                continue
            if si == oi:
                continue
            score = alpha * detections[si].score * detections[oi].score
            key = (si, p, oi)
            if key not in best or score > best[key].score:
                best[key] = TripletPrediction(si, p, oi, score, alpha)
    if stats is not None:
        stats["dropped"] = stats.get("dropped", 0) + dropped
    out = sorted(best.values(), key=lambda t: -t.score)
    return out[:top_k]


def apply_graph_constraint(triplets: list[TripletPrediction]) -> list[TripletPrediction]:
    """Keep only the best-scored predicate per ordered (subject, object) pair."""
    keep: dict[tuple[int, int], int] = {}
    for i, t in enumerate(triplets):
        k = (t.subj, t.obj)
        if k not in keep or t.score > triplets[keep[k]].score:
            keep[k] = i
    chosen = set(keep.values())
    return [t for i, t in enumerate(triplets) if i in chosen]


def gt_detections(graph: SceneGraph, stride: int) -> list[Detection]:
    """Ground-truth objects as score-1 detections."""
    return [Detection(o.cls, 1.0, tuple(o.bbox), box_center_cells(o.bbox, stride)) for o in graph.objects]
