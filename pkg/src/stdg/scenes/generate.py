"""Synthetic RGB-D scenes whose relations follow from 3-D geometry.

Cuboids of class-specific proportions stand on a floor (or on each other) in
front of a back wall. Depth is ray cast exactly; RGB is flat-shaded with
per-class colours plus Gaussian noise. Every ordered object pair gets the one
predicate its layout implies:

* ``on`` / ``under`` when one box rests on the other's top face;
* otherwise ``in front of`` / ``behind`` when the depth separation dominates
  the lateral one, else ``left of`` / ``right of``.
"""

from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..hha import CameraModel, DepthMap
from .graph import Relation, SceneGraph, SceneObject
from .render import BOX_BASE, BACK_WALL, FLOOR, Box3D, CameraPose, Room, render

log = logging.getLogger(__name__)

PREDICATES = ("in front of", "behind", "left of", "right of", "on", "under")
IN_FRONT, BEHIND, LEFT, RIGHT, ON, UNDER = range(6)

# (width, height, depth) in metres
_BASE_SHAPES = [(0.6, 0.6, 0.6), (0.4, 1.0, 0.4), (0.9, 0.35, 0.6), (0.5, 0.45, 0.9)]

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, *keys: int) -> int:
    """Deterministic child seed: splitmix64 folded over the keys."""
    s = splitmix64(base & _MASK64)
    for k in keys:
        s = splitmix64(s ^ (k & _MASK64))
    return s


def class_shape(c: int) -> tuple[float, float, float]:
    if c < len(_BASE_SHAPES):
        return _BASE_SHAPES[c]
    rng = np.random.default_rng(1000 + c)
    return tuple(float(v) for v in rng.uniform(0.35, 1.0, size=3))


def class_color(c: int, num_classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((c / max(num_classes, 1) + 0.05) % 1.0, 0.75, 0.9))


def class_names(num_classes: int) -> list[str]:
    base = ["cube", "tower", "slab", "crate"]
    return [base[c] if c < len(base) else f"class{c}" for c in range(num_classes)]


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    min_objects: int = 2
    max_objects: int = 4
    num_classes: int = 3
    num_predicates: int = 6
    x_range: tuple[float, float] = (-0.9, 0.9)
    z_range: tuple[float, float] = (2.2, 4.6)
    cam_height: tuple[float, float] = (1.2, 1.5)
    pitch_deg: tuple[float, float] = (8.0, 15.0)
    focal_px: float | None = 96.0
    back_z: float = 6.0
    size_jitter: float = 0.1
    noise: float = 0.02
    stack_prob: float = 0.25
    stride: int = 4
    min_center_sep_cells: float = 3.0
    min_side_px: float = 12.0
    relation_margin: float = 0.15
    footprint_gap: float = 0.1
    embargo: tuple[tuple[int, int, int], ...] = ((0, BEHIND, 1), (2, LEFT, 0))
    max_tries: int = 300
    placement_tries: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_predicates < 2:
            raise ValueError("need at least 2 classes and 2 predicates")
        if self.num_predicates > len(PREDICATES):
            raise ValueError(f"the geometric vocabulary has {len(PREDICATES)} predicates")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("invalid object count range")
        if self.width % self.stride or self.height % self.stride:
            raise ValueError("image dims must be divisible by the stride")

    def camera(self) -> CameraModel:
        return CameraModel.default(self.width, self.height, self.focal_px)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for k in ("x_range", "z_range", "cam_height", "pitch_deg"):
            if k in d:
                d[k] = tuple(d[k])
        if "embargo" in d:
            d["embargo"] = tuple(tuple(int(v) for v in t) for t in d["embargo"])
        return cls(**d)


@dataclass
class Sample:
    id: str
    rgb: np.ndarray  # [3, H, W] in [0, 1]
    depth: DepthMap | None
    graph: SceneGraph
    split: str = "train"
    depth_mode: str | None = "metric"
    camera: CameraModel | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


def relation_rule(a: Box3D, b: Box3D) -> int:
    """Predicate index for the ordered pair (a, b)."""
    if _rests_on(a, b):
        return ON
    if _rests_on(b, a):
        return UNDER
    dx = a.center[0] - b.center[0]
    dz = a.center[2] - b.center[2]
    if abs(dz) > abs(dx):
        return IN_FRONT if dz < 0 else BEHIND
    return LEFT if dx < 0 else RIGHT


def _rests_on(a: Box3D, b: Box3D) -> bool:
    if abs(a.bottom - b.top) > 1e-9:
        return False
    return a.lo[0] < b.hi[0] and b.lo[0] < a.hi[0] and a.lo[2] < b.hi[2] and b.lo[2] < a.hi[2]


def _footprints_clear(a: Box3D, b: Box3D, gap: float) -> bool:
    return a.hi[0] + gap <= b.lo[0] or b.hi[0] + gap <= a.lo[0] or a.hi[2] + gap <= b.lo[2] or b.hi[2] + gap <= a.lo[2]


def _pair_problem(cfg: SceneConfig, a: Box3D, b: Box3D) -> str | None:
    if _rests_on(a, b) or _rests_on(b, a):
        return None
    if not _footprints_clear(a, b, cfg.footprint_gap):
        return "footprint overlap"
    dx = abs(a.center[0] - b.center[0])
    dz = abs(a.center[2] - b.center[2])
    if abs(dx - dz) < cfg.relation_margin:
        return "ambiguous lateral/depth relation"
    return None


def _sample_layout(cfg: SceneConfig, rng: np.random.Generator, n: int, reasons: dict) -> tuple[list[Box3D], list[int]] | None:
    """Place ``n`` boxes one at a time, resampling each up to ``placement_tries`` times."""
    boxes: list[Box3D] = []
    classes: list[int] = []
    supports: set[int] = set()
    for _ in range(n):
        c = int(rng.integers(cfg.num_classes))
        w, h, d = (s * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter)) for s in class_shape(c))
        for _try in range(cfg.placement_tries):
            bases = [i for i in range(len(boxes)) if i not in supports and boxes[i].bottom == 0.0]
            base_i = None
            if bases and rng.random() < cfg.stack_prob:
                base_i = int(rng.choice(bases))
                base = boxes[base_i]
                cx = base.center[0] + rng.uniform(-0.1, 0.1)
                cz = base.center[2] + rng.uniform(-0.1, 0.1)
                y0 = base.top
            else:
                cx = rng.uniform(*cfg.x_range)
                cz = rng.uniform(*cfg.z_range)
                y0 = 0.0
            box = Box3D((cx - w / 2, y0, cz - d / 2), (cx + w / 2, y0 + h, cz + d / 2))
            why = next((p for p in (_pair_problem(cfg, box, b) for b in boxes) if p), None)
            if why is None:
                break
            reasons[why] = reasons.get(why, 0) + 1
        else:
            return None
        if base_i is not None:
            supports.add(base_i)
        boxes.append(box)
        classes.append(c)
    return boxes, classes


def _layout_problem(cfg: SceneConfig, pose: CameraPose, cam: CameraModel, boxes: list[Box3D]) -> str | None:
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            why = _pair_problem(cfg, boxes[i], boxes[j])
            if why:
                return why
    for b in boxes:
        pc = pose.to_camera(b.corners())
        if np.any(pc[:, 2] < 0.1):
            return "box behind camera"
        u, v = cam.project(pc.T)
        if u.min() < 1 or v.min() < 1 or u.max() > cfg.width - 2 or v.max() > cfg.height - 2:
            return "box leaves the frame"
    return None


def _visible_boxes(label: np.ndarray, n: int) -> list[tuple[float, float, float, float] | None]:
    out = []
    for i in range(n):
        ys, xs = np.nonzero(label == BOX_BASE + i)
        if len(ys) == 0:
            out.append(None)
            continue
        x0, y0 = float(xs.min()), float(ys.min())
        out.append((x0, y0, float(xs.max()) + 1 - x0, float(ys.max()) + 1 - y0))
    return out


def _shade(cfg: SceneConfig, label: np.ndarray, normal: np.ndarray, classes: list[int], rng: np.random.Generator) -> np.ndarray:
    H, W = label.shape
    rgb = np.zeros((3, H, W))
    base = np.zeros((3, H, W))
    base[:, label == FLOOR] = np.array([0.45, 0.45, 0.45])[:, None]
    base[:, (label >= BACK_WALL) & (label < BOX_BASE)] = np.array([0.72, 0.70, 0.66])[:, None]
    for i, c in enumerate(classes):
        base[:, label == BOX_BASE + i] = class_color(c, cfg.num_classes)[:, None]
    light = np.array([-0.35, 0.8, -0.5])
    light /= np.linalg.norm(light)
    lambert = np.clip(np.einsum("c,chw->hw", light, normal), 0.0, 1.0)
    rgb = base * (0.55 + 0.45 * lambert)
    if cfg.noise > 0:
        rgb = rgb + rng.normal(0.0, cfg.noise, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def _relations(cfg: SceneConfig, boxes: list[Box3D]) -> list[Relation]:
    rels = []
    for i in range(len(boxes)):
        for j in range(len(boxes)):
            if i != j:
                p = relation_rule(boxes[i], boxes[j])
                if p < cfg.num_predicates:
                    rels.append(Relation(i, p, j))
    return rels


def _cell(bbox, stride: int) -> tuple[float, float]:
    x, y, w, h = bbox
    return math.floor((y + h / 2) / stride), math.floor((x + w / 2) / stride)


def _graph_problem(cfg: SceneConfig, bboxes, rels: list[Relation]) -> str | None:
    cells = [_cell(b, cfg.stride) for b in bboxes]
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            if math.dist(cells[i], cells[j]) < cfg.min_center_sep_cells:
                return "object centres too close"
    mids: dict[int, list[tuple[int, int, frozenset]]] = {}
    for r in rels:
        (ra, ca), (rb, cb) = cells[r.subj], cells[r.obj]
        m = ((ra + rb) // 2, (ca + cb) // 2)
        pair = frozenset((r.subj, r.obj))
        for other_m, other_pair in [(x[:2], x[2]) for x in mids.get(r.pred, [])]:
            if other_pair != pair and max(abs(m[0] - other_m[0]), abs(m[1] - other_m[1])) < 2:
                return "relation anchors collide"
        mids.setdefault(r.pred, []).append((m[0], m[1], pair))
    return None


def generate_scene(config: SceneConfig, sample_seed: int, split: str = "train", sample_id: str | None = None) -> Sample:
    """One deterministic sample; falls back to fewer objects if placement keeps failing."""
    rng = np.random.default_rng(sample_seed)
    cam = config.camera()
    n_target = int(rng.integers(config.min_objects, config.max_objects + 1))
    reasons: dict[str, int] = {}
    for n in range(n_target, 0, -1):
        for _ in range(config.max_tries):
            pose = CameraPose(float(rng.uniform(*config.cam_height)), float(rng.uniform(*config.pitch_deg)))
            layout = _sample_layout(config, rng, n, reasons)
            if layout is None:
                continue
            boxes, classes = layout
            why = _layout_problem(config, pose, cam, boxes)
            if why is None:
                r = render(cam, pose, config.width, config.height, boxes, Room(back_z=config.back_z))
                bboxes = _visible_boxes(r.label, n)
                if any(b is None or min(b[2], b[3]) < config.min_side_px for b in bboxes):
                    why = "object too small or hidden"
                else:
                    rels = _relations(config, boxes)
                    why = _graph_problem(config, bboxes, rels)
                    if why is None and split == "train" and config.embargo:
                        types = {(classes[x.subj], x.pred, classes[x.obj]) for x in rels}
                        if types & set(config.embargo):
                            why = "embargoed triplet in train split"
            if why is not None:
                reasons[why] = reasons.get(why, 0) + 1
                continue
            rgb = _shade(config, r.label, r.normal_world, classes, rng)
            graph = SceneGraph([SceneObject(c, b) for c, b in zip(classes, bboxes)], rels)
            meta = {
                "pose": {"height": pose.height, "pitch_deg": pose.pitch_deg},
                "boxes": [{"lo": list(b.lo), "hi": list(b.hi)} for b in boxes],
                "requested_objects": n_target,
                "placed_objects": n,
                "rejections": reasons,
                "label": r.label,
            }
            if n < n_target:
                log.info("sample %s: placed %d of %d objects", sample_id, n, n_target)
            return Sample(sample_id or f"s{sample_seed}", rgb, DepthMap(r.depth), graph, split, "metric", cam, meta)
    raise RuntimeError(f"could not place even one object for seed {sample_seed}: {reasons}")


def generate_dataset(config: SceneConfig, n_train: int, n_test: int) -> list[Sample]:
    out = []
    for split, count, key in (("train", n_train, 0), ("test", n_test, 1)):
        for i in range(count):
            sid = f"{split}_{i:05d}"
            out.append(generate_scene(config, derive_seed(config.seed, key, i), split, sid))
    return out


def train_triplet_inventory(samples) -> set[tuple[int, int, int]]:
    inv: set[tuple[int, int, int]] = set()
    for s in samples:
        if s.split == "train":
            inv |= s.graph.triplet_types()
    return inv
