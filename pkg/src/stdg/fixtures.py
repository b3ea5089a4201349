"""Small randomized evaluation fixtures shared by the self-check and the tests.

Ground-truth boxes sit in disjoint horizontal slots, so no predicted box can
reach IoU 0.5 with two different GT boxes.
"""

from __future__ import annotations

import numpy as np

from .fields import Detection, ImagePrediction, TripletPrediction
from .scenes.graph import Relation, SceneGraph, SceneObject

SLOT = 40.0


def random_graph(rng: np.random.Generator, num_classes: int = 3, num_predicates: int = 3, max_objects: int = 4, max_relations: int = 5) -> SceneGraph:
    n = int(rng.integers(2, max_objects + 1))
    objects = []
    for i in range(n):
        w, h = rng.uniform(18, 30, size=2)
        objects.append(SceneObject(int(rng.integers(num_classes)), (i * SLOT + rng.uniform(0, SLOT - w), float(rng.uniform(0, 20)), float(w), float(h))))
    triples = [(s, p, o) for s in range(n) for o in range(n) if s != o for p in range(num_predicates)]
    m = int(rng.integers(1, min(max_relations, len(triples)) + 1))
    pick = rng.choice(len(triples), size=m, replace=False)
    return SceneGraph(objects, [Relation(*triples[i]) for i in sorted(pick)])


def jitter_box(rng: np.random.Generator, box, amount: float) -> tuple[float, float, float, float]:
    x, y, w, h = box
    dx, dy = rng.uniform(-amount, amount, size=2) * (w, h)
    sw, sh = np.exp(rng.uniform(-amount, amount, size=2))
    return (float(x + dx), float(y + dy), float(w * sw), float(h * sh))


def random_detections(rng: np.random.Generator, gt: SceneGraph, num_classes: int = 3) -> list[Detection]:
    dets = []
    for o in gt.objects:
        for _ in range(int(rng.integers(0, 3))):
            cls = o.cls if rng.random() < 0.8 else int(rng.integers(num_classes))
            box = jitter_box(rng, o.bbox, float(rng.choice([0.05, 0.3, 0.8])))
            dets.append(Detection(cls, float(np.round(rng.random(), 1)), box, (0.0, 0.0)))
    for _ in range(int(rng.integers(0, 2))):
        x = (len(gt.objects) + 1) * SLOT
        dets.append(Detection(int(rng.integers(num_classes)), float(rng.random()), (x, 5.0, 20.0, 20.0), (0.0, 0.0)))
    return dets


def random_eval_case(rng: np.random.Generator, num_classes: int = 3, num_predicates: int = 3) -> tuple[SceneGraph, ImagePrediction]:
    """A GT graph and a score-ranked prediction with noisy boxes, classes and predicates."""
    gt = random_graph(rng, num_classes, num_predicates)
    dets = random_detections(rng, gt, num_classes)
    if len(dets) < 2:
        dets += [Detection(o.cls, 1.0, o.bbox, (0.0, 0.0)) for o in gt.objects]
    trips = []
    for r in gt.relations:
        if rng.random() < 0.7:
            s = [i for i, d in enumerate(dets) if d.class_id == gt.objects[r.subj].cls]
            o = [i for i, d in enumerate(dets) if d.class_id == gt.objects[r.obj].cls]
            if s and o:
                si, oi = int(rng.choice(s)), int(rng.choice(o))
                if si != oi:
                    pred = r.pred if rng.random() < 0.8 else int(rng.integers(num_predicates))
                    trips.append((si, pred, oi))
    for _ in range(int(rng.integers(0, 6))):
        si, oi = rng.choice(len(dets), size=2, replace=False)
        trips.append((int(si), int(rng.integers(num_predicates)), int(oi)))
    # coarse scores create ties; the stable sort keeps generation order among them
    scored = [TripletPrediction(s, p, o, float(np.round(rng.random(), 1)), 1.0) for s, p, o in trips]
    scored.sort(key=lambda t: -t.score)
    return gt, ImagePrediction("case", dets, scored)


def analytic_room(pitch_deg: float = 12.0, height: float = 1.4, size: int = 96, focal_px: float = 80.0):
    """Floor, back wall, two side walls and two boxes seen by a pitched camera.

    Returns ``(depth, camera, pose, render, boxes)`` with exact depth.
    """
    from .hha import CameraModel, DepthMap
    from .scenes.render import Box3D, CameraPose, Room, render

    cam = CameraModel.default(size, size, focal_px)
    pose = CameraPose(height, pitch_deg)
    boxes = [Box3D((-0.9, 0.0, 3.0), (-0.2, 0.5, 3.7)), Box3D((0.3, 0.0, 2.6), (0.9, 0.8, 3.2))]
    r = render(cam, pose, size, size, boxes, Room(back_z=5.5, left_x=-1.8, right_x=1.8))
    return DepthMap(r.depth), cam, pose, r, boxes
