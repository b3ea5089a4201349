"""Scene graphs: objects with pixel boxes and directed labelled relations."""

from __future__ import annotations

from dataclasses import dataclass, field

Box = tuple[float, float, float, float]  # x, y, w, h in pixels


@dataclass(frozen=True)
class SceneObject:
    cls: int
    bbox: Box

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return x + w / 2.0, y + h / 2.0

    @property
    def min_side(self) -> float:
        return min(self.bbox[2], self.bbox[3])


@dataclass(frozen=True)
class Relation:
    subj: int
    pred: int
    obj: int


@dataclass
class SceneGraph:
    objects: list[SceneObject] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)

    def problems(self, width: int, height: int, num_classes: int | None = None, num_predicates: int | None = None) -> list[str]:
        """Every invariant violation, as human-readable strings (empty when valid)."""
        out = []
        for i, o in enumerate(self.objects):
            x, y, w, h = o.bbox
            if num_classes is not None and not 0 <= o.cls < num_classes:
                out.append(f"object {i}: class {o.cls} outside [0,{num_classes})")
            if w <= 0 or h <= 0:
                out.append(f"object {i}: non-positive box size {w}x{h}")
            if x < 0 or y < 0 or x + w > width + 1e-9 or y + h > height + 1e-9:
                out.append(f"object {i}: box {o.bbox} outside {width}x{height} image")
        seen = set()
        for k, r in enumerate(self.relations):
            n = len(self.objects)
            if not (0 <= r.subj < n and 0 <= r.obj < n):
                out.append(f"relation {k}: index out of range")
            if r.subj == r.obj:
                out.append(f"relation {k}: subject equals object")
            if num_predicates is not None and not 0 <= r.pred < num_predicates:
                out.append(f"relation {k}: predicate {r.pred} outside [0,{num_predicates})")
            key = (r.subj, r.pred, r.obj)
            if key in seen:
                out.append(f"relation {k}: duplicate triple {key}")
            seen.add(key)
        return out

    def triplet_types(self) -> set[tuple[int, int, int]]:
        return {(self.objects[r.subj].cls, r.pred, self.objects[r.obj].cls) for r in self.relations}

    def to_json(self) -> dict:
        return {
            "objects": [{"class": o.cls, "bbox": list(o.bbox)} for o in self.objects],
            "relations": [{"subj": r.subj, "pred": r.pred, "obj": r.obj} for r in self.relations],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneGraph":
        objects = []
        for o in d["objects"]:
            bbox = o["bbox"]
            if len(bbox) != 4:
                raise ValueError(f"bbox must have 4 numbers, got {bbox}")
            objects.append(SceneObject(int(o["class"]), tuple(float(v) for v in bbox)))
        relations = [Relation(int(r["subj"]), int(r["pred"]), int(r["obj"])) for r in d.get("relations", [])]
        return cls(objects, relations)
