"""Evaluation reports built from per-task predictions or a network pass,
plus the table renderers."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..fields import Detection, ImagePrediction, box_center_cells, center_cell, decode_objects, decode_relations, gt_detections
from ..scenes.graph import SceneGraph
from .metrics import TASKS, EvalTask, ImageResult, ap50, mean_recall, recall_at_k, zero_shot_recall

KS = (20, 50, 100)

TABLE1_HEADER = (
    "method,backbone,"
    "PredCls g-R20/ng-R20,PredCls g-R50/ng-R50,PredCls g-R100/ng-R100,"
    "SGCls g-R20/ng-R20,SGCls g-R50/ng-R50,SGCls g-R100/ng-R100,"
    "SGDet g-R20/ng-R20,SGDet g-R50/ng-R50,SGDet g-R100/ng-R100,"
    "img/sec,AP50"
)
TABLE5_HEADER = "method,PredCls g-R50,PredCls ng-R50,SGCls g-R50,SGCls ng-R50,SGDet g-R50,SGDet ng-R50"


@dataclass
class DecodeOptions:
    top_n: int = 100
    score_threshold: float = 0.1
    top_k: int = 100
    tau: float = 1.0
    alpha_threshold: float = 0.05


@dataclass
class EvalReport:
    """Metric values as fractions in [0, 1]; ``None`` marks a not-applicable cell."""

    recall: dict[str, dict[str, dict[int, float]]] = field(default_factory=dict)  # task -> g|ng -> K
    mean_recall: dict[str, dict[str, float]] = field(default_factory=dict)  # task -> g|ng, K = 50
    zero_shot: dict[str, dict[str, float | None]] = field(default_factory=dict)
    ap50: dict[str, float] = field(default_factory=dict)
    n_images: int = 0
    errors: dict[str, str] = field(default_factory=dict)
    images_per_sec: float | None = None

    def cell(self, task: EvalTask | str, k: int) -> tuple[float, float]:
        t = EvalTask(task).value
        return self.recall[t]["g"][k], self.recall[t]["ng"][k]

    def to_json(self, include_timing: bool = False) -> dict:
        d = {
            "recall": {t: {m: {str(k): v for k, v in ks.items()} for m, ks in ms.items()} for t, ms in self.recall.items()},
            "mean_recall@50": self.mean_recall,
            "zero_shot_recall@50": self.zero_shot,
            "ap50": self.ap50,
            "n_images": self.n_images,
            "errors": self.errors,
        }
        if include_timing:
            d["images_per_sec"] = self.images_per_sec
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(
            recall={t: {m: {int(k): v for k, v in ks.items()} for m, ks in ms.items()} for t, ms in d["recall"].items()},
            mean_recall=d.get("mean_recall@50", {}),
            zero_shot=d.get("zero_shot_recall@50", {}),
            ap50=d.get("ap50", {}),
            n_images=d.get("n_images", 0),
            errors=d.get("errors", {}),
            images_per_sec=d.get("images_per_sec"),
        )

    def audit(self) -> list[str]:
        """Protocol violations: g above ng, recall falling with K, values outside [0, 1]."""
        bad = []
        for t, ms in self.recall.items():
            for k in sorted(ms.get("g", {})):
                g, ng = ms["g"][k], ms["ng"][k]
                for name, v in (("g", g), ("ng", ng)):
                    if not 0.0 <= v <= 1.0:
                        bad.append(f"{t} {name}-R@{k} = {v} outside [0,1]")
                if g > ng:
                    bad.append(f"{t} R@{k}: g {g} > ng {ng}")
            for m in ("g", "ng"):
                ks = sorted(ms.get(m, {}))
                for a, b in zip(ks, ks[1:]):
                    if ms[m][a] > ms[m][b]:
                        bad.append(f"{t} {m}-R@{a} {ms[m][a]} > R@{b} {ms[m][b]}")
        return bad


def evaluate(
    results: Mapping[EvalTask | str, Sequence[ImageResult]],
    ks: Sequence[int] = KS,
    inventory: set | None = None,
) -> EvalReport:
    rep = EvalReport()
    for task, res in results.items():
        t = EvalTask(task).value
        try:
            rep.recall[t] = {m: {k: recall_at_k(res, k, m == "g") for k in ks} for m in ("g", "ng")}
            rep.mean_recall[t] = {m: mean_recall(res, 50, m == "g") for m in ("g", "ng")}
            rep.zero_shot[t] = {m: zero_shot_recall(res, inventory or set(), 50, m == "g") for m in ("g", "ng")}
            rep.ap50[t] = ap50([r.pred.detections for r in res], [r.gt for r in res])
            rep.n_images = max(rep.n_images, len(res))
        except ValueError as e:
            rep.recall.pop(t, None)
            rep.errors[t] = str(e)
    return rep


# ------------------------------------------------------------- predictions


def task_detections(task: EvalTask, h: np.ndarray, s: np.ndarray, graph: SceneGraph, stride: int, opts: DecodeOptions) -> list[Detection]:
    task = EvalTask(task)
    if task is EvalTask.PREDCLS:
        return gt_detections(graph, stride)
    if task is EvalTask.SGCLS:
        grid = h.shape[1:]
        dets = []
        for o in graph.objects:
            r, c = center_cell(o.bbox, stride, grid)
            cls = int(np.argmax(h[:, r, c]))
            dets.append(Detection(cls, float(h[cls, r, c]), tuple(o.bbox), box_center_cells(o.bbox, stride)))
        return dets
    return decode_objects(h, s, stride, opts.top_n, opts.score_threshold)


def predict(
    h: np.ndarray, s: np.ndarray, r: np.ndarray, graph: SceneGraph, task: EvalTask, stride: int, opts: DecodeOptions, sample_id: str = ""
) -> ImagePrediction:
    dets = task_detections(task, h, s, graph, stride, opts)
    trips = decode_relations(r, dets, opts.top_k, opts.tau, opts.alpha_threshold)
    return ImagePrediction(sample_id, dets, trips)


@dataclass
class EvalItem:
    id: str
    input: np.ndarray  # [3, H, W]
    graph: SceneGraph


def run_eval(
    forward: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]],
    items: Sequence[EvalItem],
    stride: int,
    tasks: Sequence[EvalTask | str] = TASKS,
    ks: Sequence[int] = KS,
    inventory: set | None = None,
    opts: DecodeOptions | None = None,
) -> EvalReport:
    """Evaluate a network given as ``forward(x) -> (h, s, r)`` arrays.

    Throughput is wall-clock images/sec over the forward plus SGDet decode.
    """
    opts = opts or DecodeOptions()
    tasks = [EvalTask(t) for t in tasks]
    results: dict[EvalTask, list[ImageResult]] = {t: [] for t in tasks}
    start = time.perf_counter()
    for it in items:
        h, s, r = forward(it.input)
        for t in tasks:
            results[t].append(ImageResult(it.graph, predict(h, s, r, it.graph, t, stride, opts, it.id)))
    elapsed = time.perf_counter() - start
    rep = evaluate(results, ks, inventory)
    rep.images_per_sec = len(items) / elapsed if elapsed > 0 else None
    return rep


# --------------------------------------------------------------- rendering


def _pair(g: float | None, ng: float | None, digits: int) -> str:
    def f(v):
        return "-" if v is None else f"{100.0 * v:.{digits}f}"

    return f"{f(g)}/{f(ng)}"


def table1_row(report: EvalReport, method: str, backbone: str) -> list[str]:
    row = [method, backbone]
    for t in TASKS:
        for k in KS:
            try:
                row.append(_pair(*report.cell(t, k), 1))
            except KeyError:
                row.append("-/-")
    row.append("-" if report.images_per_sec is None else f"{report.images_per_sec:.1f}")
    ap = report.ap50.get(EvalTask.SGDET.value)
    row.append("-" if ap is None else f"{100.0 * ap:.1f}")
    return row


def table1_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    buf.write(TABLE1_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def table5_cells(report: EvalReport | None) -> list[str]:
    """Six cells: g and ng R@50 for PredCls, SGCls, SGDet (``gap`` where missing)."""
    out = []
    for t in TASKS:
        for m in ("g", "ng"):
            try:
                out.append(f"{100.0 * report.recall[t.value][m][50]:.2f}")
            except (KeyError, AttributeError, TypeError):
                out.append("gap")
    return out


def table5_text(rows: Sequence[tuple[str, EvalReport | None]]) -> str:
    """Aligned text table in the g/ng-per-task layout."""
    lines = [f"{'method':<24}{'PredCls':>16}{'SGCls':>16}{'SGDet':>16}"]
    for name, rep in rows:
        c = table5_cells(rep)
        lines.append(f"{name:<24}" + "".join(f"{c[i] + '/' + c[i + 1]:>16}" for i in (0, 2, 4)))
    return "\n".join(lines) + "\n"


def table5_csv(rows: Sequence[tuple[str, EvalReport | None]]) -> str:
    buf = io.StringIO()
    buf.write(TABLE5_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for name, rep in rows:
        w.writerow([name, *table5_cells(rep)])
    return buf.getvalue()
