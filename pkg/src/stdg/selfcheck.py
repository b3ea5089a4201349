"""Release gate: gradient checks, zero-offset equivalence, codec round-trip and
metric oracles, each reported by name."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gradcore import Tensor, concat, conv2d, deform_conv2d, mse, relu, sigmoid
from .gradcore.gradcheck import check_gradients
from .gradcore.tensor import perturbed_gradient

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _p(rng, *shape, scale=1.0, name=None) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


def _away_from_zero(rng, *shape) -> np.ndarray:
    x = rng.uniform(0.2, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """One scalar-valued fixture per differentiable op: ``name -> (f, params)``."""
    rng = np.random.default_rng(seed)
    cases = {}
    w = Tensor(rng.normal(size=(3, 4)))  # fixed projection making every output matter

    a, b = _p(rng, 3, 4), _p(rng, 4)
    cases["add"] = (lambda: ((a + b) * w).sum(), {"a": a, "b": b})
    a2, b2 = _p(rng, 3, 4), _p(rng, 3, 1)
    cases["sub"] = (lambda: ((a2 - b2) * w).sum(), {"a": a2, "b": b2})
    a3, b3 = _p(rng, 3, 4), _p(rng, 1, 4)
    cases["mul"] = (lambda: ((a3 * b3) * w).sum(), {"a": a3, "b": b3})
    a4 = _p(rng, 3, 4)
    cases["sum"] = (lambda: (a4 * a4).sum(), {"a": a4})
    a5 = _p(rng, 2, 6)
    cases["reshape"] = (lambda: (a5.reshape(3, 4) * w).sum(), {"a": a5})
    a6 = _p(rng, 5, 4)
    cases["getitem"] = (lambda: (a6[1:4] * w).sum(), {"a": a6})
    a7, b7 = _p(rng, 1, 4), _p(rng, 2, 4)
    cases["concat"] = (lambda: (concat([a7, b7], axis=0) * w).sum(), {"a": a7, "b": b7})
    a8 = Tensor(_away_from_zero(rng, 3, 4), requires_grad=True)
    cases["relu"] = (lambda: (relu(a8) * w).sum(), {"a": a8})
    a9 = _p(rng, 3, 4, scale=2.0)
    cases["sigmoid"] = (lambda: (sigmoid(a9) * w).sum(), {"a": a9})
    a10, b10 = _p(rng, 3, 4), _p(rng, 3, 4)
    mask = (rng.random((3, 4)) < 0.5).astype(float)
    cases["mse"] = (lambda: mse(a10, b10) + mse(a10 * b10, a10, mask=mask), {"a": a10, "b": b10})

    x = _p(rng, 2, 7, 6)
    k = _p(rng, 3, 2, 3, 3, scale=0.5)
    kb = _p(rng, 3)
    proj = Tensor(rng.normal(size=(3, 4, 3)))
    cases["conv2d"] = (lambda: (conv2d(x, k, kb, stride=2, padding=1) * proj).sum(), {"x": x, "w": k, "b": kb})

    xd = _p(rng, 2, 5, 6)
    wd = _p(rng, 3, 2, 3, 3, scale=0.5)
    bd = _p(rng, 3)
    # fractional offsets keep every sample away from bilinear kinks at integers
    off = Tensor(rng.uniform(-1.5, 1.5, size=(18, 5, 6)), requires_grad=True)
    projd = Tensor(rng.normal(size=(3, 5, 6)))
    cases["deform_conv2d"] = (lambda: (deform_conv2d(xd, wd, off, bd) * projd).sum(), {"x": xd, "w": wd, "offsets": off, "b": bd})
    return cases


def composite_case(seed: int = 0):
    """Full teacher/student loss (det + rel + semi + feature) through the network on a 16x16 input."""
    from .fields import encode_objects, encode_relations
    from .model import Network, NetworkConfig, TrainItem, compute_loss
    from .scenes.graph import Relation, SceneGraph, SceneObject

    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(widths=(4, 4), strides=(2, 2), head_width=4, deform_layers=1, num_classes=2, num_predicates=2, seed=seed)
    net = Network(cfg)
    for name, p in net.params.items():
        if ".offset" in name:
            p.data = rng.normal(0.0, 0.3, size=p.shape)
    graph = SceneGraph(
        [SceneObject(0, (1.0, 2.0, 6.0, 5.0)), SceneObject(1, (9.0, 8.0, 6.0, 7.0))],
        [Relation(0, 1, 1), Relation(1, 0, 0)],
    )
    item = TrainItem("fixture", rng.uniform(0, 1, size=(3, 16, 16)), encode_objects(graph, (16, 16), 4, 2), encode_relations(graph, (16, 16), 4, 2))
    teacher = ([rng.normal(0.0, 0.5, size=o.shape) for o in net.forward(item.input).offsets], rng.normal(size=(4, 4, 4)))

    def f():
        return compute_loss(net, item, mode=1, teacher=teacher, fully=True).graph

    return f, net.params


def check_op_gradients(seed: int = 0, perturb: str | None = None) -> list[CheckResult]:
    out = []
    for name, (f, params) in op_cases(seed).items():
        t0 = time.perf_counter()
        if perturb == name:
            with perturbed_gradient(name):
                errs = check_gradients(f, params)
        else:
            errs = check_gradients(f, params)
        worst = max(errs.values())
        out.append(CheckResult(f"grad:{name}", worst < GRAD_TOL, f"max rel err {worst:.2e}", time.perf_counter() - t0))
    return out


def check_composite_gradient(seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    f, params = composite_case(seed)
    errs = check_gradients(f, params)
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return CheckResult("grad:composite", worst < GRAD_TOL, f"max rel err {worst:.2e} ({name})", time.perf_counter() - t0)


def zero_offset_gap(rng: np.random.Generator) -> float:
    c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    k = int(rng.choice([1, 3, 5]))
    x = Tensor(rng.normal(size=(c_in, h, w)))
    wt = Tensor(rng.normal(size=(c_out, c_in, k, k)))
    b = Tensor(rng.normal(size=c_out))
    off = Tensor(np.zeros((2 * k * k, h, w)))
    return float(np.max(np.abs(deform_conv2d(x, wt, off, b).data - conv2d(x, wt, b, 1, k // 2).data)))


def check_zero_offset(n: int = 100, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = max(zero_offset_gap(rng) for _ in range(n))
    return CheckResult("deform:zero-offset", worst <= 1e-12, f"max |diff| {worst:.1e} over {n} shapes", time.perf_counter() - t0)


def check_codec(n: int = 20, seed: int = 0) -> CheckResult:
    from .eval import EvalItem, run_eval
    from .fields import encode_objects, encode_relations
    from .scenes.generate import SceneConfig, generate_dataset

    t0 = time.perf_counter()
    cfg = SceneConfig(seed=seed)
    samples = generate_dataset(cfg, n, 0)

    def fwd(s):
        o = encode_objects(s.graph, s.dims, cfg.stride, cfg.num_classes)
        r = encode_relations(s.graph, s.dims, cfg.stride, cfg.num_predicates)
        return o.heatmap, o.size, r.field

    rep = run_eval(fwd, [EvalItem(s.id, s, s.graph) for s in samples], cfg.stride)
    vals = [v for ms in rep.recall.values() for ks in ms.values() for v in ks.values()] + list(rep.ap50.values())
    ok = bool(vals) and all(v == 1.0 for v in vals) and not rep.errors
    return CheckResult("codec:round-trip", ok, f"min metric {min(vals) if vals else float('nan')}", time.perf_counter() - t0)


def _oracle_recall(preds, gt, k) -> float:
    """Best achievable matched fraction over all injective top-k to GT assignments."""
    from .eval.metrics import triplet_matches

    top = preds.triplets[:k]
    n = len(gt.relations)
    best = 0
    for perm in itertools.permutations(range(n), min(n, len(top))):
        best = max(best, sum(triplet_matches(top[i], preds.detections, gt, g) for i, g in enumerate(perm)))
    return best / n


def check_metric_oracles(n: int = 20, seed: int = 0) -> CheckResult:
    from .eval.metrics import ImageResult, recall_at_k
    from .fixtures import random_eval_case

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        gt, pred = random_eval_case(rng)
        k = int(rng.integers(1, 8))
        got = recall_at_k([ImageResult(gt, pred)], k, graph_constraint=False)
        worst = max(worst, abs(got - _oracle_recall(pred, gt, k)))
    return CheckResult("metrics:oracle", worst == 0.0, f"max |diff| {worst}", time.perf_counter() - t0)


def run_selfcheck(seed: int = 0, perturb: str | None = None) -> list[CheckResult]:
    results = check_op_gradients(seed, perturb)
    results.append(check_composite_gradient(seed))
    results.append(check_zero_offset(100, seed))
    results.append(check_codec(20, seed))
    results.append(check_metric_oracles(20, seed))
    return results
