import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from golden import RN50_ROW, SEMI_TEXT, TABLE1_HEADER, rn50_report, semi_report
from oracles import fixture_set, o_ap50, o_assignments, o_iou, o_mean_recall, o_recall, results
from stdg.eval import (
    EvalReport,
    EvalTask,
    ImageResult,
    ap50,
    evaluate,
    iou,
    match_triplets,
    mean_recall,
    recall_at_k,
    table1_csv,
    table1_row,
    table5_csv,
    table5_text,
    zero_shot_recall,
)
from stdg.fields import Detection, ImagePrediction, TripletPrediction
from stdg.fixtures import random_detections, random_eval_case, random_graph
from stdg.scenes.graph import Relation, SceneGraph, SceneObject

# ---------------------------------------------------------------- iou


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (5, 5, 1, 1)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7)
    assert iou((0, 0, 2, 2), (2, 0, 2, 2)) == 0.0


# ---------------------------------------------------------------- matching


def test_perfect_predictions_match_everything():
    gt = random_graph(np.random.default_rng(3))
    dets = [Detection(o.cls, 1.0, o.bbox, (0, 0)) for o in gt.objects]
    trips = [TripletPrediction(r.subj, r.pred, r.obj, 1.0, 1.0) for r in reversed(gt.relations)]
    assert match_triplets(trips, dets, gt, len(trips)) == set(range(len(gt.relations)))
    assert recall_at_k([ImageResult(gt, ImagePrediction("x", dets, trips))], 100) == 1.0


def test_low_iou_subject_does_not_match():
    gt = SceneGraph([SceneObject(0, (0, 0, 10, 10)), SceneObject(1, (50, 0, 10, 10))], [Relation(0, 2, 1)])
    shifted = (6.0, 0.0, 10.0, 10.0)  # IoU 4/16 with the subject box
    assert o_iou(shifted, (0, 0, 10, 10)) < 0.5
    dets = [Detection(0, 1.0, shifted, (0, 0)), Detection(1, 1.0, (50, 0, 10, 10), (0, 0))]
    assert match_triplets([TripletPrediction(0, 2, 1, 1.0, 1.0)], dets, gt, 10) == set()


def test_half_recall():
    gt = SceneGraph([SceneObject(0, (0, 0, 10, 10)), SceneObject(1, (50, 0, 10, 10))], [Relation(0, 0, 1), Relation(1, 1, 0)])
    dets = [Detection(0, 1.0, (0, 0, 10, 10), (0, 0)), Detection(1, 1.0, (50, 0, 10, 10), (0, 0))]
    pred = ImagePrediction("x", dets, [TripletPrediction(0, 0, 1, 0.9, 1.0), TripletPrediction(1, 2, 0, 0.8, 1.0)])
    assert recall_at_k([ImageResult(gt, pred)], 20) == 0.5


@pytest.mark.parametrize("seed", range(50))
def test_greedy_matching_agrees_with_exhaustive_assignment(seed):
    rng = np.random.default_rng(1000 + seed)
    gt, pred = random_eval_case(rng)
    k = int(rng.integers(1, 9))
    got = match_triplets(pred.triplets, pred.detections, gt, k)
    best, sets = o_assignments(pred.triplets[:k], pred.detections, gt, range(len(gt.relations)))
    assert len(got) == best and frozenset(got) in sets


# ---------------------------------------------------------------- dataset metrics


@pytest.mark.parametrize("seed", range(50))
def test_metrics_agree_with_brute_force_oracles(seed):
    cases = fixture_set(seed)
    res = results(cases)
    for k in (1, 3, 20):
        for c in (True, False):
            assert recall_at_k(res, k, c) == o_recall(cases, k, c)
            assert mean_recall(res, k, c) == o_mean_recall(cases, k, c)
    # hold out one type per image so some GT triples are unseen
    inventory = {t for gt, _ in cases for t in sorted(gt.triplet_types())[1:]}

    def novel(gt):
        return [g for g, r in enumerate(gt.relations) if (gt.objects[r.subj].cls, r.pred, gt.objects[r.obj].cls) not in inventory]

    for c in (True, False):
        assert zero_shot_recall(res, inventory, 20, c) == o_recall(cases, 20, c, novel)
    got_ap = ap50([p.detections for _, p in cases], [g for g, _ in cases])
    assert abs(got_ap - o_ap50([p.detections for _, p in cases], [g for g, _ in cases])) <= 1e-9


def test_recall_errors_and_skips():
    with pytest.raises(ValueError):
        recall_at_k([], 20)
    empty = SceneGraph([SceneObject(0, (0, 0, 5, 5))])
    gt, pred = fixture_set(7, 1)[0]
    assert recall_at_k([ImageResult(empty, ImagePrediction("e")), ImageResult(gt, pred)], 20) == recall_at_k([ImageResult(gt, pred)], 20)


def test_mean_recall_examples():
    gt = SceneGraph([SceneObject(0, (0, 0, 10, 10)), SceneObject(1, (50, 0, 10, 10))], [Relation(0, 0, 1), Relation(1, 1, 0)])
    dets = [Detection(0, 1.0, (0, 0, 10, 10), (0, 0)), Detection(1, 1.0, (50, 0, 10, 10), (0, 0))]
    pred = ImagePrediction("x", dets, [TripletPrediction(0, 0, 1, 0.9, 1.0)])
    assert mean_recall([ImageResult(gt, pred)], 50) == 0.5
    one = SceneGraph(gt.objects, [Relation(0, 0, 1)])
    assert mean_recall([ImageResult(one, pred)], 50) == recall_at_k([ImageResult(one, pred)], 50) == 1.0


def test_zero_shot_examples():
    cases = fixture_set(4)
    res = results(cases)
    everything = set().union(*(gt.triplet_types() for gt, _ in cases))
    assert zero_shot_recall(res, everything, 50) is None
    assert zero_shot_recall(res, set(), 50) == recall_at_k(res, 50)


def test_ap_examples():
    gts = [random_graph(np.random.default_rng(s)) for s in range(3)]
    exact = [[Detection(o.cls, 1.0, o.bbox, (0, 0)) for o in g.objects] for g in gts]
    assert ap50(exact, gts) == 1.0
    assert ap50([[] for _ in gts], gts) == 0.0
    with pytest.raises(ValueError):
        ap50(exact[:1], gts)


def test_ap_with_duplicates_and_misses():
    rng = np.random.default_rng(21)
    gts = [random_graph(rng) for _ in range(6)]
    dets = [random_detections(rng, g) for g in gts]
    assert abs(ap50(dets, gts) - o_ap50(dets, gts)) <= 1e-9


# ---------------------------------------------------------------- invariants


def test_constraint_filters_inside_the_top_k():
    # pair (0, 1) holds two wrong predicates ahead of the right one for pair (0, 2)
    objs = [SceneObject(0, (0, 0, 10, 10)), SceneObject(1, (20, 0, 10, 10)), SceneObject(2, (40, 0, 10, 10))]
    gt = SceneGraph(objs, [Relation(0, 3, 2)])
    dets = [Detection(o.cls, 1.0, o.bbox, (0.0, 0.0)) for o in objs]
    trips = [TripletPrediction(0, 0, 1, 0.9, 1.0), TripletPrediction(0, 1, 1, 0.8, 1.0), TripletPrediction(0, 3, 2, 0.7, 1.0)]
    res = [ImageResult(gt, ImagePrediction("x", dets, trips))]
    # filtering first would promote the third triplet into the top 2
    assert recall_at_k(res, 2, True) == recall_at_k(res, 2, False) == 0.0
    assert recall_at_k(res, 3, True) == recall_at_k(res, 3, False) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_constrained_recall_never_exceeds_unconstrained_and_grows_with_k(seed, k):
    res = results(fixture_set(seed, 3))
    assert recall_at_k(res, k, True) <= recall_at_k(res, k, False)
    assert recall_at_k(res, k, True) <= recall_at_k(res, k + 5, True)
    assert recall_at_k(res, k, False) <= recall_at_k(res, k + 5, False)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.randoms(use_true_random=False))
def test_permuting_equal_scores_keeps_the_matched_count(seed, shuffler):
    gt, pred = fixture_set(seed, 1)[0]
    groups = {}
    for t in pred.triplets:
        groups.setdefault(t.score, []).append(t)
    shuffled = []
    for score in sorted(groups, reverse=True):
        g = list(groups[score])
        shuffler.shuffle(g)
        shuffled += g
    # a cut inside a tie group is settled upstream by decode order, so cut between groups
    bounds = np.cumsum([len(groups[s]) for s in sorted(groups, reverse=True)])
    for k in bounds:
        a = match_triplets(pred.triplets, pred.detections, gt, k)
        b = match_triplets(shuffled, pred.detections, gt, k)
        assert len(a) == len(b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3))
def test_mean_recall_of_uniform_per_predicate_recall(n, hits):
    hits = min(hits, n)
    # n triples of each of three predicates, the first ``hits`` of each predicate predicted
    objects = [SceneObject(0, (i * 40.0, 0.0, 20.0, 20.0)) for i in range(2 * n)]
    rels = [Relation(2 * i, p, 2 * i + 1) for p in range(3) for i in range(n)]
    gt = SceneGraph(objects, rels)
    dets = [Detection(0, 1.0, o.bbox, (0, 0)) for o in objects]
    trips = [TripletPrediction(2 * i, p, 2 * i + 1, 1.0, 1.0) for p in range(3) for i in range(hits)]
    assert mean_recall([ImageResult(gt, ImagePrediction("u", dets, trips))], 100, False) == pytest.approx(hits / n)


def test_evaluate_report_passes_audit_and_round_trips():
    cases = fixture_set(99, 6)
    rep = evaluate({t: results(cases) for t in ("PredCls", "SGCls", "SGDet")}, inventory=set())
    assert rep.audit() == []
    assert rep.n_images == 6
    back = EvalReport.from_json(json.loads(rep.dumps()))
    assert back.dumps() == rep.dumps()


def test_audit_flags_violations():
    rep = EvalReport(recall={"SGDet": {"g": {20: 0.5, 50: 0.4}, "ng": {20: 0.3, 50: 0.6}}})
    bad = rep.audit()
    assert any("g 0.5 > ng 0.3" in b for b in bad)
    assert any("g-R@20 0.5 > R@50 0.4" in b for b in bad)


def test_task_failures_are_recorded_not_raised():
    rep = evaluate({"SGDet": []})
    assert "SGDet" in rep.errors and "SGDet" not in rep.recall


# ---------------------------------------------------------------- rendering


def test_table1_header_is_golden():
    assert table1_csv([]) == TABLE1_HEADER + "\n"


def test_table1_row_renders_the_published_numbers():
    row = table1_row(rn50_report(), "ours", "RN50")
    assert ",".join(row) == RN50_ROW
    assert row[8:11] == ["12.3/15.0", "15.3/18.7", "16.6/21.0"]
    assert table1_csv([row]).splitlines()[1] == RN50_ROW


def test_table1_row_without_throughput():
    rep = rn50_report()
    rep.images_per_sec = None
    assert table1_row(rep, "m", "b")[-2] == "-"


def test_table5_renders_the_published_semi_row():
    text = table5_text([("semi-teaching", semi_report())])
    cells = text.splitlines()[1].split()
    assert cells[0] == "semi-teaching"
    assert " / ".join(cells[1:]) == SEMI_TEXT
    csv_line = table5_csv([("semi-teaching", semi_report())]).splitlines()[1]
    assert csv_line == "semi-teaching,43.28,55.35,15.69,19.86,15.25,18.71"


def test_table5_marks_missing_rows():
    line = table5_csv([("raw depth", None)]).splitlines()[1]
    assert line == "raw depth,gap,gap,gap,gap,gap,gap"


def test_task_names_round_trip():
    assert [EvalTask(t.value) for t in EvalTask] == list(EvalTask)
