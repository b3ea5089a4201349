import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from stdg.checkpoint import load_checkpoint
from stdg.model import Network, NetworkConfig, Regime, compute_loss, loss_semi
from stdg.scenes.generate import SceneConfig, generate_dataset, train_triplet_inventory
from stdg.teach import (
    ABLATION_ROWS,
    EPOCH_COLUMNS,
    VARIANTS,
    ConfigMismatch,
    MissingDepth,
    PlanError,
    TeachingPlan,
    distill_offsets,
    prepare_samples,
    run_ablation_matrix,
    train_student,
    train_teacher,
    write_run_dir,
)

NET = NetworkConfig(widths=(4, 4), strides=(2, 2), head_width=4)
FAST = Regime(lr_backbone=1e-3, lr_heads=3e-3, epochs=2)
ENCODINGS = ("hha", "raw_depth", "h_only", "hh_only")


@pytest.fixture(scope="module")
def data():
    samples = generate_dataset(SceneConfig(seed=5), 8, 3)
    return prepare_samples(samples, NET, ENCODINGS), train_triplet_inventory(samples)


@pytest.fixture(scope="module")
def teacher(data):
    prepared, _ = data
    return train_teacher(prepared, NET, FAST, "hha", 0)


def params_of(net):
    return {k: p.data.copy() for k, p in net.params.items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_plan_validation():
    with pytest.raises(PlanError):
        TeachingPlan("teleport")
    for v in ("semi", "no_det_guide", "no_rel_guide", "fully_teaching"):
        with pytest.raises(PlanError):
            TeachingPlan(v).check(has_teacher=False)
        TeachingPlan(v).check(has_teacher=True)
    with pytest.raises(PlanError):
        TeachingPlan("combine_training").check(has_teacher=True)
    assert TeachingPlan("no_teacher_baseline").mode == 0
    assert TeachingPlan("no_det_guide").guide == (False, True)
    assert TeachingPlan("no_rel_guide").guide == (True, False)
    assert TeachingPlan("h_only").teacher_encoding == "h_only"


def test_teacher_runs_in_mode_zero(teacher):
    net, rec = teacher
    assert len(rec.epochs) == FAST.epochs and rec.aborted is None
    for row in rec.epochs:
        assert row["total"] == pytest.approx(row["det"] + row["rel"], abs=0, rel=1e-15)
        assert row["semi"] == 0.0


def test_reduced_teacher_inputs_zero_their_channels(data):
    prepared, _ = data
    for p in prepared:
        assert not p.teacher_inputs["h_only"][1:].any()
        assert not p.teacher_inputs["hh_only"][2].any()
        r = p.teacher_inputs["raw_depth"]
        assert np.array_equal(r[0], r[1]) and np.array_equal(r[1], r[2])


def test_teacher_needs_depth(data):
    prepared, _ = data
    stripped = [replace(p, teacher_inputs={}) if i == 3 else p for i, p in enumerate(prepared)]
    with pytest.raises(MissingDepth, match=prepared[3].id):
        train_teacher(stripped, NET, FAST, "hha", 0)


def test_teacher_training_reduces_loss():
    samples = generate_dataset(SceneConfig(seed=8), 200, 0)
    prepared = prepare_samples(samples, NET, ("hha",))
    _, rec = train_teacher(prepared, NET, replace(FAST, epochs=20), "hha", 0)
    assert rec.epochs[-1]["total"] < rec.epochs[0]["total"]


def test_distilled_offsets_are_deterministic_and_shape_aligned(data, teacher):
    prepared, _ = data
    net, _ = teacher
    student = Network(replace(NET, seed=77))
    for p in prepared:
        a = distill_offsets(net, p.teacher_inputs["hha"], NET)
        b = distill_offsets(net, p.teacher_inputs["hha"], NET)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert [x.shape for x in a] == [o.shape for o in student.forward(p.rgb).offsets]


def test_distill_rejects_a_different_architecture(data, teacher):
    prepared, _ = data
    with pytest.raises(ConfigMismatch):
        distill_offsets(teacher[0], prepared[0].teacher_inputs["hha"], replace(NET, head_width=8))


def test_student_cloned_from_teacher_has_zero_semi_loss(data, teacher):
    prepared, _ = data
    net = teacher[0]
    clone = net.copy()
    for p in prepared:
        t_off = distill_offsets(net, p.rgb, NET)
        out = clone.forward(p.rgb)
        assert loss_semi(out.offsets, t_off, NET.deform_layers).item() == 0.0


def test_baseline_records_no_semi_and_semi_records_no_feature(data, teacher):
    prepared, _ = data
    _, base = train_student(prepared, None, TeachingPlan("no_teacher_baseline"), NET, FAST, 0)
    assert all(r["semi"] == 0.0 and r["feature"] == 0.0 for r in base.epochs)
    _, semi = train_student(prepared, teacher[0], TeachingPlan("semi"), NET, FAST, 0)
    assert all(r["semi"] > 0.0 and r["feature"] == 0.0 for r in semi.epochs)
    _, fully = train_student(prepared, teacher[0], TeachingPlan("fully_teaching"), NET, FAST, 0)
    assert all(r["feature"] > 0.0 for r in fully.epochs)


def test_teacher_is_untouched_by_student_training(data, teacher):
    prepared, _ = data
    net = teacher[0]
    before = params_of(net)
    offsets_before = [distill_offsets(net, p.teacher_inputs["hha"], NET) for p in prepared]
    for v in ("semi", "fully_teaching", "no_det_guide"):
        train_student(prepared, net, TeachingPlan(v, cache_teacher=False), NET, FAST, 1)
    assert same_params(before, params_of(net))
    offsets_after = [distill_offsets(net, p.teacher_inputs["hha"], NET) for p in prepared]
    assert all(np.array_equal(a, b) for xs, ys in zip(offsets_before, offsets_after) for a, b in zip(xs, ys))


class _ModeZero(TeachingPlan):
    @property
    def mode(self):
        return 0


def test_semi_without_the_offset_term_is_the_baseline(data, teacher):
    prepared, _ = data
    a, _ = train_student(prepared, teacher[0], _ModeZero("semi"), NET, FAST, 3)
    b, _ = train_student(prepared, None, TeachingPlan("no_teacher_baseline"), NET, FAST, 3)
    assert same_params(params_of(a), params_of(b))


def test_caching_teacher_outputs_changes_nothing(data, teacher):
    prepared, _ = data
    a, _ = train_student(prepared, teacher[0], TeachingPlan("semi", cache_teacher=True), NET, FAST, 2)
    b, _ = train_student(prepared, teacher[0], TeachingPlan("semi", cache_teacher=False), NET, FAST, 2)
    assert same_params(params_of(a), params_of(b))


def test_combine_training_updates_both_networks(data):
    prepared, _ = data
    student, rec = train_student(prepared, None, TeachingPlan("combine_training"), NET, FAST, 0)
    assert len(rec.epochs) == FAST.epochs
    assert all(r["semi"] > 0.0 for r in rec.epochs)


def test_guides_select_head_layers(data, teacher):
    prepared, _ = data
    item = prepared[0].item()
    net = Network(replace(NET, seed=5))
    t = (distill_offsets(teacher[0], prepared[0].teacher_inputs["hha"], NET), np.zeros(1))
    det_only = compute_loss(net, item, 1, t, (True, False)).semi
    rel_only = compute_loss(net, item, 1, t, (False, True)).semi
    both = compute_loss(net, item, 1, t, (True, True)).semi
    # both heads have equally sized offset maps, so the joint mean is the mean of the two
    assert both == pytest.approx((det_only + rel_only) / 2)
    assert det_only != rel_only


def test_run_directory_layout(tmp_path, data, teacher):
    prepared, inv = data
    net, rec = teacher
    from stdg.teach import evaluate_network

    rep = evaluate_network(net, prepared, inv, "hha")
    root = write_run_dir(tmp_path / "run", rec, net, rep)
    assert json.loads((root / "plan.json").read_text())["role"] == "teacher"
    rows = list(csv.reader((root / "epochs.csv").read_text().splitlines()))
    assert tuple(rows[0]) == EPOCH_COLUMNS and len(rows) == FAST.epochs + 1
    loaded, manifest = load_checkpoint(root / "checkpoints" / "final")
    assert same_params(params_of(loaded), params_of(net))
    assert json.loads((root / "report.json").read_text())["n_images"] == 3


def test_ablation_matrix_shape_determinism_and_gaps(data, tmp_path):
    prepared, inv = data
    # drop the raw-depth encoding so that row fails while the others complete
    crippled = [replace(p, teacher_inputs={k: v for k, v in p.teacher_inputs.items() if k != "raw_depth"}) for p in prepared]
    one = replace(FAST, epochs=1)
    a = run_ablation_matrix(crippled, NET, one, (0,), VARIANTS, inv)
    assert [r.variant for r in a.rows] == [v for v, _ in ABLATION_ROWS]
    assert len(a.table()) == len(VARIANTS)
    assert a.row("raw_depth_teacher").error and "MissingDepth" in a.row("raw_depth_teacher").error
    assert a.row("raw_depth_teacher").mean is None
    assert all(r.error is None for r in a.rows if r.variant != "raw_depth_teacher")
    b = run_ablation_matrix(crippled, NET, one, (0,), VARIANTS, inv)
    for ra, rb in zip(a.rows, b.rows):
        assert [x.dumps() for x in ra.reports] == [x.dumps() for x in rb.reports]


def test_shared_teacher_serves_every_seed(data, tmp_path):
    prepared, inv = data
    one = replace(FAST, epochs=1)
    m = run_ablation_matrix(prepared, NET, one, (0, 1), ("semi",), inv, out_dir=tmp_path, shared_teacher_seed=7)
    assert len(m.teacher_reports["hha"]) == 1
    assert [p.name for p in sorted(tmp_path.glob("teacher_*"))] == ["teacher_hha_s7"]
    assert len(m.row("semi").reports) == 2
