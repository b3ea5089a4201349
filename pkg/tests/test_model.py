import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stdg.fields import ObjectTargets, RelationTargets, encode_objects, encode_relations
from stdg.gradcore import Tensor, backward
from stdg.gradcore.gradcheck import check_gradients
from stdg.model import (
    ForwardOutput,
    Network,
    NetworkConfig,
    NonFiniteLoss,
    Regime,
    TrainItem,
    compute_loss,
    loss_det,
    loss_rel,
    loss_semi,
    total_loss,
    train_epoch,
)
from stdg.gradcore.optim import OptimConfig, make_optimizer
from stdg.model import lr_rule
from stdg.scenes.graph import Relation, SceneGraph, SceneObject

SMALL = NetworkConfig(widths=(4, 4), strides=(2, 2), head_width=4, num_classes=2, num_predicates=2)


def fake_output(h, s, r=None, P=1):
    hf, wf = h.shape[1:]
    r = np.zeros((P, 7, hf, wf)) if r is None else r
    return ForwardOutput(Tensor(h, requires_grad=True), Tensor(s, requires_grad=True), Tensor(r, requires_grad=True), [], Tensor(np.zeros(1)))


def loop_sq(a, b, mask=None):
    total, n = 0.0, 0
    for idx in np.ndindex(a.shape):
        if mask is None or mask[idx]:
            total += (a[idx] - b[idx]) ** 2
            n += 1
    return total, n


# ------------------------------------------------------------------ forward


def test_output_shapes_follow_the_stride():
    net = Network(SMALL)
    out = net.forward(np.zeros((3, 24, 16)))
    assert out.h.shape == (2, 6, 4) and out.s.shape == (2, 6, 4) and out.r.shape == (2, 7, 6, 4)
    assert len(out.offsets) == 2 * SMALL.deform_layers
    assert all(o.shape == (18, 6, 4) for o in out.offsets)
    assert 0 < out.h.data.min() and out.h.data.max() < 1
    assert 0 < out.r.data[:, 0].min() and out.r.data[:, 0].max() < 1


def test_indivisible_input_is_rejected():
    with pytest.raises(ValueError, match="divisible"):
        Network(SMALL).forward(np.zeros((3, 18, 16)))


def test_forward_is_deterministic_and_offsets_start_at_zero():
    x = np.random.default_rng(0).uniform(size=(3, 16, 16))
    a, b = Network(SMALL).forward(x), Network(SMALL).forward(x)
    np.testing.assert_array_equal(a.r.data, b.r.data)
    assert all(not o.data.any() for o in a.offsets)


def test_identical_configs_share_parameter_shapes():
    from dataclasses import replace

    assert Network(SMALL).param_shapes() == Network(replace(SMALL, seed=9)).param_shapes()
    assert SMALL.architecture_hash() == replace(SMALL, seed=9).architecture_hash()
    assert SMALL.architecture_hash() != replace(SMALL, head_width=8).architecture_hash()


def test_config_needs_a_deformable_layer():
    with pytest.raises(ValueError):
        NetworkConfig(deform_layers=0)


# ------------------------------------------------------------------ losses


@pytest.mark.parametrize("over", ["all", "support"])
def test_detection_loss_single_cell_example(over):
    t = ObjectTargets(np.array([[[1.0]]]), np.array([[[3.0]], [[2.0]]]), np.array([[1.0]]), 4)
    out = fake_output(np.array([[[0.5]]]), np.array([[[2.0]], [[1.0]]]))
    assert loss_det(out, t, over).item() == pytest.approx(0.25 + 1.0)


def test_detection_loss_is_zero_on_targets():
    g = SceneGraph([SceneObject(0, (4.0, 4.0, 8.0, 8.0))])
    t = encode_objects(g, (32, 32), 4, 2)
    assert loss_det(fake_output(t.heatmap, t.size), t).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), over=st.sampled_from(["all", "support"]))
def test_detection_loss_matches_loop_oracle(seed, over):
    rng = np.random.default_rng(seed)
    C, H, W = 2, 3, 4
    t = ObjectTargets(rng.uniform(size=(C, H, W)), rng.uniform(0, 5, (2, H, W)), (rng.random((H, W)) < 0.3).astype(float), 4)
    h, s = rng.uniform(size=(C, H, W)), rng.normal(size=(2, H, W))
    hs, hn = loop_sq(h, t.heatmap)
    ss, sn = loop_sq(s, t.size, np.broadcast_to(t.center_mask, s.shape))
    denom = s.size if over == "all" else sn
    want = hs / hn + (ss / denom if sn else 0.0)
    assert loss_det(fake_output(h, s), t, over).item() == pytest.approx(want, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), over=st.sampled_from(["all", "support"]))
def test_relation_loss_matches_loop_oracle(seed, over):
    rng = np.random.default_rng(seed)
    P, H, W = 2, 3, 3
    support = (rng.random((P, H, W)) < 0.4).astype(float)
    t = RelationTargets(rng.normal(size=(P, 7, H, W)), support, 4)
    r = rng.normal(size=(P, 7, H, W))
    a_s, a_n = loop_sq(r[:, 0], t.field[:, 0])
    g_s, g_n = loop_sq(r[:, 1:], t.field[:, 1:], np.broadcast_to(support[:, None], (P, 6, H, W)))
    denom = P * 6 * H * W if over == "all" else g_n
    want = a_s / a_n + (g_s / denom if g_n else 0.0)
    out = fake_output(np.zeros((1, H, W)), np.zeros((2, H, W)), r, P)
    assert loss_rel(out, t, over).item() == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("over", ["all", "support"])
def test_relation_loss_with_empty_support(over):
    rng = np.random.default_rng(0)
    t = RelationTargets(np.zeros((2, 7, 3, 3)), np.zeros((2, 3, 3)), 4)
    r = rng.uniform(size=(2, 7, 3, 3))
    out = fake_output(np.zeros((1, 3, 3)), np.zeros((2, 3, 3)), r, 2)
    assert loss_rel(out, t, over).item() == pytest.approx(np.mean(r[:, 0] ** 2), rel=1e-12)


def test_loss_shape_mismatch_is_rejected():
    t = ObjectTargets(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        loss_det(fake_output(np.zeros((3, 3, 3)), np.zeros((2, 3, 3))), t)
    with pytest.raises(ValueError):
        loss_rel(fake_output(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((1, 7, 3, 3))), RelationTargets(np.zeros((2, 7, 3, 3)), np.zeros((2, 3, 3)), 4))


def test_semi_loss_examples():
    a = [Tensor(np.zeros((18, 1, 1)), requires_grad=True)]
    assert loss_semi(a, [np.zeros((18, 1, 1))], 1).item() == 0.0
    assert loss_semi(a, [np.ones((18, 1, 1))], 1).item() == 1.0
    with pytest.raises(ValueError):
        loss_semi(a, [np.ones((18, 2, 1))], 1)
    with pytest.raises(ValueError):
        loss_semi(a, [], 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), det=st.booleans(), rel=st.booleans())
def test_semi_loss_matches_loop_oracle_per_branch(seed, det, rel):
    rng = np.random.default_rng(seed)
    n_det = 2
    shapes = [(4, 2, 3)] * 4
    s = [Tensor(rng.normal(size=sh), requires_grad=True) for sh in shapes]
    t = [rng.normal(size=sh) for sh in shapes]
    chosen = [i for i in range(4) if (i < n_det and det) or (i >= n_det and rel)]
    total = sum(loop_sq(s[i].data, t[i])[0] for i in chosen)
    n = sum(s[i].size for i in chosen)
    want = total / n if n else 0.0
    assert loss_semi(s, t, n_det, det, rel).item() == pytest.approx(want, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_semi_loss_is_zero_iff_offsets_equal(seed):
    rng = np.random.default_rng(seed)
    t = [rng.normal(size=(2, 2, 2)) for _ in range(2)]
    s = [Tensor(x.copy(), requires_grad=True) for x in t]
    assert loss_semi(s, t, 1).item() == 0.0
    s[1].data[0, 0, 0] += 1e-3
    assert loss_semi(s, t, 1).item() > 0.0


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 5.0, mode=0).total == 3.0
    assert total_loss(1.0, 2.0, 5.0, mode=1).total == 8.0
    assert total_loss(1.0, 2.0, 0.0, mode=0).total == total_loss(1.0, 2.0, 0.0, mode=1).total
    with pytest.raises(ValueError):
        total_loss(1.0, 2.0, 5.0, mode=2)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 1e6), st.sampled_from([0, 1]))
def test_total_is_exact_f64_sum(det, rel, semi, mode):
    assert total_loss(det, rel, semi, mode).total == det + rel + semi * mode


def test_mode_zero_blocks_gradient_into_the_semi_term():
    semi_only = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    d = Tensor(np.array(1.5), requires_grad=True)
    semi = (semi_only * semi_only).sum()
    b = total_loss(d * 1.0, d * 2.0, semi, mode=0)
    backward(b.graph)
    assert not np.any(semi_only.grad)
    assert b.total == 4.5


# ------------------------------------------------------------------ end to end


def fixture_item(size=16):
    g = SceneGraph([SceneObject(0, (1.0, 2.0, 6.0, 5.0)), SceneObject(1, (9.0, 8.0, 6.0, 7.0))], [Relation(0, 1, 1)])
    x = np.random.default_rng(0).uniform(size=(3, size, size))
    return TrainItem("fx", x, encode_objects(g, (size, size), 4, 2), encode_relations(g, (size, size), 4, 2))


def test_end_to_end_gradient_matches_finite_differences():
    net = Network(SMALL)
    rng = np.random.default_rng(1)
    for name, p in net.params.items():
        if ".offset" in name:
            p.data = rng.normal(0.0, 0.3, size=p.shape)
    item = fixture_item()
    teacher = ([rng.normal(0, 0.5, size=o.shape) for o in net.forward(item.input).offsets], np.zeros((4, 4, 4)))
    errs = check_gradients(lambda: compute_loss(net, item, 1, teacher).graph, net.params)
    assert max(errs.values()) < 1e-4, errs


def _optimizer(net, regime):
    return make_optimizer(net.params, lr_rule(regime), OptimConfig(kind=regime.optimizer))


def test_one_sample_overfit_decreases_loss():
    net = Network(SMALL)
    regime = Regime(lr_backbone=1e-3, lr_heads=3e-3)
    opt = _optimizer(net, regime)
    item = fixture_item()
    losses = [train_epoch(net, [item], opt, regime).total for _ in range(50)]
    assert all(b < a for a, b in zip(losses[:10], losses[1:11]))
    assert losses[-1] < losses[0]


def test_zero_learning_rate_keeps_parameters():
    net = Network(SMALL)
    before = {k: p.data.copy() for k, p in net.params.items()}
    regime = Regime(lr_backbone=0.0, lr_heads=0.0)
    train_epoch(net, [fixture_item()] * 3, _optimizer(net, regime), regime)
    for k, p in net.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_training_is_bit_identical_across_runs():
    def run():
        net = Network(SMALL)
        regime = Regime(lr_backbone=1e-3, lr_heads=1e-3)
        train_epoch(net, [fixture_item()] * 4, _optimizer(net, regime), regime)
        return net

    a, b = run(), run()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_non_finite_input_aborts_with_sample_id():
    net = Network(SMALL)
    item = fixture_item()
    bad = TrainItem("broken", np.full_like(item.input, np.nan), item.objects, item.relations)
    regime = Regime()
    with pytest.raises(NonFiniteLoss, match="broken"):
        train_epoch(net, [item, bad], _optimizer(net, regime), regime)


def test_regime_rejects_unknown_normalisation():
    with pytest.raises(ValueError):
        Regime(masked_norm="median")
