import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multiexit.data import DatasetSpec, generate_synthetic
from multiexit.errors import DegenerateNetworkError, InvalidInputError, NumericalError
from multiexit.model import BackboneConfig, ExitPlacement, build
from multiexit.numerics import Tape, gradient_check, softmax_rows
from multiexit.training import (
    STRATEGIES,
    TrainConfig,
    TrainStrategy,
    combine_losses,
    exit_weights_entropy,
    exit_weights_subgraph,
    gate_targets,
    loss_and_grad,
    total_loss,
    train,
    weights_from_fractions,
)

TINY = BackboneConfig(text_dim=3, vision_dim=3, stem_width=3, fused_width=4, encoder_layers=12, classes=4)
TINY_DATA = DatasetSpec(classes=4, train=16, val=8, test=8, text_dim=3, vision_dim=3, seed=5)


def _batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.integers(0, 4, size=n)


# weights


def test_weight_of_twenty():
    assert weights_from_fractions([0.05])[0] == 20.0
    assert weights_from_fractions([1.0])[0] == 1.0
    np.testing.assert_array_equal(weights_from_fractions([0.25, 0.5]), [4.0, 2.0])
    with pytest.raises(DegenerateNetworkError):
        weights_from_fractions([0.0, 0.5])


def test_weights_are_reciprocals():
    f = np.random.default_rng(0).uniform(1e-3, 1.0, size=100)
    np.testing.assert_allclose(weights_from_fractions(f) * f, 1.0, atol=1e-12)


def test_subgraph_weights_favour_early_exits():
    net = build(TINY, ExitPlacement("concat_quarter"))
    w = exit_weights_subgraph(net)
    assert w.shape == (5,)
    assert np.all(w > 1) and np.all(np.diff(w) < 0)
    with pytest.raises(InvalidInputError):
        exit_weights_subgraph(build(TINY, ExitPlacement.custom([])))


def _probs_with_entropy(h, k=4):
    # [a, (1-a)/(k-1), ...] has entropy decreasing in a on [1/k, 1]
    lo, hi = 1.0 / k, 1.0 - 1e-15
    for _ in range(200):
        a = 0.5 * (lo + hi)
        p = np.array([a] + [(1 - a) / (k - 1)] * (k - 1))
        ent = -np.sum(p * np.log(p))
        lo, hi = (a, hi) if ent > h else (lo, a)
    return p


def test_entropy_weight_examples():
    p = np.stack([_probs_with_entropy(0.5), _probs_with_entropy(0.5)])[None]
    np.testing.assert_allclose(exit_weights_entropy(p), [0.5, 0.5], atol=1e-12)
    p = np.stack([_probs_with_entropy(0.1), _probs_with_entropy(0.9)])[None]
    lam = exit_weights_entropy(p)
    # 1 - softmax([0.1, 0.9]) by hand
    e1, e9 = math.exp(0.1), math.exp(0.9)
    np.testing.assert_allclose(lam, [1 - e1 / (e1 + e9), 1 - e9 / (e1 + e9)], atol=1e-9)
    np.testing.assert_allclose(lam, [0.690, 0.310], atol=1e-3)
    with pytest.raises(InvalidInputError):
        exit_weights_entropy(np.zeros((3, 0, 4)))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8), st.integers(2, 6)),
              elements=st.floats(-8, 8)))
def test_entropy_weights_sum_and_order(z):
    p = softmax_rows(z)
    lam = exit_weights_entropy(p)
    b = z.shape[1]
    assert abs(lam.sum() - (b - 1)) < 1e-9
    assert np.all((lam >= 0) & (lam <= 1))
    mean_h = -(p * np.log(np.clip(p, 1e-300, None))).sum(-1).mean(0)
    for i in range(b):
        for j in range(b):
            if mean_h[i] < mean_h[j] - 1e-12:
                assert lam[i] >= lam[j]


def test_gate_targets():
    z = np.array([[2.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
    np.testing.assert_array_equal(gate_targets(z, [0, 0, 0]), [1, 0, 1])
    np.testing.assert_array_equal(gate_targets(z, [0, 1, 0]), [1, 1, 1])
    with pytest.raises(InvalidInputError):
        gate_targets(z, [0, 1])


# loss structure


def test_strategy_validation():
    assert TrainStrategy("weighted_entropy", 0.9).gamma == 0.5
    for g in (-0.1, 1.1, float("nan")):
        with pytest.raises(InvalidInputError):
            TrainStrategy("weighted", g)
    with pytest.raises(InvalidInputError):
        TrainStrategy("annealed", 0.5)


def test_combine_losses_examples():
    assert combine_losses(TrainStrategy("uniform"), 0.5, [1.0, 2.0]) == pytest.approx(3.5)
    assert combine_losses(TrainStrategy("weighted", 0.0), 0.7, [5.0, 9.0], [20.0, 2.0]) == pytest.approx(0.7)
    s = TrainStrategy("weighted", 0.5)
    assert combine_losses(s, 1.0, [1.0, 2.0], [4.0, 2.0]) == pytest.approx(0.5 + 0.5 * 8.0)
    s = TrainStrategy("weighted_entropy")
    assert combine_losses(s, 1.0, [1.0], [4.0], [0.25]) == pytest.approx(0.5 + 0.5 * 1.0)


@given(st.lists(st.floats(0, 10), min_size=2, max_size=6), st.data())
def test_weighted_total_swap_symmetry(losses, data):
    w = data.draw(st.lists(st.floats(1, 50), min_size=len(losses), max_size=len(losses)))
    i, j = data.draw(st.tuples(st.integers(0, len(losses) - 1), st.integers(0, len(losses) - 1)))
    s = TrainStrategy("weighted", 0.3)
    l2, w2 = list(losses), list(w)
    l2[i], l2[j] = l2[j], l2[i]
    w2[i], w2[j] = w2[j], w2[i]
    assert combine_losses(s, 1.0, losses, w) == pytest.approx(combine_losses(s, 1.0, l2, w2), rel=1e-12, abs=1e-12)


def test_no_exits_reduces_to_final_ce():
    net = build(TINY, ExitPlacement.custom([]))
    v, t, y = _batch()
    for kind in STRATEGIES:
        tape = Tape()
        out = net.forward(tape, v, t)
        loss, parts = total_loss(TrainStrategy(kind, 0.3), out, y, net)
        assert float(loss.value) == pytest.approx(parts["final"], abs=1e-15)


def test_gamma_zero_is_final_ce_only():
    net = build(TINY, ExitPlacement("concat_quarter"))
    v, t, y = _batch()
    loss, grad, parts = loss_and_grad(net, TrainStrategy("weighted", 0.0), v, t, y)
    assert loss == pytest.approx(parts["final"], abs=1e-15)
    heads = [n for b in range(net.num_exits) for n in net.head_groups(b)]
    for n in heads:
        lo, hi = net.offsets[n]
        assert np.all(grad[lo:hi] == 0)


def test_gamma_one_has_no_final_classifier_gradient():
    net = build(TINY, ExitPlacement("concat_quarter"), seed=2)
    v, t, y = _batch()
    strategy = TrainStrategy("weighted", 1.0)
    _, grad, _ = loss_and_grad(net, strategy, v, t, y)
    lo, hi = net.offsets["final.W"]
    assert np.max(np.abs(grad[lo:hi])) <= 1e-10
    # finite-difference probe on one final-classifier weight
    base = net.params.copy()
    net.params[lo] = base[lo] + 1e-4
    up = loss_and_grad(net, strategy, v, t, y)[0]
    net.params[lo] = base[lo] - 1e-4
    down = loss_and_grad(net, strategy, v, t, y)[0]
    net.params[:] = base
    assert abs((up - down) / 2e-4) <= 1e-10


def test_exit_gradients_stay_inside_subgraph():
    net = build(TINY, ExitPlacement("independent_all"), "gate", seed=1)
    v, t, y = _batch()
    for b in range(net.num_exits):
        net.grad[:] = 0.0
        tape = Tape()
        out = net.forward(tape, v, t)
        loss = tape.add(tape.softmax_cross_entropy(out.exit_logits[b], y),
                        tape.sigmoid_binary_cross_entropy(out.gate_logits[b], np.ones(len(y))))
        tape.backward(loss)
        allowed = set(net.subgraph(b)) | set(net.head_groups(b))
        for name, _ in net.layout:
            if name not in allowed:
                assert not np.any(net.grads[name]), (b, name)
        assert any(np.any(net.grads[n]) for n in net.subgraph(b))


def test_mismatched_labels_rejected():
    net = build(TINY, ExitPlacement("concat_single"))
    v, t, y = _batch()
    with pytest.raises(InvalidInputError):
        loss_and_grad(net, TrainStrategy(), v, t, y[:-1])


@pytest.mark.parametrize("variant", ["independent_all", "concat_all", "concat_single", "concat_quarter", "concat_alternate"])
def test_total_loss_gradients(variant):
    rng = np.random.default_rng(abs(hash(variant)) % 2**32)
    head = "gate" if variant in ("concat_single", "concat_alternate") else "ramp"
    net = build(TINY, ExitPlacement(variant), head, seed=int(rng.integers(1 << 30)))
    v, t, y = _batch(3, seed=int(rng.integers(1 << 30)))
    for kind in STRATEGIES:
        strategy = TrainStrategy(kind, 0.5)
        # lambda and gate targets are constants of the objective; freeze them at the base point
        _, _, parts = loss_and_grad(net, strategy, v, t, y)
        frozen = (parts["entropy_w"], parts["targets"])

        def fn(theta):
            net.params[:] = theta
            loss, grad, _ = loss_and_grad(net, strategy, v, t, y, *frozen)
            return loss, grad

        base = net.params.copy()
        err = gradient_check(fn, base)
        net.params[:] = base
        assert err < 1e-4, (variant, kind, err)


# optimizer loop


@pytest.fixture(scope="module")
def tiny_splits():
    return generate_synthetic(TINY_DATA)


def test_train_is_deterministic(tiny_splits):
    cfg = TrainConfig(epochs=2, seed=4)
    a, ha = train(build(TINY, ExitPlacement("concat_quarter"), seed=1), tiny_splits, TrainStrategy(), cfg)
    b, hb = train(build(TINY, ExitPlacement("concat_quarter"), seed=1), tiny_splits, TrainStrategy(), cfg)
    assert ha.to_jsonl() == hb.to_jsonl()
    assert a.params.tobytes() == b.params.tobytes()
    assert len(ha.records) == 2
    assert all(len(r.weights) == 5 and len(r.val_exit_acc) == 5 for r in ha.records)


def test_zero_learning_rate_leaves_parameters(tiny_splits):
    net = build(TINY, ExitPlacement("concat_quarter"), seed=1)
    before = net.params.tobytes()
    train(net, tiny_splits, TrainStrategy("entropy"), TrainConfig(epochs=1, learning_rate=0.0))
    assert net.params.tobytes() == before


def test_disabled_exit_losses_match_plain_training(tiny_splits):
    cfg = TrainConfig(epochs=3, seed=2)
    _, with_exits = train(build(TINY, ExitPlacement("concat_quarter"), seed=7), tiny_splits, TrainStrategy("weighted", 0.0), cfg)
    _, plain = train(build(TINY, ExitPlacement.custom([]), seed=7), tiny_splits, TrainStrategy("weighted", 0.0), cfg)
    for a, b in zip(with_exits.records, plain.records):
        assert a.final_loss == pytest.approx(b.final_loss, abs=1e-9)
        assert a.val_final_acc == b.val_final_acc


def test_non_finite_loss_aborts_with_location(tiny_splits):
    bad = dict(tiny_splits)
    tr = tiny_splits["train"]
    vision = tr.vision.copy()
    vision[:] = np.nan
    bad["train"] = type(tr)(tr.name, tr.text, vision, tr.labels, tr.ids)
    with pytest.raises(NumericalError, match="epoch 1, batch 1"):
        train(build(TINY, ExitPlacement("concat_single")), bad, TrainStrategy(), TrainConfig(epochs=1))


def test_overlapping_splits_rejected(tiny_splits):
    bad = {"train": tiny_splits["train"], "val": tiny_splits["train"]}
    with pytest.raises(InvalidInputError):
        train(build(TINY, ExitPlacement("concat_single")), bad, TrainStrategy(), TrainConfig(epochs=1))


def test_train_config_validation():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1.0}):
        with pytest.raises(InvalidInputError):
            TrainConfig(**bad)


def test_history_jsonl(tiny_splits, tmp_path):
    _, h = train(build(TINY, ExitPlacement("concat_single")), tiny_splits, TrainStrategy(), TrainConfig(epochs=2))
    path = tmp_path / "h.jsonl"
    h.save(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and '"epoch": 1' in lines[0]
