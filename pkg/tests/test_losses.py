import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mose import autodiff as ad
from mose import ot
from mose.autodiff import NumericError, Tape, Tensor
from mose.losses import (IGNORE_INDEX, IOU_EPS, Schedule, all_pairs_loss, anneal, assemble_loss,
                         cost_ce, cost_iou, group_experts, pairwise_cost, soft_gradient)


def onehot(y, c):
    return np.moveaxis(np.eye(c)[y], -1, 0)


def test_cost_iou_extremes():
    y = np.array([[0, 1], [1, 0]])
    assert float(cost_iou(onehot(y, 2), y).value) <= 1e-6
    s = onehot(1 - y, 2)
    assert float(cost_iou(s, y).value) == pytest.approx(1.0, abs=1e-6)


def test_cost_iou_hand_computed():
    # binary: foreground probabilities only
    s = np.zeros((2, 2, 2))
    s[1] = [[0.8, 0.4], [0.1, 0.0]]
    s[0] = 1 - s[1]
    y = np.array([[1, 1], [0, 0]])
    inter, ssum, ysum = 0.8 + 0.4, 1.3, 2.0
    ref = 1 - (inter + IOU_EPS) / (ssum + ysum - inter + IOU_EPS)
    assert float(cost_iou(s, y).value) == pytest.approx(ref, abs=1e-15)


def test_cost_ce_cases():
    y = np.array([[0, 2], [1, 1]])
    assert float(cost_ce(onehot(y, 3), y).value) <= 1e-12 * 4 + 1e-15
    assert float(cost_ce(np.full((3, 2, 2), 1 / 3), y).value) == pytest.approx(np.log(3), abs=1e-15)
    s = np.zeros((2, 1, 3))
    s[1] = [[0.9, 0.2, 0.5]]
    s[0] = 1 - s[1]
    y = np.array([[1, 0, IGNORE_INDEX]])
    ref = -(np.log(0.9) + np.log(0.8)) / 2
    assert float(cost_ce(s, y).value) == pytest.approx(ref, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["ce", "iou"]), st.integers(2, 4))
def test_pairwise_cost_matches_single_pair(seed, kind, c):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 3, 6, c))
    labels = rng.integers(0, c, size=(2, 2, 6))
    labels[0, 0, 0] = IGNORE_INDEX if kind == "ce" else labels[0, 0, 0]
    got = pairwise_cost(Tensor(logits), labels, kind).value
    e = np.exp(logits - logits.max(-1, keepdims=True))
    probs = e / e.sum(-1, keepdims=True)
    fn = cost_ce if kind == "ce" else cost_iou
    for b in range(2):
        for n in range(3):
            for m in range(2):
                ref = fn(probs[b, n].T.reshape(c, 2, 3), labels[b, m].reshape(2, 3)).value
                assert got[b, n, m] == pytest.approx(float(ref), abs=1e-12)


def test_soft_gradient_examples():
    u = np.array([0.1, 0.3, 0.6])
    o = np.array([0.2, 0.2, 0.6])
    np.testing.assert_allclose(soft_gradient(u, o, [[0], [1], [2]]), ot.kl_marginal_grad(o, u))
    g = soft_gradient(u, o, [[0, 1, 2]])
    assert np.all(g == g[0]) and g[0] == pytest.approx(-(1 / 3) / (1 / 3))
    g = soft_gradient(u, o, [[0, 1], [2]])
    np.testing.assert_allclose(g, [-0.2 / 0.2, -0.2 / 0.2, -1.0])


def test_grouping_at_threshold_one_merges_only_duplicates():
    maps = np.zeros((4, 3, 3), dtype=int)
    maps[1, 0, 0] = 1
    maps[2] = maps[1]
    maps[3, 2, 2] = 1
    groups = group_experts(maps, 1.0, 2, [0, 1])
    assert sorted(map(tuple, groups)) == [(0, 1), (2, 3, 4, 5), (6, 7)]
    # lower threshold chains through single linkage
    assert len(group_experts(maps, 0.0, 1, [0, 1])) == 1


def _toy(seed=0, b=2, n=4, m=2, c=3, p=16):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(b, n, p, c))
    labels = rng.integers(0, c, size=(b, m, p))
    v = rng.dirichlet(np.ones(m), size=b)
    u_logits = rng.normal(size=(b, n))
    return logits, labels, v, u_logits


def test_loss_zero_when_costs_vanish_and_u_matches():
    cost = Tensor(np.array([[[0.0, 1.0], [1.0, 0.0]]]))
    v = np.array([[0.4, 0.6]])
    parts = assemble_loss(cost, Tensor(np.array([[0.4, 0.6]])), v, beta=1.0, gamma=1.0)
    assert parts.value == 0.0 and parts.kl == 0.0
    np.testing.assert_array_equal(parts.plans[0], np.diag([0.4, 0.6]))


def test_beta_zero_is_pure_transport():
    logits, labels, v, ul = _toy()
    cost = pairwise_cost(Tensor(logits), labels, "ce")
    u = ad.softmax(Tensor(ul), axis=-1)
    parts = assemble_loss(cost, u, v, beta=0.0, gamma=0.5)
    ref = np.mean([np.sum(parts.plans[i] * cost.value[i]) for i in range(2)])
    assert parts.value == pytest.approx(ref, abs=1e-15)


def test_single_label_transport_is_min_cost():
    logits, labels, _, ul = _toy(m=1)
    cost = pairwise_cost(Tensor(logits), labels, "iou")
    parts = assemble_loss(cost, ad.softmax(Tensor(ul), axis=-1), np.ones((2, 1)), beta=0.0, gamma=1.0)
    assert parts.transport == pytest.approx(cost.value.min(axis=1).mean(), abs=1e-15)


@pytest.mark.parametrize("kind", ["ce", "iou"])
def test_assembled_loss_gradcheck(kind):
    logits, labels, v, ul = _toy(seed=4, b=1, n=4, m=2, p=16)
    cost0 = pairwise_cost(Tensor(logits), labels, kind).value
    plans = [ot.solve_relaxed_greedy(cost0[0], v[0], 0.5).plan]

    def f_logits(x):
        cost = pairwise_cost(x, labels, kind)
        return assemble_loss(cost, ad.softmax(Tensor(ul), axis=-1), v, 1.0, 0.5, plans=plans).loss

    def f_u(x):
        cost = pairwise_cost(Tensor(logits), labels, kind)
        return assemble_loss(cost, ad.softmax(x, axis=-1), v, 1.0, 0.5, plans=plans).loss

    assert ad.gradcheck(f_logits, logits, eps=1e-5) <= 1e-4
    assert ad.gradcheck(f_u, ul, eps=1e-5) <= 1e-4


def test_gradients_split_between_cost_and_gate():
    logits, labels, v, ul = _toy()
    x, w = Tensor(logits, requires_grad=True), Tensor(ul, requires_grad=True)
    with Tape() as tape:
        parts = assemble_loss(pairwise_cost(x, labels, "ce"), ad.softmax(w, axis=-1), v, 0.0, 0.5)
    _, gw = tape.gradient(parts.loss, [x, w])
    assert np.all(gw == 0)  # beta = 0: nothing reaches the gate
    with Tape() as tape:
        parts = assemble_loss(Tensor(pairwise_cost(Tensor(logits), labels, "ce").value),
                              ad.softmax(w, axis=-1), v, 1.0, 0.5)
    (gw,) = tape.gradient(parts.loss, [w])
    assert np.any(gw != 0)


def test_tie_break_perturbation_leaves_gradients_unchanged():
    # two identical predictions: either may receive the label; only P* changes
    logits = np.zeros((1, 2, 4, 2))
    logits[0, :, :, 1] = [0.3, -0.2, 0.5, 0.1]
    labels = np.array([[[1, 0, 1, 1]]])
    u = np.array([[0.5, 0.5]])
    cost = pairwise_cost(Tensor(logits), labels, "ce").value
    assert cost[0, 0, 0] == cost[0, 1, 0]
    grads = []
    for plan in (np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])):
        x, w = Tensor(logits, requires_grad=True), Tensor(u, requires_grad=True)
        with Tape() as tape:
            parts = assemble_loss(pairwise_cost(x, labels, "ce"), w, np.ones((1, 1)), 1.0, 1.0, plans=[plan])
        grads.append(tape.gradient(parts.loss, [x, w]))
    # swapping the tie swaps which sample gets the gradient, and nothing else
    gx0, gw0 = grads[0]
    gx1, gw1 = grads[1]
    np.testing.assert_array_equal(gx0[:, 0], gx1[:, 1])
    np.testing.assert_array_equal(gw0[:, 0], gw1[:, 1])
    # fixed P*: re-running with the same plan reproduces the gradient bit for bit
    x = Tensor(logits, requires_grad=True)
    with Tape() as tape:
        parts = assemble_loss(pairwise_cost(x, labels, "ce"), Tensor(u), np.ones((1, 1)), 1.0, 1.0,
                              plans=[np.array([[1.0], [0.0]])])
    assert np.array_equal(tape.gradient(parts.loss, [x])[0], gx0)


def test_kl_zero_when_gate_matches_marginal():
    cost = Tensor(np.array([[[0.2, 0.9], [0.7, 0.1], [0.5, 0.5]]]))
    v = np.array([[0.3, 0.7]])
    parts = assemble_loss(cost, Tensor(np.array([[0.3, 0.7, 0.0]])), v, 1.0, 1.0)
    assert parts.kl == 0.0
    assert parts.value == pytest.approx(0.3 * 0.2 + 0.7 * 0.1)


def test_large_beta_drives_u_to_oracle_marginal():
    rng = np.random.default_rng(2)
    c = rng.random((1, 5, 3))
    v = np.array([[0.5, 0.3, 0.2]])
    target = ot.solve_exact_lp(c[0], v[0], gamma=1.0).row_marginal
    theta = np.zeros((1, 5))
    m, s = np.zeros_like(theta), np.zeros_like(theta)
    for t in range(1, 3001):
        w = Tensor(theta, requires_grad=True)
        with Tape() as tape:
            parts = assemble_loss(Tensor(c), ad.softmax(w, axis=-1), v, 1e3, 1.0)
        (g,) = tape.gradient(parts.loss, [w])
        m = 0.9 * m + 0.1 * g
        s = 0.999 * s + 0.001 * g * g
        theta = theta - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(s / (1 - 0.999 ** t)) + 1e-8)
    u = ad.softmax(Tensor(theta), axis=-1).value[0]
    assert 0.5 * np.abs(u - target).sum() <= 1e-3


def test_soft_gradient_surrogate_feeds_gate():
    cost = Tensor(np.array([[[0.1, 0.9], [0.8, 0.2], [0.1, 0.9], [0.8, 0.2]]]))
    w = Tensor(np.log([[0.1, 0.2, 0.3, 0.4]]), requires_grad=True)
    groups = [[[0, 1], [2, 3]]]
    with Tape() as tape:
        parts = assemble_loss(cost, ad.softmax(w, axis=-1), np.array([[0.5, 0.5]]), 1.0, 1.0,
                              groups=groups)
    (g,) = tape.gradient(parts.loss, [w])
    u = np.array([0.1, 0.2, 0.3, 0.4])
    o = parts.plans[0].sum(axis=1)
    du = soft_gradient(u, o, groups[0])
    ref = u * (du - np.dot(u, du))  # softmax chain rule
    np.testing.assert_allclose(g[0], ref, atol=1e-15)


def test_nonfinite_loss_reports_diagnostics():
    cost = Tensor(np.array([[[np.nan, 0.1]]]).reshape(1, 2, 1))
    with pytest.raises((NumericError, ValueError)):
        assemble_loss(cost, Tensor(np.array([[0.5, 0.5]])), np.ones((1, 1)), 1.0, 1.0)
    cost = Tensor(np.array([[[np.inf], [0.1]]]))
    plans = [np.array([[1.0], [0.0]])]
    with pytest.raises(NumericError, match="C in"):
        assemble_loss(cost, Tensor(np.array([[0.5, 0.5]])), np.ones((1, 1)), 1.0, 1.0, plans=plans)


def test_all_pairs_loss_value():
    c = np.arange(6.0).reshape(1, 3, 2)
    v = np.array([[0.25, 0.75]])
    assert float(all_pairs_loss(Tensor(c), v).value) == pytest.approx(np.sum(c[0] * v[0] / 3))


def test_anneal_examples():
    assert anneal(0.5, 1.0, 10, 0) == 0.5
    assert anneal(0.5, 1.0, 10, 10) == 1.0 and anneal(0.5, 1.0, 10, 99) == 1.0
    assert anneal(0.5, 1.0, 10, 5) == pytest.approx(0.75, abs=1e-15)
    assert Schedule(1.0, 0.75, 4)(2) == pytest.approx(0.875)
    with pytest.raises(ValueError):
        anneal(0, 1, 5, -1)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 100), st.floats(0, 200))
def test_anneal_is_clamped_between_endpoints(a, b, h, e):
    x = anneal(a, b, h, e)
    assert min(a, b) - 1e-12 <= x <= max(a, b) + 1e-12
