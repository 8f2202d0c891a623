import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from conftest import random_tree
from dhk_errors import EmptyInput, GammaOutOfRange, LabelNotInTree, LengthMismatch, NonPositiveBeta
from dhk_hierarchy import WeightScheme, ancestors, build_tree, descendants, expand_leaf_label, label_matrix
from dhk_hkloss import (
    HARD,
    LossMode,
    bce_loss,
    bce_loss_batch,
    cce_loss,
    cce_loss_batch,
    constrained_scores,
    extremum_gap,
    fht_loss,
    fht_loss_batch,
    ht_loss,
    ht_loss_batch,
    leaf_probabilities,
    smooth_max,
    smooth_max_grad,
    smooth_min,
    smooth_min_grad,
)

# 점수 위치 순서: A, B, A1, A2, B1, B2
EXAMPLE_SCORES = np.array([0.9, 0.2, 0.95, 0.3, 0.4, 0.1])


@pytest.fixture
def a1_label(balanced):
    return expand_leaf_label(balanced, balanced.node("A1"))


# ─── BCE ────────────────────────────────────────────────────────

def test_bce_symmetric_point():
    assert bce_loss([0.5], [1.0]).value == pytest.approx(np.log(2), abs=1e-12)


def test_bce_perfect_prediction():
    assert bce_loss([1.0, 0.0], [1.0, 0.0]).value < 1e-6


def test_bce_matches_hand_sum(balanced, a1_label):
    y = a1_label.targets
    s = EXAMPLE_SCORES
    expected = np.sum(-y * np.log(s) - (1 - y) * np.log(1 - s))
    assert bce_loss(s, a1_label).value == pytest.approx(expected, rel=1e-12)


def test_bce_length_mismatch():
    with pytest.raises(LengthMismatch):
        bce_loss([0.5, 0.5], [1.0])


# ─── constrained scores / HT ────────────────────────────────────

def test_constrained_scores_example(balanced, a1_label):
    out = constrained_scores(balanced, EXAMPLE_SCORES, a1_label)
    np.testing.assert_allclose(out, [0.9, 0.4, 0.9, 0.3, 0.4, 0.1])


def test_constrained_scores_fixed_point(balanced, a1_label):
    consistent = np.array([0.9, 0.4, 0.8, 0.3, 0.35, 0.1])
    np.testing.assert_array_equal(constrained_scores(balanced, consistent, a1_label), consistent)


def test_constrained_scores_flat_tree():
    flat = build_tree([("root", "x"), ("root", "y"), ("root", "z")])
    s = np.array([0.7, 0.2, 0.4])
    np.testing.assert_array_equal(constrained_scores(flat, s, [0.0, 1.0, 0.0]), s)


def test_ht_example_value(balanced, a1_label):
    expected = 2 * -np.log(0.9) + -np.log(0.7) + 2 * -np.log(0.6) + -np.log(0.9)
    assert expected == pytest.approx(1.69441, abs=1e-5)
    assert ht_loss(balanced, EXAMPLE_SCORES, a1_label).value == pytest.approx(expected, rel=1e-12)


def test_ht_perfect_prediction(balanced, a1_label):
    assert ht_loss(balanced, a1_label.targets, a1_label).value < 1e-5


def test_ht_equals_bce_on_flat_tree():
    flat = build_tree([("root", "x"), ("root", "y"), ("root", "z")])
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = rng.uniform(0.01, 0.99, size=3)
        y = np.eye(3)[rng.integers(3)]
        ht, bce = ht_loss(flat, s, y), bce_loss(s, y)
        assert ht.value == bce.value
        np.testing.assert_array_equal(ht.grad_logits, bce.grad_logits)


def test_ht_weights(balanced, a1_label):
    nhw = ht_loss(balanced, EXAMPLE_SCORES, a1_label, WeightScheme.NHW).value
    # 깊이 1 항(A, B)은 절반 가중치
    expected = 0.5 * (-np.log(0.9) - np.log(0.6)) + (-np.log(0.9) - np.log(0.7) - np.log(0.6) - np.log(0.9))
    assert nhw == pytest.approx(expected, rel=1e-12)


# ─── FHT ────────────────────────────────────────────────────────

def test_fht_gamma_zero_is_ht(balanced, a1_label):
    assert fht_loss(balanced, EXAMPLE_SCORES, a1_label, 0.0).value == pytest.approx(
        ht_loss(balanced, EXAMPLE_SCORES, a1_label).value, abs=1e-12)


def test_fht_example_value(balanced, a1_label):
    pos = 0.1 ** 2 * -np.log(0.9)
    assert pos == pytest.approx(1.0536e-3, rel=1e-4)
    neg = lambda q: q ** 2 * -np.log(1 - q)  # noqa: E731
    expected = 2 * pos + neg(0.3) + 2 * neg(0.4) + neg(0.1)
    assert fht_loss(balanced, EXAMPLE_SCORES, a1_label, 2.0).value == pytest.approx(expected, rel=1e-12)


def test_fht_vanishes_at_one():
    flat = build_tree([("root", "x")])
    assert fht_loss(flat, [1.0], [1.0], 2.0).value < 1e-12


@pytest.mark.parametrize("gamma", [-0.1, 5.5])
def test_fht_gamma_range(balanced, a1_label, gamma):
    with pytest.raises(GammaOutOfRange):
        fht_loss(balanced, EXAMPLE_SCORES, a1_label, gamma)


def test_length_mismatch(balanced, a1_label):
    with pytest.raises(LengthMismatch):
        ht_loss(balanced, EXAMPLE_SCORES[:5], a1_label.targets[:5])


# ─── smooth min / max ───────────────────────────────────────────

def test_smooth_single_value():
    assert smooth_min([0.37], 5.0) == pytest.approx(0.37, abs=1e-15)
    assert smooth_max([0.37], 5.0) == pytest.approx(0.37, abs=1e-15)


def test_smooth_min_bound():
    v = smooth_min([0.2, 0.8], 50.0)
    assert 0.2 - np.log(2) / 50 <= v <= 0.2


def test_smooth_max_hard_limit():
    assert smooth_max([0.3, 0.7], 1e6) == pytest.approx(0.7, abs=1e-5)


def test_smooth_errors():
    with pytest.raises(EmptyInput):
        smooth_min([], 10.0)
    with pytest.raises(NonPositiveBeta):
        smooth_max([0.1], 0.0)
    with pytest.raises(NonPositiveBeta):
        LossMode.smooth(-1.0)


def test_smooth_grads_are_softmax_weights():
    g = smooth_max_grad([0.1, 0.5, 0.5], 30.0)
    assert g.sum() == pytest.approx(1.0)
    assert g[1] == pytest.approx(g[2])
    assert smooth_min_grad([0.1, 0.5], 30.0).argmax() == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.floats(1.0, 1e4))
def test_smooth_within_log_n_over_beta(values, beta):
    n = len(values)
    assert max(values) - 1e-12 <= smooth_max(values, beta) <= max(values) + np.log(n) / beta + 1e-12
    assert min(values) - np.log(n) / beta - 1e-12 <= smooth_min(values, beta) <= min(values) + 1e-12


# ─── HARD / SMOOTH 전환 ─────────────────────────────────────────

def test_smooth_close_to_hard(balanced, a1_label):
    beta = 1e4
    hard = ht_loss(balanced, EXAMPLE_SCORES, a1_label).value
    smooth = ht_loss(balanced, EXAMPLE_SCORES, a1_label, mode=LossMode.smooth(beta)).value
    # 항마다 ln n / β 이하의 값 차이, −ln 의 기울기는 최대 1/0.6
    assert abs(hard - smooth) < 6 * np.log(4) / beta / 0.6


def test_hard_tie_routes_to_first(balanced, a1_label):
    s = EXAMPLE_SCORES.copy()
    s[2] = 0.9  # A1 == A
    grad = ht_loss(balanced, s, a1_label).grad_scores
    assert grad[2] == 0.0
    assert grad[0] == pytest.approx(2 * -1 / 0.9)


def test_smooth_tie_splits_equally(balanced, a1_label):
    s = EXAMPLE_SCORES.copy()
    s[2] = 0.9
    grad = ht_loss(balanced, s, a1_label, mode=LossMode.smooth(50.0)).grad_scores
    assert grad[2] < 0.0
    # A 자신의 항(−1/0.9) + A1 항의 절반
    assert grad[0] == pytest.approx(-1 / 0.9 + grad[2], rel=1e-12)


# ─── 성질 ───────────────────────────────────────────────────────

@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0.0, 1.0, 2.0, 5.0]),
       st.sampled_from(list(WeightScheme)))
def test_losses_are_non_negative(seed, gamma, weights):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    s = rng.uniform(0.0, 1.0, size=tree.n_scores)
    label = expand_leaf_label(tree, int(rng.choice(tree.leaves)))
    assert fht_loss(tree, s, label, gamma, weights).value >= 0.0
    assert fht_loss(tree, s, label, gamma, weights, LossMode.smooth(20.0)).value >= 0.0
    assert bce_loss(s, label).value >= 0.0


def _fd_grad_logits(f, z, h=1e-6):
    out = np.empty_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        out[i] = (f(zp) - f(zm)) / (2 * h)
    return out


@pytest.mark.parametrize("mode", [HARD, LossMode.smooth(20.0)], ids=["hard", "smooth"])
@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0, 5.0])
def test_grad_logits_match_finite_differences(mode, gamma):
    rng = np.random.default_rng(int(gamma * 10) + (mode is HARD))
    checked = 0
    for _ in range(50):
        tree = random_tree(rng)
        z = rng.normal(0.0, 1.5, size=tree.n_scores)
        label = expand_leaf_label(tree, int(rng.choice(tree.leaves)))
        if mode is HARD and extremum_gap(tree, expit(z), label.targets) < 1e-3:
            continue
        res = fht_loss(tree, expit(z), label, gamma, WeightScheme.PHW, mode)
        numeric = _fd_grad_logits(
            lambda zz: fht_loss(tree, expit(zz), label, gamma, WeightScheme.PHW, mode).value, z)
        scale = max(np.abs(numeric).max(), np.abs(res.grad_logits).max(), 1e-8)
        assert np.abs(numeric - res.grad_logits).max() / scale < 1e-5
        checked += 1
    assert checked > 10


def test_batch_is_mean_of_samples(balanced):
    rng = np.random.default_rng(0)
    leaves = [balanced.node(n) for n in ("A1", "B2", "A2")]
    S = rng.uniform(0.05, 0.95, size=(3, balanced.n_scores))
    Y = label_matrix(balanced, leaves)
    batch = fht_loss_batch(balanced, S, Y, 2.0, WeightScheme.PHW)
    singles = [fht_loss(balanced, S[i], Y[i], 2.0, WeightScheme.PHW) for i in range(3)]
    assert batch.value == pytest.approx(np.mean([r.value for r in singles]), rel=1e-12)
    np.testing.assert_allclose(batch.grad_scores, np.stack([r.grad_scores for r in singles]) / 3)
    assert ht_loss_batch(balanced, S, Y).value == pytest.approx(
        fht_loss_batch(balanced, S, Y, 0.0).value, abs=1e-12)
    assert bce_loss_batch(S, Y).value > 0.0


def test_constrained_scores_follow_ancestor_min_and_descendant_max():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        tree = random_tree(rng)
        s = rng.uniform(0.0, 1.0, size=tree.n_scores)
        label = expand_leaf_label(tree, int(rng.choice(tree.leaves)))
        hat = constrained_scores(tree, s, label)
        for v in range(1, tree.size):
            if label.targets[v - 1] > 0.5:
                expected = min(s[u - 1] for u in ancestors(tree, v))
            else:
                expected = max(s[u - 1] for u in descendants(tree, v))
            assert hat[v - 1] == expected


@pytest.mark.parametrize("mode", [HARD, LossMode.smooth(20.0)], ids=["hard", "smooth"])
def test_gradient_descent_on_logits_decreases_fht(mode):
    rng = np.random.default_rng(7)
    for _ in range(30):
        tree = random_tree(rng)
        label = expand_leaf_label(tree, int(rng.choice(tree.leaves)))
        z = rng.normal(0.0, 1.0, size=tree.n_scores)
        losses = []
        for _ in range(200):
            res = fht_loss(tree, expit(z), label, 2.0, WeightScheme.PHW, mode)
            losses.append(res.value)
            z = z - 0.05 * res.grad_logits
        assert np.all(np.diff(losses) < 0.0)


# ─── CCE ────────────────────────────────────────────────────────

def test_cce_uniform_logits(balanced):
    res = cce_loss(balanced, np.zeros(balanced.n_scores), balanced.node("B1"))
    assert res.value == pytest.approx(np.log(4), rel=1e-12)


def test_cce_ignores_internal_logits(balanced):
    a1 = balanced.node("A1")
    z = np.arange(balanced.n_scores, dtype=float)
    moved = z.copy()
    moved[[balanced.node("A") - 1, balanced.node("B") - 1]] += 5.0
    res = cce_loss(balanced, z, a1)
    assert cce_loss(balanced, moved, a1).value == pytest.approx(res.value, rel=1e-12)
    internal = [v - 1 for v in range(1, balanced.size) if not balanced.is_leaf(v)]
    assert np.all(res.grad_logits[internal] == 0.0)
    assert np.all(res.grad_scores == 0.0)


def test_leaf_probabilities_sum_to_one(cavitation):
    rng = np.random.default_rng(3)
    P = leaf_probabilities(cavitation, rng.normal(size=(5, cavitation.n_scores)))
    assert P.shape == (5, len(cavitation.leaves))
    np.testing.assert_allclose(P.sum(axis=1), 1.0)


def test_cce_grad_logits_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(30):
        tree = random_tree(rng)
        z = rng.normal(0.0, 2.0, size=tree.n_scores)
        leaf = int(rng.choice(tree.leaves))
        res = cce_loss(tree, z, leaf)
        numeric = _fd_grad_logits(lambda zz: cce_loss(tree, zz, leaf).value, z)
        scale = max(np.abs(numeric).max(), np.abs(res.grad_logits).max(), 1e-8)
        assert np.abs(numeric - res.grad_logits).max() / scale < 1e-6


def test_cce_batch_is_mean_of_samples(cavitation):
    rng = np.random.default_rng(5)
    leaves = list(cavitation.leaves[:3])
    Z = rng.normal(size=(3, cavitation.n_scores))
    batch = cce_loss_batch(cavitation, Z, leaves)
    singles = [cce_loss(cavitation, Z[i], leaves[i]) for i in range(3)]
    assert batch.value == pytest.approx(np.mean([r.value for r in singles]), rel=1e-12)
    np.testing.assert_allclose(batch.grad_logits, np.stack([r.grad_logits for r in singles]) / 3)


def test_cce_errors(balanced):
    with pytest.raises(LabelNotInTree):
        cce_loss(balanced, np.zeros(balanced.n_scores), balanced.node("A"))
    with pytest.raises(LengthMismatch):
        cce_loss(balanced, np.zeros(3), balanced.node("A1"))
    with pytest.raises(LengthMismatch):
        cce_loss_batch(balanced, np.zeros((2, balanced.n_scores)), [balanced.node("A1")])
