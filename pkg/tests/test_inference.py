import logging
import weakref

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dhk_inference
from conftest import balanced_random_tree, ids, random_tree
from dhk_errors import DataIOError, LengthMismatch, NotALeaf
from dhk_hierarchy import ROOT, build_tree, enumerate_paths, load_tree_file
from dhk_inference import (
    MetricsReport,
    compute_metrics,
    infer_path,
    infer_paths,
    path_probability,
    read_metrics,
    write_metrics,
)

EXAMPLE_SCORES = np.array([0.9, 0.2, 0.95, 0.3, 0.4, 0.1])


# ─── 경로 추론 ──────────────────────────────────────────────────

def test_infer_example(balanced):
    pred = infer_path(balanced, EXAMPLE_SCORES)
    assert pred.leaf == balanced.node("A1")
    assert pred.path == (ROOT, balanced.node("A"), balanced.node("A1"))
    assert pred.path_score == pytest.approx(1.85)
    assert pred.depth == 2


def test_infer_ties_pick_first_leaf(cavitation):
    pred = infer_path(cavitation, np.full(cavitation.n_scores, 0.5))
    assert pred.leaf == cavitation.leaves[0]


def test_infer_flat_tree_is_argmax():
    flat = build_tree([("root", "x"), ("root", "y"), ("root", "z")])
    assert infer_path(flat, [0.1, 0.8, 0.3]).leaf == flat.node("y")


def test_infer_length_mismatch(cavitation):
    with pytest.raises(LengthMismatch):
        infer_path(cavitation, [0.5, 0.5])
    with pytest.raises(LengthMismatch):
        infer_path(cavitation, np.zeros((2, cavitation.n_scores)))


def test_unbalanced_tree_warns_once(caplog, monkeypatch):
    from pathlib import Path
    monkeypatch.setattr(dhk_inference, "_warned_unbalanced", weakref.WeakSet())
    tree = load_tree_file(Path(__file__).resolve().parent.parent / "trees" / "pub.tsv")
    with caplog.at_level(logging.WARNING, logger="dhk.inference"):
        infer_paths(tree, np.full((3, tree.n_scores), 0.5))
        infer_paths(tree, np.full((1, tree.n_scores), 0.5))
    warnings = [r for r in caplog.records if r.name == "dhk.inference"]
    assert len(warnings) == 1
    assert "비대칭" in warnings[0].getMessage()


def test_balanced_tree_does_not_warn(cavitation, caplog, monkeypatch):
    monkeypatch.setattr(dhk_inference, "_warned_unbalanced", weakref.WeakSet())
    with caplog.at_level(logging.WARNING, logger="dhk.inference"):
        infer_paths(cavitation, np.full((2, cavitation.n_scores), 0.5))
    assert not [r for r in caplog.records if r.name == "dhk.inference"]


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_infer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, max_nodes=40)
    S = rng.uniform(size=(4, tree.n_scores))
    for s, pred in zip(S, infer_paths(tree, S)):
        totals = [sum(s[v - 1] for v in path[1:]) for path in enumerate_paths(tree)]
        best = int(np.argmax(totals))
        assert pred.leaf == tree.leaves[best]
        assert pred.path_score == pytest.approx(totals[best])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(-16, 16))
def test_constant_shift_keeps_path_on_uniform_depth_trees(seed, k):
    rng = np.random.default_rng(seed)
    tree = balanced_random_tree(rng)
    assert tree.is_balanced
    S = rng.uniform(size=(4, tree.n_scores))
    before = [p.path for p in infer_paths(tree, S)]
    after = [p.path for p in infer_paths(tree, S + k / 8.0)]
    assert before == after


def test_path_probability_telescopes(cavitation):
    rng = np.random.default_rng(1)
    s = rng.uniform(0.05, 0.95, size=cavitation.n_scores)
    inc, cav = ids(cavitation, "incipient", "cavitation")
    prob = path_probability(cavitation, s, inc)
    # P(inc) = P(cav) · P(inc | cav)
    conditional = s[inc - 1]
    assert np.log(prob) == pytest.approx(np.log(s[cav - 1]) + np.log(conditional), abs=1e-12)


# ─── 지표 ───────────────────────────────────────────────────────

def test_metrics_perfect(cavitation):
    leaves = list(cavitation.leaves)
    report = compute_metrics(leaves, leaves, cavitation)
    assert (report.accuracy, report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0, 1.0)


def test_metrics_four_class(cavitation):
    c1, c2, c3 = cavitation.leaves[:3]
    report = compute_metrics([c1, c2, c2, c3], [c1, c1, c2, c3], cavitation)
    assert report.accuracy == 0.75
    # 정밀도 (1, 1/2, 1), 재현율 (1/2, 1, 1)
    assert report.precision == pytest.approx((1 + 0.5 + 1) / 3)
    assert report.recall == pytest.approx((0.5 + 1 + 1) / 3)
    assert report.per_class_accuracy[cavitation.names[c1]] == 0.5


def test_metrics_constant_prediction(cavitation):
    c1, c2 = cavitation.leaves[:2]
    report = compute_metrics([c1] * 4, [c1, c1, c2, c2], cavitation)
    assert report.accuracy == 0.5
    assert report.recall == 0.5


def test_metrics_errors(cavitation):
    with pytest.raises(LengthMismatch):
        compute_metrics([cavitation.leaves[0]], [], cavitation)
    with pytest.raises(NotALeaf):
        compute_metrics([1], [1], cavitation)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_metrics_agree_with_naive_counting(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    n = int(rng.integers(1, 30))
    truth = rng.choice(tree.leaves, size=n)
    pred = rng.choice(tree.leaves, size=n)
    report = compute_metrics(pred, truth, tree)
    classes = sorted(set(truth) | set(pred))
    P, R, F = [], [], []
    for c in classes:
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        P.append(p)
        R.append(r)
        F.append(2 * p * r / (p + r) if p + r else 0.0)
    assert report.accuracy == pytest.approx(np.mean(pred == truth))
    assert report.precision == pytest.approx(np.mean(P))
    assert report.recall == pytest.approx(np.mean(R))
    assert report.f1 == pytest.approx(np.mean(F))


def test_metrics_files(tmp_path, cavitation):
    c1, c2 = cavitation.leaves[:2]
    report = compute_metrics([c1, c2, c2], [c1, c1, c2], cavitation)
    text_path, json_path = write_metrics(report, tmp_path)
    text = text_path.read_text(encoding="utf-8")
    assert "accuracy: 0.666667" in text
    assert text.startswith("samples: 3\n")
    again = read_metrics(json_path)
    assert isinstance(again, MetricsReport)
    assert again.to_record() == report.to_record()
    with pytest.raises(DataIOError):
        read_metrics(tmp_path / "missing.json")
