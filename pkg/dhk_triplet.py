#!/usr/bin/env python3
"""
DHK - 그룹 트리 트리플렛 손실 (GTT)
상위 그룹 제약 트리플렛 샘플링, 트리 거리 기반 동적 마진, 임베딩 기울기
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from dhk_errors import DimensionMismatch, IndexOutOfRange, InvalidNode, InvalidTriplet, NotALeaf, ZeroVector
from dhk_hierarchy import LabelTree, supergroup, tree_distance

logger = logging.getLogger("dhk.triplet")

DEFAULT_M_EPS = 0.15


class DistanceMeasure(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


class MarginMode(str, Enum):
    DYNAMIC = "dynamic"
    CONSTANT = "constant"


class MiningMode(str, Enum):
    """GROUP: 상위 그룹 제약 / VANILLA: 같은 리프 vs 다른 리프 (고정 마진)"""

    GROUP = "group"
    VANILLA = "vanilla"


@dataclass(frozen=True)
class Triplet:
    anchor_idx: int
    pos_idx: int
    neg_idx: int
    anchor_leaf: int
    pos_leaf: int
    neg_leaf: int
    margin: float


@dataclass(frozen=True, eq=False)
class TripletLossResult:
    value: float
    grad_embeddings: np.ndarray
    active: int


# ─── 마진 ───────────────────────────────────────────────────────

def dynamic_margin(tree: LabelTree, anchor: int, pos: int, neg: int,
                   m_eps: float = DEFAULT_M_EPS) -> Tuple[float, float]:
    """m_σ = (ψ(a,n) − ψ(a,p)) / 2H,  m = m_ε + 0.5·m_σ"""
    try:
        g_a, g_p, g_n = (supergroup(tree, v) for v in (anchor, pos, neg))
    except (NotALeaf, InvalidNode) as e:
        raise InvalidTriplet(str(e)) from e
    if g_a != g_p:
        raise InvalidTriplet(
            f"anchor {tree.names[anchor]!r} and positive {tree.names[pos]!r} have different supergroups"
        )
    if g_a == g_n:
        raise InvalidTriplet(
            f"anchor {tree.names[anchor]!r} and negative {tree.names[neg]!r} share supergroup"
        )
    d_pos = tree_distance(tree, anchor, pos)
    d_neg = tree_distance(tree, anchor, neg)
    if not d_pos < d_neg:
        raise InvalidTriplet(f"psi(anchor, pos)={d_pos} must be < psi(anchor, neg)={d_neg}")
    m_sigma = (d_neg - d_pos) / (2.0 * tree.height)
    return m_eps + 0.5 * m_sigma, m_sigma


# ─── 샘플링 ─────────────────────────────────────────────────────

def mine_triplets(batch_leaves: Sequence[int], tree: LabelTree, rng_seed: int,
                  m_eps: float = DEFAULT_M_EPS,
                  margin_mode: MarginMode = MarginMode.DYNAMIC,
                  mining: MiningMode = MiningMode.GROUP) -> List[Triplet]:
    """앵커마다 양성/음성 하나씩 균등 샘플링. 짝이 없는 앵커는 건너뛴다"""
    margin_mode, mining = MarginMode(margin_mode), MiningMode(mining)
    leaves = np.asarray(batch_leaves, dtype=np.intp)
    if leaves.size < 2:
        return []
    rng = np.random.default_rng(rng_seed)
    if mining is MiningMode.GROUP:
        keys = np.array([supergroup(tree, int(v)) for v in leaves])
    else:
        keys = leaves.copy()

    index = np.arange(leaves.size)
    triplets = []
    for i in range(leaves.size):
        pos_pool = index[(keys == keys[i]) & (index != i)]
        neg_pool = index[keys != keys[i]]
        if pos_pool.size == 0 or neg_pool.size == 0:
            continue
        j = int(rng.choice(pos_pool))
        k = int(rng.choice(neg_pool))
        a, p, n = int(leaves[i]), int(leaves[j]), int(leaves[k])
        if mining is MiningMode.GROUP and margin_mode is MarginMode.DYNAMIC:
            margin, _ = dynamic_margin(tree, a, p, n, m_eps)
        else:
            margin = m_eps
        triplets.append(Triplet(i, j, k, a, p, n, margin))
    logger.debug("트리플렛 %d개 (배치 %d)", len(triplets), leaves.size)
    return triplets


# ─── 거리 ───────────────────────────────────────────────────────

def _distance_grads(a: np.ndarray, b: np.ndarray, measure: DistanceMeasure):
    """d(a, b) 와 ∂d/∂a, ∂d/∂b"""
    if measure is DistanceMeasure.COSINE:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ZeroVector("cosine distance of an all-zero vector")
        ua, ub = a / na, b / nb
        cos = float(ua @ ub)
        # 정규화까지 포함한 연쇄 법칙
        ga = -(ub - cos * ua) / na
        gb = -(ua - cos * ub) / nb
        return 1.0 - cos, ga, gb
    diff = a - b
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        zero = np.zeros_like(a)
        return 0.0, zero, zero
    return d, diff / d, -diff / d


def pair_distance(a, b, measure: DistanceMeasure = DistanceMeasure.COSINE) -> float:
    """COSINE: 1 − cos(a, b) ∈ [0, 2], EUCLIDEAN: ‖a − b‖"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    measure = DistanceMeasure(measure)
    d, _, _ = _distance_grads(a, b, measure)
    if measure is DistanceMeasure.COSINE:
        # 반올림 오차로 [0, 2] 밖으로 나가지 않게
        d = min(max(d, 0.0), 2.0)
    return d


# ─── 손실 ───────────────────────────────────────────────────────

def hinge_slacks(embeddings: np.ndarray, triplets: Sequence[Triplet],
                 measure: DistanceMeasure = DistanceMeasure.COSINE) -> np.ndarray:
    """트리플렛별 d(a,p) − d(a,n) + m"""
    E = np.asarray(embeddings, dtype=np.float64)
    measure = DistanceMeasure(measure)
    return np.array([
        _distance_grads(E[t.anchor_idx], E[t.pos_idx], measure)[0]
        - _distance_grads(E[t.anchor_idx], E[t.neg_idx], measure)[0]
        + t.margin
        for t in triplets
    ])


def gtt_loss(embeddings: np.ndarray, triplets: Sequence[Triplet],
             measure: DistanceMeasure = DistanceMeasure.COSINE) -> TripletLossResult:
    """(1/N)·Σ max(d(a,p) − d(a,n) + m, 0). N = 트리플렛 수"""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2:
        raise DimensionMismatch(f"embeddings must be (N, D), got {E.shape}")
    measure = DistanceMeasure(measure)
    grad = np.zeros_like(E)
    if not triplets:
        return TripletLossResult(0.0, grad, 0)

    total, active = 0.0, 0
    for t in triplets:
        for idx in (t.anchor_idx, t.pos_idx, t.neg_idx):
            if not 0 <= idx < E.shape[0]:
                raise IndexOutOfRange(f"sample index {idx} outside batch of {E.shape[0]}")
        a, p, n = E[t.anchor_idx], E[t.pos_idx], E[t.neg_idx]
        d_ap, ga_p, gp = _distance_grads(a, p, measure)
        d_an, ga_n, gn = _distance_grads(a, n, measure)
        slack = d_ap - d_an + t.margin
        if slack <= 0.0:
            continue
        total += slack
        active += 1
        grad[t.anchor_idx] += ga_p - ga_n
        grad[t.pos_idx] += gp
        grad[t.neg_idx] -= gn
    N = len(triplets)
    return TripletLossResult(total / N, grad / N, active)
