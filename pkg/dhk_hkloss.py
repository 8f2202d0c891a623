#!/usr/bin/env python3
"""
DHK - 계층 제약 분류 손실
BCE·CCE 기준선, HT 손실(조상 min / 자손 max), Focal HT 손실, 높이 가중치,
LogSumExp 기반 smooth min/max, 점수·로짓에 대한 해석적 기울기

배치 내부 계산은 (B, n) 행렬로 벡터화되어 있고, 단일 샘플 API는 B=1 래퍼다.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from dhk_errors import EmptyInput, GammaOutOfRange, LabelNotInTree, LengthMismatch, NonPositiveBeta
from dhk_hierarchy import HierLabel, LabelTree, WeightScheme, node_weights

logger = logging.getLogger("dhk.hkloss")

EPS = 1e-7
DEFAULT_BETA = 100.0
GAMMA_RANGE = (0.0, 5.0)


class Aggregation(str, Enum):
    HARD = "hard"
    SMOOTH = "smooth"


@dataclass(frozen=True)
class LossMode:
    """min/max 집계 방식. SMOOTH는 β 온도의 LogSumExp"""

    kind: Aggregation = Aggregation.HARD
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        object.__setattr__(self, "kind", Aggregation(self.kind))
        if self.kind is Aggregation.SMOOTH and not self.beta > 0:
            raise NonPositiveBeta(f"beta must be positive, got {self.beta}")

    @classmethod
    def smooth(cls, beta: float = DEFAULT_BETA) -> "LossMode":
        return cls(Aggregation.SMOOTH, beta)


HARD = LossMode()


@dataclass(frozen=True, eq=False)
class LossResult:
    value: float
    grad_scores: np.ndarray
    grad_logits: np.ndarray


LabelLike = Union[HierLabel, Sequence[float], np.ndarray]


# ─── smooth min / max ───────────────────────────────────────────

def _smooth_input(values, beta: float) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInput("smooth aggregation of an empty sequence")
    if not beta > 0:
        raise NonPositiveBeta(f"beta must be positive, got {beta}")
    return x


def smooth_max(values, beta: float) -> float:
    """(1/β)·ln Σ e^{βx}"""
    x = _smooth_input(values, beta)
    return float(logsumexp(beta * x) / beta)


def smooth_min(values, beta: float) -> float:
    """−(1/β)·ln Σ e^{−βx}"""
    x = _smooth_input(values, beta)
    return float(-logsumexp(-beta * x) / beta)


def smooth_max_grad(values, beta: float) -> np.ndarray:
    """∂smooth_max/∂x = softmax(βx)"""
    return softmax(beta * _smooth_input(values, beta))


def smooth_min_grad(values, beta: float) -> np.ndarray:
    """∂smooth_min/∂x = softmax(−βx)"""
    return softmax(-beta * _smooth_input(values, beta))


# ─── 내부: 그룹 인덱스 / 집계 ───────────────────────────────────

@lru_cache(maxsize=64)
def _padded_groups(tree: LabelTree) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """조상/자손 그룹을 (n, L) 인덱스 행렬 + 마스크로"""

    def pad(groups):
        width = max(len(g) for g in groups)
        idx = np.empty((len(groups), width), dtype=np.intp)
        mask = np.zeros((len(groups), width), dtype=bool)
        for i, g in enumerate(groups):
            idx[i, :len(g)] = g
            idx[i, len(g):] = g[0]
            mask[i, :len(g)] = True
        return idx, mask

    a_idx, a_mask = pad(tree.ancestor_positions)
    d_idx, d_mask = pad(tree.descendant_positions)
    return a_idx, a_mask, d_idx, d_mask


def _aggregate(C: np.ndarray, idx: np.ndarray, mask: np.ndarray, mode: LossMode, lowest: bool):
    """그룹별 min(lowest) 또는 max. 반환: 값 (B, n), 그룹 내 가중치 (B, n, L)"""
    G = C[:, idx]
    if mode.kind is Aggregation.HARD:
        G = np.where(mask, G, np.inf if lowest else -np.inf)
        # argmin/argmax는 첫 번째 동률(정규 순서)을 고른다
        arg = (G.argmin(axis=-1) if lowest else G.argmax(axis=-1))[..., None]
        vals = np.take_along_axis(G, arg, axis=-1)[..., 0]
        W = np.zeros_like(G)
        np.put_along_axis(W, arg, 1.0, axis=-1)
        return vals, W
    sign = -1.0 if lowest else 1.0
    Z = sign * mode.beta * G
    lse = logsumexp(Z, axis=-1, b=mask.astype(np.float64))
    vals = sign * lse / mode.beta
    W = np.where(mask, np.exp(Z - lse[..., None]), 0.0)
    return vals, W


def _scatter(W: np.ndarray, g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """grad[b, idx[i, l]] += W[b, i, l] · g[b, i] (고정 순서 합)"""
    B, n = g.shape
    flat = (idx[None, :, :] + n * np.arange(B)[:, None, None]).ravel()
    contrib = (W * g[..., None]).ravel()
    return np.bincount(flat, weights=contrib, minlength=B * n).reshape(B, n)


def _clamp(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """[ε, 1−ε] 클램프와 통과 마스크"""
    return np.clip(x, EPS, 1.0 - EPS), (x > EPS) & (x < 1.0 - EPS)


def _terms(p: np.ndarray, q: np.ndarray, Y: np.ndarray, gamma: float):
    """양성 항 −(1−p)^γ ln p, 음성 항 −q^γ ln(1−q) 와 각 도함수"""
    lp = np.log(p)
    lq = np.log1p(-q)
    pos_mod = np.power(1.0 - p, gamma)
    neg_mod = np.power(q, gamma)
    pos = -pos_mod * lp
    neg = -neg_mod * lq
    d_pos = gamma * np.power(1.0 - p, gamma - 1.0) * lp - pos_mod / p
    d_neg = -gamma * np.power(q, gamma - 1.0) * lq + neg_mod / (1.0 - q)
    positive = Y > 0.5
    terms = np.where(positive, pos, neg)
    return terms, np.where(positive, d_pos, 0.0), np.where(positive, 0.0, d_neg)


def _check_batch(S, Y, n: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if S.shape != Y.shape:
        raise LengthMismatch(f"scores {S.shape} vs labels {Y.shape}")
    if n is not None and S.shape[1] != n:
        raise LengthMismatch(f"expected {n} scores per sample, got {S.shape[1]}")
    return S, Y


def _targets(label: LabelLike) -> np.ndarray:
    if isinstance(label, HierLabel):
        return label.targets
    return np.asarray(label, dtype=np.float64)


def _check_gamma(gamma: float):
    lo, hi = GAMMA_RANGE
    if not lo <= gamma <= hi:
        raise GammaOutOfRange(f"gamma must be in [{lo}, {hi}], got {gamma}")


def _result(per_sample: np.ndarray, grad_S: np.ndarray, S: np.ndarray, single: bool) -> LossResult:
    B = S.shape[0]
    grad_logits = grad_S * S * (1.0 - S)
    if single:
        return LossResult(float(per_sample[0]), grad_S[0], grad_logits[0])
    return LossResult(float(np.sum(per_sample) / B), grad_S / B, grad_logits / B)


# ─── BCE ────────────────────────────────────────────────────────

def _bce(S: np.ndarray, Y: np.ndarray):
    C, keep = _clamp(S)
    terms, d_pos, d_neg = _terms(C, C, Y, 0.0)
    w = np.ones(S.shape[1])
    per_sample = np.sum(w * terms, axis=-1)
    return per_sample, (w * (d_pos + d_neg)) * keep


def bce_loss(scores, label: LabelLike) -> LossResult:
    """Σ −y ln s − (1−y) ln(1−s)"""
    S, Y = _check_batch(scores, _targets(label), None)
    per_sample, grad_S = _bce(S, Y)
    return _result(per_sample, grad_S, S, single=True)


def bce_loss_batch(scores: np.ndarray, targets: np.ndarray) -> LossResult:
    """배치 평균 BCE"""
    S, Y = _check_batch(scores, targets, None)
    per_sample, grad_S = _bce(S, Y)
    return _result(per_sample, grad_S, S, single=False)


# ─── HT / FHT ───────────────────────────────────────────────────

def constrained_scores(tree: LabelTree, scores, label: LabelLike) -> np.ndarray:
    """양성 노드는 조상 min, 음성 노드는 자손 max로 바꾼 점수 ŝ"""
    S, Y = _check_batch(scores, _targets(label), tree.n_scores)
    a_idx, a_mask, d_idx, d_mask = _padded_groups(tree)
    lo, _ = _aggregate(S, a_idx, a_mask, HARD, lowest=True)
    hi, _ = _aggregate(S, d_idx, d_mask, HARD, lowest=False)
    return np.where(Y > 0.5, lo, hi)[0]


def _hier(tree: LabelTree, S: np.ndarray, Y: np.ndarray, gamma: float,
          weights: WeightScheme, mode: LossMode):
    C, keep = _clamp(S)
    a_idx, a_mask, d_idx, d_mask = _padded_groups(tree)
    lo, W_lo = _aggregate(C, a_idx, a_mask, mode, lowest=True)
    hi, W_hi = _aggregate(C, d_idx, d_mask, mode, lowest=False)
    # smooth 집계는 [ε, 1−ε] 밖으로 나갈 수 있다
    p, keep_p = _clamp(lo) if mode.kind is Aggregation.SMOOTH else (lo, True)
    q, keep_q = _clamp(hi) if mode.kind is Aggregation.SMOOTH else (hi, True)

    terms, d_pos, d_neg = _terms(p, q, Y, gamma)
    w = node_weights(tree, weights)
    per_sample = np.sum(w * terms, axis=-1)
    grad_C = _scatter(W_lo, w * d_pos * keep_p, a_idx) + _scatter(W_hi, w * d_neg * keep_q, d_idx)
    return per_sample, grad_C * keep


def ht_loss(tree: LabelTree, scores, label: LabelLike,
            weights: WeightScheme = WeightScheme.NONE, mode: LossMode = HARD) -> LossResult:
    S, Y = _check_batch(scores, _targets(label), tree.n_scores)
    per_sample, grad_S = _hier(tree, S, Y, 0.0, weights, mode)
    return _result(per_sample, grad_S, S, single=True)


def fht_loss(tree: LabelTree, scores, label: LabelLike, gamma: float,
             weights: WeightScheme = WeightScheme.NONE, mode: LossMode = HARD) -> LossResult:
    """양성 항에 (1−min)^γ, 음성 항에 max^γ 조절 인자를 곱한 HT 손실"""
    _check_gamma(gamma)
    S, Y = _check_batch(scores, _targets(label), tree.n_scores)
    per_sample, grad_S = _hier(tree, S, Y, float(gamma), weights, mode)
    return _result(per_sample, grad_S, S, single=True)


def ht_loss_batch(tree: LabelTree, scores: np.ndarray, targets: np.ndarray,
                  weights: WeightScheme = WeightScheme.NONE, mode: LossMode = HARD) -> LossResult:
    S, Y = _check_batch(scores, targets, tree.n_scores)
    per_sample, grad_S = _hier(tree, S, Y, 0.0, weights, mode)
    return _result(per_sample, grad_S, S, single=False)


def fht_loss_batch(tree: LabelTree, scores: np.ndarray, targets: np.ndarray, gamma: float,
                   weights: WeightScheme = WeightScheme.NONE, mode: LossMode = HARD) -> LossResult:
    _check_gamma(gamma)
    S, Y = _check_batch(scores, targets, tree.n_scores)
    per_sample, grad_S = _hier(tree, S, Y, float(gamma), weights, mode)
    return _result(per_sample, grad_S, S, single=False)


def extremum_gap(tree: LabelTree, scores: np.ndarray, targets: np.ndarray) -> float:
    """HARD 집계에서 최솟값/최댓값과 차순위의 최소 간격. 작으면 꺾임 근처"""
    S, Y = _check_batch(scores, targets, tree.n_scores)
    C, _ = _clamp(S)
    a_idx, a_mask, d_idx, d_mask = _padded_groups(tree)
    gap = np.inf
    for idx, mask, active, lowest in ((a_idx, a_mask, Y > 0.5, True),
                                      (d_idx, d_mask, Y <= 0.5, False)):
        multi = mask.sum(axis=1) >= 2
        if not multi.any():
            continue
        G = C[:, idx]
        G = np.where(mask, G, np.inf if lowest else -np.inf)
        G = np.sort(G, axis=-1)
        if lowest:
            diff = G[..., 1] - G[..., 0]
        else:
            diff = G[..., -1] - G[..., -2]
        sel = active & multi[None, :]
        if sel.any():
            gap = min(gap, float(diff[sel].min()))
    return gap


# ─── CCE (리프 softmax) ─────────────────────────────────────────

def _leaf_logits(tree: LabelTree, logits) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if Z.shape[1] != tree.n_scores:
        raise LengthMismatch(f"expected {tree.n_scores} logits per sample, got {Z.shape[1]}")
    return Z[:, tree.leaf_positions]


def leaf_probabilities(tree: LabelTree, logits) -> np.ndarray:
    """리프 로짓만의 softmax (B, 리프 수). 내부 노드 로짓은 쓰지 않는다"""
    return softmax(_leaf_logits(tree, logits), axis=-1)


def _cce(tree: LabelTree, logits, leaves: Sequence[int], single: bool) -> LossResult:
    Z = _leaf_logits(tree, logits)
    leaves = np.atleast_1d(np.asarray(leaves, dtype=np.intp))
    if leaves.size != Z.shape[0]:
        raise LengthMismatch(f"{Z.shape[0]} logit rows vs {leaves.size} labels")
    col = np.searchsorted(tree.leaves, leaves)
    bad = (col >= len(tree.leaves)) | (np.asarray(tree.leaves)[np.minimum(col, len(tree.leaves) - 1)] != leaves)
    if bad.any():
        raise LabelNotInTree(f"labels are not tree leaves: {sorted(set(leaves[bad].tolist()))}")
    rows = np.arange(Z.shape[0])
    log_p = log_softmax(Z, axis=-1)
    per_sample = -log_p[rows, col]
    d_leaf = np.exp(log_p)
    d_leaf[rows, col] -= 1.0
    grad_logits = np.zeros((Z.shape[0], tree.n_scores))
    grad_logits[:, tree.leaf_positions] = d_leaf
    grad_S = np.zeros_like(grad_logits)
    if single:
        return LossResult(float(per_sample[0]), grad_S[0], grad_logits[0])
    B = Z.shape[0]
    return LossResult(float(np.sum(per_sample) / B), grad_S, grad_logits / B)


def cce_loss(tree: LabelTree, logits, leaf: int) -> LossResult:
    """−ln softmax(z_리프)[정답]. 시그모이드 점수를 거치지 않으므로 grad_scores는 0"""
    return _cce(tree, logits, [leaf], single=True)


def cce_loss_batch(tree: LabelTree, logits: np.ndarray, leaves: Sequence[int]) -> LossResult:
    return _cce(tree, logits, leaves, single=False)
