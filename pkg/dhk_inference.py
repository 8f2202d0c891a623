#!/usr/bin/env python3
"""
DHK - 계층 일관 추론과 평가 지표
루트→리프 경로 합 최대화 추론, 리프 수준 정확도/정밀도/재현율/F1
"""

import json
import logging
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from dhk_errors import DataIOError, LengthMismatch, NotALeaf
from dhk_hierarchy import ROOT, LabelTree, enumerate_paths

logger = logging.getLogger("dhk.inference")

# 살아 있는 트리만 기억한다
_warned_unbalanced: "weakref.WeakSet[LabelTree]" = weakref.WeakSet()


@dataclass(frozen=True)
class PathPrediction:
    path: Tuple[int, ...]
    leaf: int
    path_score: float

    @property
    def depth(self) -> int:
        """경로 길이 진단값 (비대칭 트리에서 깊은 리프로 치우치는지 확인용)"""
        return len(self.path) - 1


def _warn_if_unbalanced(tree: LabelTree):
    if not tree.is_balanced and tree not in _warned_unbalanced:
        _warned_unbalanced.add(tree)
        logger.warning("비대칭 트리: 경로 점수 합은 깊은 리프에 유리합니다 (리프 깊이 %s)",
                       sorted({tree.depth[v] for v in tree.leaves}))


def infer_paths(tree: LabelTree, scores: np.ndarray) -> List[PathPrediction]:
    """(B, n_scores) 점수 행렬 → 샘플별 최대 합 경로. 동률은 정규 리프 순서"""
    S = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if S.shape[1] != tree.n_scores:
        raise LengthMismatch(f"expected {tree.n_scores} scores, got {S.shape[1]}")
    _warn_if_unbalanced(tree)
    paths = enumerate_paths(tree)
    totals = S @ tree.path_matrix.T
    best = totals.argmax(axis=1)
    return [PathPrediction(paths[b], tree.leaves[b], float(totals[i, b])) for i, b in enumerate(best)]


def infer_path(tree: LabelTree, scores) -> PathPrediction:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise LengthMismatch(f"expected a single score vector, got shape {s.shape}")
    return infer_paths(tree, s)[0]


def path_probability(tree: LabelTree, scores, leaf: int) -> float:
    """노드 점수를 독립 확률로 볼 때 루트→리프 경로 확률 Π s_v"""
    s = np.asarray(scores, dtype=np.float64)
    v, prob = tree.check(leaf), 1.0
    while v != ROOT:
        prob *= s[v - 1]
        v = tree.parent[v]
    return prob


# ─── 지표 ───────────────────────────────────────────────────────

@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_accuracy: Dict[str, float] = field(default_factory=dict)
    labels: List[str] = field(default_factory=list)
    confusion: List[List[int]] = field(default_factory=list)
    samples: int = 0

    def to_text(self) -> str:
        """`key: value` 한 줄씩"""
        lines = [
            f"samples: {self.samples}",
            f"accuracy: {self.accuracy:.6f}",
            f"precision: {self.precision:.6f}",
            f"recall: {self.recall:.6f}",
            f"f1: {self.f1:.6f}",
        ]
        for name, acc in self.per_class_accuracy.items():
            lines.append(f"class_accuracy[{name}]: {acc:.6f}")
        lines.append(f"confusion_labels: {','.join(self.labels)}")
        for name, row in zip(self.labels, self.confusion):
            lines.append(f"confusion[{name}]: {','.join(str(c) for c in row)}")
        return "\n".join(lines) + "\n"

    def to_record(self) -> dict:
        return {
            "samples": self.samples,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class_accuracy": dict(self.per_class_accuracy),
            "labels": list(self.labels),
            "confusion": [list(r) for r in self.confusion],
        }

    @classmethod
    def from_record(cls, record: dict) -> "MetricsReport":
        return cls(**record)


def compute_metrics(predicted: Sequence[int], truth: Sequence[int], tree: LabelTree) -> MetricsReport:
    """미시 정확도 + 등장한 리프 클래스에 대한 매크로 정밀도/재현율/F1"""
    predicted = [int(v) for v in predicted]
    truth = [int(v) for v in truth]
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(truth)} labels")
    for v in set(predicted) | set(truth):
        if not tree.is_leaf(v):
            raise NotALeaf(f"{tree.names[v]!r} is not a leaf")
    if not truth:
        return MetricsReport(0.0, 0.0, 0.0, 0.0)

    present = sorted(set(predicted) | set(truth))
    cm = confusion_matrix(truth, predicted, labels=present)
    p, r, f1, _ = precision_recall_fscore_support(
        truth, predicted, labels=present, average="macro", zero_division=0
    )
    correct = int(np.trace(cm))
    row_sums = cm.sum(axis=1)
    per_class = {
        tree.names[v]: float(cm[i, i] / row_sums[i])
        for i, v in enumerate(present) if row_sums[i] > 0
    }
    return MetricsReport(
        accuracy=correct / len(truth),
        precision=float(p),
        recall=float(r),
        f1=float(f1),
        per_class_accuracy=per_class,
        labels=[tree.names[v] for v in present],
        confusion=cm.astype(int).tolist(),
        samples=len(truth),
    )


def write_metrics(report: MetricsReport, out_dir, stem: str = "metrics") -> Tuple[Path, Path]:
    """텍스트(key: value)와 JSON 레코드 두 파일로 저장"""
    out_dir = Path(out_dir)
    text_path, json_path = out_dir / f"{stem}.txt", out_dir / f"{stem}.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path.write_text(report.to_text(), encoding="utf-8")
        json_path.write_text(json.dumps(report.to_record(), indent=2, ensure_ascii=False) + "\n",
                             encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write metrics to {out_dir}: {e}") from e
    return text_path, json_path


def read_metrics(path) -> MetricsReport:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return MetricsReport.from_record(json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        raise DataIOError(f"cannot read metrics {path}: {e}") from e
