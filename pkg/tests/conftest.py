"""공용 픽스처: 예제 트리, 무작위 트리 생성기, 템플릿 분류 오라클"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from dhk_hierarchy import CAVITATION_EDGES, LabelTree, build_tree  # noqa: E402

BALANCED_EDGES = (
    ("root", "A"), ("root", "B"),
    ("A", "A1"), ("A", "A2"),
    ("B", "B1"), ("B", "B2"),
)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 학습을 여러 번 돌리는 비교 실험")


@pytest.fixture
def cavitation() -> LabelTree:
    return build_tree(CAVITATION_EDGES)


@pytest.fixture
def balanced() -> LabelTree:
    return build_tree(BALANCED_EDGES)


def ids(tree: LabelTree, *names):
    return [tree.node(n) for n in names]


def random_tree(rng: np.random.Generator, max_nodes: int = 16, max_height: int = 6) -> LabelTree:
    """부모를 이미 만든 노드 중에서 고르는 무작위 트리 (높이 제한)"""
    n = int(rng.integers(2, max_nodes + 1))
    depth = [0]
    edges = []
    for v in range(1, n):
        candidates = [u for u in range(v) if depth[u] < max_height]
        p = int(rng.choice(candidates))
        depth.append(depth[p] + 1)
        edges.append((f"n{p:02d}", f"n{v:02d}"))
    return build_tree(edges)


def brute_force_distance(tree: LabelTree, u: int, v: int) -> int:
    """무방향 트리의 BFS 홉 수"""
    adj = {w: set(tree.children[w]) for w in range(tree.size)}
    for w in range(1, tree.size):
        adj[w].add(tree.parent[w])
    frontier, seen, hops = {u}, {u}, 0
    while v not in frontier:
        frontier = {x for w in frontier for x in adj[w]} - seen
        seen |= frontier
        hops += 1
    return hops


def template_accuracy(features: np.ndarray, leaves: np.ndarray) -> float:
    """리프별 평균 특징 템플릿과의 상관계수 최대로 분류한 정확도"""
    labels = np.unique(leaves)
    templates = np.stack([features[leaves == c].mean(axis=0) for c in labels])

    def zscore(x):
        x = x - x.mean(axis=-1, keepdims=True)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    corr = zscore(features) @ zscore(templates).T
    return float(np.mean(labels[corr.argmax(axis=1)] == leaves))


def balanced_random_tree(rng: np.random.Generator, max_height: int = 4, max_branch: int = 3) -> LabelTree:
    """모든 리프가 같은 깊이인 무작위 트리"""
    height = int(rng.integers(1, max_height + 1))
    edges, frontier, count = [], ["r"], 0
    for _ in range(height):
        nxt = []
        for p in frontier:
            for _ in range(int(rng.integers(1, max_branch + 1))):
                count += 1
                c = f"b{count:03d}"
                edges.append((p, c))
                nxt.append(c)
        frontier = nxt
    return build_tree(edges)
