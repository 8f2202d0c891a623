#!/usr/bin/env python3
"""
DHK - 계층 레이블 트리
LabelTree 생성/검증, 조상/자손, LCA, 트리 거리, 레이블 확장, 경로 열거, 높이 가중치
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from dhk_errors import (
    Cycle,
    DataIOError,
    DuplicateChild,
    EmptyTree,
    InvalidNode,
    MultipleRoots,
    NotALeaf,
    TreeFileError,
)

logger = logging.getLogger("dhk.hierarchy")

ROOT = 0


class WeightScheme(str, Enum):
    """계층 높이 기반 가중치 방식"""

    NONE = "none"
    NHW = "nhw"
    PHW = "phw"


@dataclass(frozen=True)
class LabelTree:
    """정규 순서(BFS, 형제는 이름순)로 인덱싱된 불변 트리. 루트는 항상 0."""

    names: Tuple[str, ...]
    parent: Tuple[int, ...]
    children: Tuple[Tuple[int, ...], ...]
    depth: Tuple[int, ...]
    height: int
    leaves: Tuple[int, ...]
    _index: Dict[str, int] = field(repr=False, compare=False)

    # ─── 기본 조회 ──────────────────────────────────────────────

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def n_scores(self) -> int:
        """점수 벡터 길이 (루트 제외)"""
        return len(self.names) - 1

    def node(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise InvalidNode(f"unknown node name: {name!r}") from None

    def name(self, v: int) -> str:
        self.check(v)
        return self.names[v]

    def check(self, v: int) -> int:
        if not isinstance(v, (int, np.integer)) or not 0 <= v < len(self.names):
            raise InvalidNode(f"node id out of range: {v!r}")
        return int(v)

    def is_leaf(self, v: int) -> bool:
        return not self.children[self.check(v)]

    @cached_property
    def leaf_set(self) -> frozenset:
        return frozenset(self.leaves)

    @cached_property
    def leaf_positions(self) -> np.ndarray:
        """리프의 점수 위치 (정규 순서)"""
        return np.array([v - 1 for v in self.leaves], dtype=np.intp)

    @cached_property
    def is_balanced(self) -> bool:
        """모든 리프가 같은 깊이인지"""
        return len({self.depth[v] for v in self.leaves}) == 1

    # ─── 손실/추론용 캐시 (점수 위치 = 노드 id - 1) ──────────────

    @cached_property
    def ancestor_positions(self) -> Tuple[np.ndarray, ...]:
        return tuple(
            np.array(sorted(u - 1 for u in ancestors(self, v)), dtype=np.intp)
            for v in range(1, self.size)
        )

    @cached_property
    def descendant_positions(self) -> Tuple[np.ndarray, ...]:
        return tuple(
            np.array(sorted(u - 1 for u in descendants(self, v)), dtype=np.intp)
            for v in range(1, self.size)
        )

    @cached_property
    def path_matrix(self) -> np.ndarray:
        """리프 × 비루트 노드 경로 포함 행렬"""
        mat = np.zeros((len(self.leaves), self.n_scores), dtype=np.float64)
        for row, path in enumerate(enumerate_paths(self)):
            for v in path[1:]:
                mat[row, v - 1] = 1.0
        return mat


# ─── 생성 ───────────────────────────────────────────────────────

def _at_edge(error: Exception, index: int) -> Exception:
    """구조 오류에 원인 간선 위치를 붙인다 (파일 줄 번호 복원용)"""
    error.edge_index = index
    return error


def build_tree(edges: Iterable[Tuple[str, str]]) -> LabelTree:
    """(부모, 자식) 이름 쌍으로 LabelTree 생성"""
    edges = [(str(p), str(c)) for p, c in edges]
    if not edges:
        raise EmptyTree("edge list is empty")

    parent_of: Dict[str, str] = {}
    kids: Dict[str, List[str]] = {}
    first_edge: Dict[str, int] = {}
    order: List[str] = []
    for i, (p, c) in enumerate(edges):
        for n in (p, c):
            if n not in kids:
                kids[n] = []
                first_edge[n] = i
                order.append(n)
        if p == c:
            raise _at_edge(Cycle(f"self loop on {p!r}"), i)
        if c in parent_of:
            raise _at_edge(DuplicateChild(
                f"{c!r} already has parent {parent_of[c]!r}, cannot add parent {p!r}"
            ), i)
        parent_of[c] = p
        kids[p].append(c)

    roots = [n for n in order if n not in parent_of]
    if not roots:
        raise _at_edge(Cycle("every node has a parent"), len(edges) - 1)
    if len(roots) > 1:
        raise _at_edge(MultipleRoots(f"roots: {', '.join(roots)}"), first_edge[roots[1]])

    names: List[str] = []
    parent: List[int] = []
    depth: List[int] = []
    queue = deque([(roots[0], 0, 0)])
    while queue:
        n, p_idx, d = queue.popleft()
        idx = len(names)
        names.append(n)
        parent.append(p_idx if idx else 0)
        depth.append(d)
        for c in sorted(kids[n]):
            queue.append((c, idx, d + 1))

    if len(names) != len(order):
        stray = sorted(set(order) - set(names))
        raise _at_edge(Cycle(f"nodes unreachable from root {roots[0]!r}: {', '.join(stray)}"),
                       min(first_edge[n] for n in stray))

    children: List[List[int]] = [[] for _ in names]
    for v in range(1, len(names)):
        children[parent[v]].append(v)

    return LabelTree(
        names=tuple(names),
        parent=tuple(parent),
        children=tuple(tuple(c) for c in children),
        depth=tuple(depth),
        height=max(depth),
        leaves=tuple(v for v in range(len(names)) if not children[v]),
        _index={n: i for i, n in enumerate(names)},
    )


# ─── 조회 ───────────────────────────────────────────────────────

def ancestors(tree: LabelTree, v: int) -> frozenset:
    """v 자신 포함, 루트 제외 조상 집합"""
    v = tree.check(v)
    out = set()
    while v != ROOT:
        out.add(v)
        v = tree.parent[v]
    return frozenset(out)


def descendants(tree: LabelTree, v: int) -> frozenset:
    """v 자신 포함 자손 집합"""
    stack = [tree.check(v)]
    out = set()
    while stack:
        u = stack.pop()
        out.add(u)
        stack.extend(tree.children[u])
    return frozenset(out)


def lca(tree: LabelTree, u: int, v: int) -> int:
    u, v = tree.check(u), tree.check(v)
    while tree.depth[u] > tree.depth[v]:
        u = tree.parent[u]
    while tree.depth[v] > tree.depth[u]:
        v = tree.parent[v]
    while u != v:
        u, v = tree.parent[u], tree.parent[v]
    return u


def tree_distance(tree: LabelTree, u: int, v: int) -> int:
    """ψ(u, v): LCA까지 두 경로 길이의 합"""
    a = lca(tree, u, v)
    return (tree.depth[u] - tree.depth[a]) + (tree.depth[v] - tree.depth[a])


def distance_matrix(tree: LabelTree) -> np.ndarray:
    """전체 노드 쌍의 ψ 행렬"""
    n = tree.size
    # 조상 포함 행렬 (루트 포함)
    anc = np.zeros((n, n), dtype=bool)
    for v in range(n):
        u = v
        anc[v, u] = True
        while u != ROOT:
            u = tree.parent[u]
            anc[v, u] = True
    depth = np.asarray(tree.depth)
    # 공통 조상 중 가장 깊은 것의 깊이
    common = anc[:, None, :] & anc[None, :, :]
    lca_depth = np.where(common, depth[None, None, :], -1).max(axis=2)
    return (depth[:, None] + depth[None, :] - 2 * lca_depth).astype(np.int64)


def supergroup(tree: LabelTree, leaf: int) -> int:
    """리프의 부모 = 상위 그룹 g_s"""
    if not tree.is_leaf(leaf):
        raise NotALeaf(f"{tree.names[leaf]!r} is not a leaf")
    return tree.parent[leaf]


def enumerate_paths(tree: LabelTree) -> List[Tuple[int, ...]]:
    """정규 리프 순서대로 루트→리프 경로"""
    paths = []
    for leaf in tree.leaves:
        path = [leaf]
        while path[-1] != ROOT:
            path.append(tree.parent[path[-1]])
        paths.append(tuple(reversed(path)))
    return paths


# ─── 레이블 ─────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class HierLabel:
    """노드 인덱스 기준 multi-hot 레이블. bits[0](루트)은 항상 True"""

    bits: np.ndarray
    leaf: int

    @property
    def targets(self) -> np.ndarray:
        """손실 계산용 비루트 타깃 (0/1 실수)"""
        return self.bits[1:].astype(np.float64)


def expand_leaf_label(tree: LabelTree, leaf: int) -> HierLabel:
    if not tree.is_leaf(leaf):
        raise NotALeaf(f"{tree.names[leaf]!r} is not a leaf")
    bits = np.zeros(tree.size, dtype=bool)
    bits[ROOT] = True
    for v in ancestors(tree, leaf):
        bits[v] = True
    bits.setflags(write=False)
    return HierLabel(bits=bits, leaf=int(leaf))


def label_matrix(tree: LabelTree, leaves: Sequence[int]) -> np.ndarray:
    """배치 리프 → (B, n_scores) 타깃 행렬"""
    if len(leaves) == 0:
        return np.zeros((0, tree.n_scores))
    return np.stack([expand_leaf_label(tree, v).targets for v in leaves])


# ─── 가중치 ─────────────────────────────────────────────────────

def level_weights(tree: LabelTree, scheme: WeightScheme) -> Dict[int, float]:
    """깊이 레벨 i=1..H 가중치. h_i = i"""
    scheme = WeightScheme(scheme)
    levels = range(1, tree.height + 1)
    if scheme is WeightScheme.NHW:
        return {i: i / tree.height for i in levels}
    if scheme is WeightScheme.PHW:
        total = sum(levels)
        return {i: i / total for i in levels}
    return {i: 1.0 for i in levels}


def node_weights(tree: LabelTree, scheme: WeightScheme) -> np.ndarray:
    """비루트 노드별 가중치 벡터"""
    lw = level_weights(tree, scheme)
    return np.array([lw[tree.depth[v]] for v in range(1, tree.size)], dtype=np.float64)


# ─── 파일 입출력 ────────────────────────────────────────────────

def parse_tree_text(text: str, source="<text>") -> LabelTree:
    """`parent<TAB>child` 한 줄당 간선 하나. 빈 줄과 # 주석은 무시"""
    edges, line_nos = [], []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise TreeFileError(source, line_no, f"expected 'parent<TAB>child', got {line!r}")
        edges.append((parts[0].strip(), parts[1].strip()))
        line_nos.append(line_no)
    try:
        return build_tree(edges)
    except (Cycle, DuplicateChild, MultipleRoots) as e:
        raise TreeFileError(source, line_nos[e.edge_index], str(e)) from e


def load_tree_file(path) -> LabelTree:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot read tree file {path}: {e}") from e
    tree = parse_tree_text(text, source=path)
    logger.debug("트리 로드: %s (노드 %d, H=%d)", path, tree.size, tree.height)
    return tree


def dump_tree(tree: LabelTree) -> str:
    """정규 순서의 간선 목록. parse → dump 는 바이트 단위로 동일"""
    return "".join(f"{tree.names[tree.parent[v]]}\t{tree.names[v]}\n" for v in range(1, tree.size))


def render_tree(tree: LabelTree) -> str:
    """들여쓰기 트리 + 깊이/리프 표시 + 리프 쌍 ψ 표"""
    lines = [f"H={tree.height}  nodes={tree.size}  leaves={len(tree.leaves)}"]

    def walk(v: int):
        marker = "  [leaf]" if not tree.children[v] else ""
        lines.append(f"{'  ' * tree.depth[v]}{tree.names[v]}  (depth {tree.depth[v]}){marker}")
        for c in tree.children[v]:
            walk(c)

    walk(ROOT)

    dist = distance_matrix(tree)
    leaf_names = [tree.names[v] for v in tree.leaves]
    width = max(len(n) for n in leaf_names + ["psi"])
    lines.append("")
    lines.append(f"{'psi':<{width}} " + " ".join(f"{n:>{width}}" for n in leaf_names))
    for v, n in zip(tree.leaves, leaf_names):
        row = " ".join(f"{dist[v, u]:>{width}d}" for u in tree.leaves)
        lines.append(f"{n:<{width}} {row}")
    lines.append(f"max psi = {int(dist[np.ix_(tree.leaves, tree.leaves)].max())}")
    return "\n".join(lines) + "\n"


# ─── 내장 트리 ──────────────────────────────────────────────────

CAVITATION_EDGES = (
    ("root", "cavitation"),
    ("root", "non-cavitation"),
    ("cavitation", "incipient"),
    ("cavitation", "constant"),
    ("cavitation", "choked flow"),
    ("non-cavitation", "turbulent"),
    ("non-cavitation", "no flow"),
)
