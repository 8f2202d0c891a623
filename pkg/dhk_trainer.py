#!/usr/bin/env python3
"""
DHK - 학습 엔진
tanh 은닉층 + sigmoid 다중 레이블 헤드, 수동 역전파, Adam + 코사인 웜 리스타트,
결합 목적함수 L = FHT(PHW) + α·GTT, 유한 차분 기울기 검사, 체크포인트(DHKM)
"""

import io
import logging
import struct
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from dhk_errors import (
    CheckpointCorrupt,
    ConfigParse,
    DataIOError,
    DimensionMismatch,
    EmptyDataset,
    InvalidShape,
    LabelNotInTree,
    ShapeMismatch,
)
from dhk_hierarchy import LabelTree, WeightScheme, label_matrix
from dhk_hkloss import (
    GAMMA_RANGE,
    Aggregation,
    LossMode,
    bce_loss_batch,
    cce_loss_batch,
    extremum_gap,
    fht_loss_batch,
    leaf_probabilities,
)
from dhk_inference import infer_paths
from dhk_triplet import (
    DistanceMeasure,
    MarginMode,
    MiningMode,
    Triplet,
    gtt_loss,
    hinge_slacks,
    mine_triplets,
)

logger = logging.getLogger("dhk.trainer")

CHECKPOINT_MAGIC = b"DHKM"
KINK_TOL = 1e-4
FD_STEP = 1e-6


class Objective(str, Enum):
    """bce: 노드별 BCE / cce: 리프 softmax CE / ht: γ=0 HT / fht: Focal HT / dhk: FHT + α·GTT"""

    BCE = "bce"
    CCE = "cce"
    HT = "ht"
    FHT = "fht"
    DHK = "dhk"

    @property
    def hierarchical(self) -> bool:
        """HT 계열 손실(조상 min / 자손 max)을 쓰는지"""
        return self in (Objective.HT, Objective.FHT, Objective.DHK)


# ─── 설정 ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = Objective.DHK
    gamma: float = 2.0
    m_eps: float = 0.15
    alpha: float = 0.1
    weight_scheme: WeightScheme = WeightScheme.PHW
    loss_mode: Aggregation = Aggregation.HARD
    beta: float = 100.0
    distance: DistanceMeasure = DistanceMeasure.COSINE
    margin_mode: MarginMode = MarginMode.DYNAMIC
    mining: MiningMode = MiningMode.GROUP
    lr0: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    restart_period: int = 20
    seed: int = 0
    hidden: Tuple[int, ...] = (64, 32)

    def __post_init__(self):
        coerce = {
            "objective": Objective,
            "weight_scheme": WeightScheme,
            "loss_mode": Aggregation,
            "distance": DistanceMeasure,
            "margin_mode": MarginMode,
            "mining": MiningMode,
        }
        for name, enum_cls in coerce.items():
            try:
                object.__setattr__(self, name, enum_cls(getattr(self, name)))
            except ValueError:
                choices = ", ".join(e.value for e in enum_cls)
                raise ConfigParse(name, f"must be one of {choices}, got {getattr(self, name)!r}") from None
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

        lo, hi = GAMMA_RANGE
        if not lo <= self.gamma <= hi:
            raise ConfigParse("gamma", f"must be in [{lo}, {hi}], got {self.gamma}")
        if not 0.0 <= self.alpha <= 0.5:
            raise ConfigParse("alpha", f"must be in [0, 0.5], got {self.alpha}")
        for name in ("m_eps", "beta", "lr0", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigParse(name, f"must be positive, got {getattr(self, name)}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigParse("betas", f"must be two values in [0, 1), got {self.betas}")
        for name in ("batch_size", "restart_period"):
            if getattr(self, name) < 1:
                raise ConfigParse(name, f"must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigParse("epochs", f"must be >= 0, got {self.epochs}")
        if not self.hidden or min(self.hidden) < 2:
            raise ConfigParse("hidden", f"needs >= 1 layer of width >= 2, got {self.hidden}")

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.objective in (Objective.FHT, Objective.DHK) else 0.0

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.objective is Objective.DHK else 0.0

    @property
    def mode(self) -> LossMode:
        return LossMode(self.loss_mode, self.beta)


# ─── 네트워크 ───────────────────────────────────────────────────

@dataclass
class Network:
    """은닉층 (W: out×in, b) 목록 + 선형 헤드. 임베딩 = 마지막 은닉 활성값"""

    layers: List[Tuple[np.ndarray, np.ndarray]]
    head: Tuple[np.ndarray, np.ndarray]

    @property
    def widths(self) -> List[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers] + [self.head[0].shape[0]]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def parameters(self) -> List[np.ndarray]:
        out = []
        for W, b in self.layers + [self.head]:
            out.extend((W, b))
        return out

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @classmethod
    def from_parameters(cls, params: Sequence[np.ndarray]) -> "Network":
        pairs = [(params[i], params[i + 1]) for i in range(0, len(params), 2)]
        return cls(layers=pairs[:-1], head=pairs[-1])


def init_network(in_features: int, layer_widths: Sequence[int], out_nodes: int, seed: int) -> Network:
    """U(−1/√fan_in, 1/√fan_in) 가중치, 0 편향"""
    widths = [int(w) for w in layer_widths]
    if not widths:
        raise InvalidShape("at least one hidden layer is required")
    if min(widths) < 2:
        raise InvalidShape(f"hidden widths must be >= 2, got {widths}")
    if in_features < 1 or out_nodes < 1:
        raise InvalidShape(f"bad input/output size: {in_features} -> {out_nodes}")
    rng = np.random.default_rng(seed)
    dims = [int(in_features)] + widths + [int(out_nodes)]
    pairs = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        pairs.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return Network(layers=pairs[:-1], head=pairs[-1])


@dataclass(eq=False)
class ForwardPass:
    inputs: np.ndarray
    hidden: List[np.ndarray]
    logits_: np.ndarray
    scores_: np.ndarray
    single: bool = False

    def _view(self, x: np.ndarray) -> np.ndarray:
        return x[0] if self.single else x

    @property
    def embedding(self) -> np.ndarray:
        return self._view(self.hidden[-1])

    @property
    def logits(self) -> np.ndarray:
        return self._view(self.logits_)

    @property
    def scores(self) -> np.ndarray:
        return self._view(self.scores_)


def forward(net: Network, features) -> ForwardPass:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != net.widths[0]:
        raise DimensionMismatch(f"network expects {net.widths[0]} features, got {X.shape[1]}")
    hidden, h = [], X
    for W, b in net.layers:
        h = np.tanh(h @ W.T + b)
        hidden.append(h)
    W, b = net.head
    z = h @ W.T + b
    return ForwardPass(X, hidden, z, expit(z), single)


def backward(net: Network, fp: ForwardPass, grad_logits: np.ndarray,
             grad_embedding: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """parameters() 순서의 기울기 목록. FHT/GTT 기울기는 공유 은닉층에서 합산"""
    g = np.atleast_2d(grad_logits)
    W_head, _ = net.head
    grads = [g.T @ fp.hidden[-1], g.sum(axis=0)]
    dh = g @ W_head
    if grad_embedding is not None:
        dh = dh + np.atleast_2d(grad_embedding)
    for li in range(len(net.layers) - 1, -1, -1):
        W, _ = net.layers[li]
        h = fp.hidden[li]
        below = fp.hidden[li - 1] if li > 0 else fp.inputs
        dz = dh * (1.0 - h * h)
        grads = [dz.T @ below, dz.sum(axis=0)] + grads
        dh = dz @ W
    return grads


def flatten_params(params: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def unflatten_params(vector: np.ndarray, like: Sequence[np.ndarray]) -> List[np.ndarray]:
    out, pos = [], 0
    for p in like:
        out.append(vector[pos:pos + p.size].reshape(p.shape).copy())
        pos += p.size
    if pos != vector.size:
        raise ShapeMismatch(f"vector of {vector.size} values for {pos} parameters")
    return out


# ─── 목적함수 ───────────────────────────────────────────────────

@dataclass(eq=False)
class JointLoss:
    value: float
    cls_value: float
    gtt_value: float
    grads: List[np.ndarray]
    forward: ForwardPass
    triplets: List[Triplet] = field(default_factory=list)


def _classification(tree: LabelTree, logits: np.ndarray, leaves: Sequence[int], config: TrainConfig,
                    targets: Optional[np.ndarray] = None):
    if config.objective is Objective.CCE:
        return cce_loss_batch(tree, logits, leaves)
    scores = expit(logits)
    targets = label_matrix(tree, leaves) if targets is None else targets
    if config.objective is Objective.BCE:
        return bce_loss_batch(scores, targets)
    return fht_loss_batch(tree, scores, targets, config.effective_gamma, config.weight_scheme, config.mode)


def joint_loss(tree: LabelTree, net: Network, features: np.ndarray, leaves: Sequence[int],
               config: TrainConfig, mining_seed: int = 0,
               triplets: Optional[List[Triplet]] = None) -> JointLoss:
    """L = 분류 손실(배치 평균) + α·GTT. α=0 이면 트리플렛 경로 전체를 건너뛴다"""
    fp = forward(net, np.atleast_2d(features))
    cls = _classification(tree, fp.logits_, leaves, config)
    alpha = config.effective_alpha
    gtt_value, grad_emb = 0.0, None
    if alpha > 0:
        if triplets is None:
            triplets = mine_triplets(leaves, tree, mining_seed, config.m_eps,
                                     config.margin_mode, config.mining)
        gtt = gtt_loss(fp.hidden[-1], triplets, config.distance)
        gtt_value = gtt.value
        grad_emb = alpha * gtt.grad_embeddings
    grads = backward(net, fp, cls.grad_logits, grad_emb)
    return JointLoss(cls.value + alpha * gtt_value, cls.value, gtt_value, grads, fp, triplets or [])


# ─── 최적화 ─────────────────────────────────────────────────────

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> Tuple[List[np.ndarray], AdamState]:
    """편향 보정 Adam 한 스텝 (새 파라미터/상태 반환)"""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    b1, b2 = betas
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def cosine_lr(epoch: int, lr0: float, period: int) -> float:
    """주기마다 lr0로 재시작하는 코사인 어닐링"""
    return float(lr0 * 0.5 * (1.0 + np.cos(np.pi * (epoch % period) / period)))


# ─── 학습 ───────────────────────────────────────────────────────

@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    leaves: np.ndarray

    def __len__(self) -> int:
        return len(self.leaves)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.leaves[idx])


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    fht: float
    gtt: float
    joint: float
    train_accuracy: float
    eval_accuracy: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        columns = [f.name for f in fields(EpochRecord)]
        return pd.DataFrame([[getattr(r, c) for c in columns] for r in self.records], columns=columns)

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.to_frame().to_csv(buf, index=False, float_format="%.12g", lineterminator="\n")
        return buf.getvalue()


def predict(tree: LabelTree, net: Network, features: np.ndarray,
            objective: Objective = Objective.DHK) -> np.ndarray:
    """리프 예측. cce는 리프 softmax argmax, 나머지는 경로 합 추론"""
    if len(features) == 0:
        return np.zeros(0, dtype=np.intp)
    fp = forward(net, np.atleast_2d(features))
    if Objective(objective) is Objective.CCE:
        best = leaf_probabilities(tree, fp.logits_).argmax(axis=1)
        return np.asarray(tree.leaves, dtype=np.intp)[best]
    return np.array([p.leaf for p in infer_paths(tree, fp.scores_)], dtype=np.intp)


def accuracy(tree: LabelTree, net: Network, data: Optional[Dataset],
             objective: Objective = Objective.DHK) -> float:
    if data is None or len(data) == 0:
        return float("nan")
    return float(np.mean(predict(tree, net, data.features, objective) == data.leaves))


def _check_dataset(tree: LabelTree, data: Dataset):
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    bad = sorted({int(v) for v in data.leaves} - tree.leaf_set)
    if bad:
        raise LabelNotInTree(f"labels are not tree leaves: {bad}")


def train(tree: LabelTree, data: Dataset, config: TrainConfig,
          eval_data: Optional[Dataset] = None) -> Tuple[Network, TrainHistory]:
    """에폭마다 시드 고정 셔플 → 배치별 트리플렛 재샘플링 → Adam"""
    _check_dataset(tree, data)
    net = init_network(data.features.shape[1], config.hidden, tree.n_scores, config.seed)
    history = TrainHistory()
    params = net.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng((config.seed, 1))
    n = len(data)

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.lr0, config.restart_period)
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = data.subset(idx)
            jl = joint_loss(tree, net, batch.features, batch.leaves, config,
                            mining_seed=int(rng.integers(2 ** 31)))
            params, state = adam_step(params, jl.grads, state, lr, config.betas, config.adam_eps)
            net = Network.from_parameters(params)
            sums += len(idx) * np.array([jl.cls_value, jl.gtt_value, jl.value])
            logger.debug("epoch %d batch %d: joint %.6f (%d triplets)",
                         epoch + 1, start // config.batch_size, jl.value, len(jl.triplets))
        fht_mean, gtt_mean, joint_mean = sums / n
        record = EpochRecord(epoch + 1, float(lr), float(fht_mean), float(gtt_mean), float(joint_mean),
                             accuracy(tree, net, data, config.objective),
                             accuracy(tree, net, eval_data, config.objective))
        history.records.append(record)
        logger.info("epoch %3d/%d  lr %.2e  cls %.4f  gtt %.4f  joint %.4f  train %.3f  eval %.3f",
                    record.epoch, config.epochs, record.lr, record.fht, record.gtt, record.joint,
                    record.train_accuracy, record.eval_accuracy)
    return net, history


# ─── 기울기 검사 ────────────────────────────────────────────────

@dataclass(frozen=True)
class GradCase:
    status: str  # "OK" | "FAIL" | "SKIPPED-TIE"
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    checked: int = 0
    skipped_ties: int = 0
    cases: List[GradCase] = field(default_factory=list)

    def passed(self, tol: float = 1e-5) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def _loss_value(tree: LabelTree, net: Network, features: np.ndarray, leaves: Sequence[int],
                config: TrainConfig, triplets: List[Triplet],
                embedding: Optional[np.ndarray] = None, gtt_value: Optional[float] = None,
                targets: Optional[np.ndarray] = None) -> float:
    """역전파 없이 결합 손실 값만. embedding/gtt_value를 주면 은닉층과 GTT 계산을 건너뛴다"""
    if embedding is None:
        fp = forward(net, features)
        embedding, logits = fp.hidden[-1], fp.logits_
    else:
        W, b = net.head
        logits = embedding @ W.T + b
    value = _classification(tree, logits, leaves, config, targets).value
    alpha = config.effective_alpha
    if alpha > 0:
        if gtt_value is None:
            gtt_value = gtt_loss(embedding, triplets, config.distance).value
        value += alpha * gtt_value
    return value


def check_gradient_case(tree: LabelTree, net: Network, features: np.ndarray, leaves: Sequence[int],
                        config: TrainConfig, mining_seed: int = 0, tol: float = 1e-5) -> GradCase:
    """해석적 기울기 vs 중앙 차분. HARD 동률·힌지 경계 근처는 SKIPPED-TIE"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    base = joint_loss(tree, net, features, leaves, config, mining_seed)
    scores = base.forward.scores_
    if config.objective.hierarchical and config.loss_mode is Aggregation.HARD:
        if extremum_gap(tree, scores, label_matrix(tree, leaves)) < KINK_TOL:
            return GradCase("SKIPPED-TIE", float("nan"))
    if base.triplets and config.effective_alpha > 0:
        slacks = hinge_slacks(base.forward.hidden[-1], base.triplets, config.distance)
        if np.any(np.abs(slacks) < KINK_TOL):
            return GradCase("SKIPPED-TIE", float("nan"))

    like = net.parameters()
    theta = flatten_params(like)
    analytic = flatten_params(base.grads)
    numeric = np.empty_like(theta)
    # 헤드 파라미터는 임베딩과 GTT 값을 바꾸지 않는다
    head_start = theta.size - sum(p.size for p in net.head)
    embedding = base.forward.hidden[-1]
    targets = label_matrix(tree, leaves)
    for i in range(theta.size):
        reuse = i >= head_start
        vals = []
        for h in (FD_STEP, -FD_STEP):
            shifted = theta.copy()
            shifted[i] += h
            trial = Network.from_parameters(unflatten_params(shifted, like))
            vals.append(_loss_value(tree, trial, features, leaves, config, base.triplets,
                                    embedding if reuse else None,
                                    base.gtt_value if reuse else None, targets))
        numeric[i] = (vals[0] - vals[1]) / (2.0 * FD_STEP)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    rel = float(np.abs(analytic - numeric).max() / scale)
    return GradCase("OK" if rel < tol else "FAIL", rel)


def gradient_check(tree: LabelTree, config: TrainConfig, trials: int, seed: int,
                   batch: int = 6, in_features: int = 4, hidden: Tuple[int, ...] = (5, 4)) -> GradCheckReport:
    """작은 네트워크(≤ 200 파라미터)에서 결합 손실 기울기를 유한 차분과 비교"""
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    leaves = np.asarray(tree.leaves)
    for trial in range(max(trials, 1)):
        net = init_network(in_features, hidden, tree.n_scores, int(rng.integers(2 ** 31)))
        # 헤드 편향을 흩뿌려 점수 동률을 줄인다
        W, _ = net.head
        net.head = (W, rng.normal(0.0, 1.0, size=W.shape[0]))
        features = rng.normal(0.0, 1.0, size=(batch, in_features))
        batch_leaves = rng.choice(leaves, size=batch)
        case = check_gradient_case(tree, net, features, batch_leaves, config,
                                   mining_seed=int(rng.integers(2 ** 31)))
        report.cases.append(case)
        if case.status == "SKIPPED-TIE":
            report.skipped_ties += 1
            continue
        report.checked += 1
        report.max_rel_error = max(report.max_rel_error, case.rel_error)
    logger.info("기울기 검사: %d건 비교, %d건 동률 제외, 최대 상대 오차 %.3e",
                report.checked, report.skipped_ties, report.max_rel_error)
    return report


# ─── 체크포인트 ─────────────────────────────────────────────────

def save_checkpoint(path, net: Network) -> Path:
    """magic "DHKM" + u32 폭 개수 + u32 폭들 + little-endian float64 파라미터"""
    path = Path(path)
    widths = net.widths
    blob = CHECKPOINT_MAGIC + struct.pack(f"<I{len(widths)}I", len(widths), *widths)
    blob += flatten_params(net.parameters()).astype("<f8").tobytes()
    try:
        path.write_bytes(blob)
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path) -> Network:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorrupt(f"{path}: bad magic bytes")
    (count,) = struct.unpack("<I", blob[4:8])
    head = 8 + 4 * count
    if count < 3 or len(blob) < head:
        raise CheckpointCorrupt(f"{path}: truncated header")
    widths = struct.unpack(f"<{count}I", blob[8:head])
    like = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        like.extend((np.empty((fan_out, fan_in)), np.empty(fan_out)))
    n_params = sum(p.size for p in like)
    if len(blob) != head + 8 * n_params:
        raise CheckpointCorrupt(f"{path}: expected {n_params} parameters for widths {list(widths)}")
    vector = np.frombuffer(blob, dtype="<f8", offset=head).astype(np.float64)
    if not np.all(np.isfinite(vector)):
        raise CheckpointCorrupt(f"{path}: non-finite parameters")
    return Network.from_parameters(unflatten_params(vector, like))


def write_history(path, history: TrainHistory) -> Path:
    path = Path(path)
    try:
        path.write_text(history.to_csv(), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write history {path}: {e}") from e
    return path


def read_history(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise DataIOError(f"cannot read history {path}: {e}") from e
