#!/usr/bin/env python3
"""
DHK - 명령행 도구

사용법:
  python3 dhk_cli.py gen-data  --tree trees/cavitation.tsv --per-leaf 60 --out out/dataset.tsv
  python3 dhk_cli.py train     --config dhk_config.sample.conf
  python3 dhk_cli.py eval      --checkpoint out/model.dhkm --data out/dataset.tsv
  python3 dhk_cli.py infer     --checkpoint out/model.dhkm --data out/dataset.tsv --line 3
  python3 dhk_cli.py infer     --checkpoint out/cce/model.dhkm --data out/dataset.tsv --line 3 --loss cce
  python3 dhk_cli.py grad-check --trials 200
  python3 dhk_cli.py tree-show --tree trees/cavitation.tsv
  python3 dhk_cli.py compare   --config dhk_config.sample.conf --seeds 5 --noise-ratios 0,0.1

종료 코드: 0 성공, 1 검증/파싱 오류, 2 입출력 오류, 3 내부 불변식 위반
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from dhk_config import RunConfig, load_run_config, save_conf
from dhk_errors import ConfigParse, DataIOError, DHKError, EmptyDataset
from dhk_hierarchy import (
    CAVITATION_EDGES,
    LabelTree,
    WeightScheme,
    build_tree,
    enumerate_paths,
    load_tree_file,
    render_tree,
)
from dhk_hkloss import Aggregation, leaf_probabilities
from dhk_inference import compute_metrics, infer_path, write_metrics
from dhk_signal import (
    SignalStream,
    downsample,
    flip_labels,
    parse_record,
    preprocess,
    read_dataset,
    synth_dataset,
    write_dataset,
)
from dhk_trainer import (
    Dataset,
    Objective,
    forward,
    gradient_check,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
    write_history,
)

logger = logging.getLogger("dhk.cli")

GRAD_TOL = 1e-5


# ─── 공통 파이프라인 ────────────────────────────────────────────

def featurize(streams: Sequence[SignalStream], cfg: RunConfig) -> Dataset:
    """다운샘플 → 슬라이딩 윈도우 → STFT → dB → 밴드 특징"""
    if not streams:
        raise EmptyDataset("dataset has no records")
    if cfg.downsample > 1:
        streams = [downsample(s, cfg.downsample) for s in streams]
    window = cfg.window or min(len(s.samples) for s in streams)
    step = cfg.step or window
    features, leaves = preprocess(streams, window, step, cfg.stft_window, cfg.stft_hop,
                                  cfg.n_bands, cfg.window_fn)
    return Dataset(features, leaves)


def stratified_split(streams: Sequence[SignalStream], test_ratio: float, seed: int):
    """리프별 시드 고정 셔플 후 test_ratio 만큼 테스트로 (입력 순서 유지).
    스트림이 2개 이상인 리프는 학습/테스트 양쪽에 최소 1개씩 남긴다."""
    rng = np.random.default_rng((seed, 2))
    labels = np.array([s.leaf_label for s in streams])
    test = np.zeros(len(streams), dtype=bool)
    for leaf in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == leaf))
        n_test = int(round(test_ratio * idx.size))
        if idx.size >= 2:
            n_test = min(max(n_test, 1), idx.size - 1)
        test[idx[:n_test]] = True
    return [s for s, t in zip(streams, test) if not t], [s for s, t in zip(streams, test) if t]


def _load_tree(cfg: RunConfig) -> LabelTree:
    return load_tree_file(cfg.require_file("tree_path"))


def _load_streams(cfg: RunConfig, tree: LabelTree) -> List[SignalStream]:
    return read_dataset(cfg.require_file("data_path"), tree, cfg.sample_rate)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create output directory {out}: {e}") from e
    return out


def _fit(tree: LabelTree, cfg: RunConfig, train_streams, test_streams):
    if not test_streams:
        raise EmptyDataset(f"held-out split is empty ({len(train_streams)} streams, "
                           f"test_ratio {cfg.test_ratio})")
    if cfg.noise_ratio > 0:
        train_streams = flip_labels(train_streams, cfg.noise_ratio, cfg.train.seed, tree.leaves)
    train_set = featurize(train_streams, cfg)
    test_set = featurize(test_streams, cfg)
    net, history = train(tree, train_set, cfg.train, test_set)
    return net, history, test_set


# ─── 명령 ───────────────────────────────────────────────────────

def cmd_gen_data(cfg: RunConfig) -> Path:
    tree = _load_tree(cfg)
    streams = synth_dataset(tree, cfg.per_leaf, cfg.length, cfg.snr_db, cfg.train.seed, cfg.sample_rate)
    path = Path(cfg.data_path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create {path.parent}: {e}") from e
    write_dataset(path, streams, tree)
    print(f"[DONE] {len(streams)} records -> {path}")
    return path


def cmd_train(cfg: RunConfig) -> Dict[str, Path]:
    print("[1/4] 트리/데이터 로드...")
    tree = _load_tree(cfg)
    streams = _load_streams(cfg, tree)
    train_streams, test_streams = stratified_split(streams, cfg.test_ratio, cfg.train.seed)
    print(f"  학습 {len(train_streams)} / 테스트 {len(test_streams)} 스트림")

    print(f"\n[2/4] 학습 ({cfg.train.objective.value}, {cfg.train.epochs} epochs)...")
    net, history, test_set = _fit(tree, cfg, train_streams, test_streams)

    print("\n[3/4] 테스트 평가...")
    report = compute_metrics(predict(tree, net, test_set.features, cfg.train.objective), test_set.leaves, tree)
    print(f"  accuracy {report.accuracy:.4f}  f1 {report.f1:.4f}")

    print("\n[4/4] 결과 저장...")
    out = _out_dir(cfg)
    paths = {
        "checkpoint": save_checkpoint(out / "model.dhkm", net),
        "history": write_history(out / "history.csv", history),
    }
    paths["metrics"], paths["metrics_json"] = write_metrics(report, out, "metrics")
    save_conf(out / "run.conf", cfg.flat())
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return paths


def cmd_eval(cfg: RunConfig, checkpoint: str):
    tree = _load_tree(cfg)
    net = load_checkpoint(checkpoint)
    data = featurize(_load_streams(cfg, tree), cfg)
    report = compute_metrics(predict(tree, net, data.features, cfg.train.objective), data.leaves, tree)
    text_path, json_path = write_metrics(report, _out_dir(cfg), "eval_metrics")
    print(report.to_text(), end="")
    print(f"[DONE] {text_path}, {json_path}")
    return report


def cmd_infer(cfg: RunConfig, checkpoint: str, record_file: Optional[str], line: int):
    tree = _load_tree(cfg)
    net = load_checkpoint(checkpoint)
    source = Path(record_file) if record_file else cfg.require_file("data_path")
    try:
        lines = source.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataIOError(f"cannot read {source}: {e}") from e
    if not 1 <= line <= len(lines):
        raise EmptyDataset(f"{source}: no record at line {line}")
    stream = parse_record(lines[line - 1], tree, cfg.sample_rate, source, line)
    data = featurize([stream], cfg)
    fp = forward(net, data.features)
    print(f"[infer] {stream.stream_id} (label: {tree.names[stream.leaf_label]})")
    if cfg.train.objective is Objective.CCE:
        return _infer_leaf_softmax(tree, fp.logits_)
    # 윈도우가 여러 개면 점수를 평균한다
    scores = fp.scores_.mean(axis=0)
    pred = infer_path(tree, scores)
    for v in pred.path[1:]:
        print(f"  depth {tree.depth[v]}  {tree.names[v]:<20} {scores[v - 1]:.6f}")
    print(f"  -> leaf: {tree.names[pred.leaf]}  path_score: {pred.path_score:.6f}")
    return pred


def _infer_leaf_softmax(tree: LabelTree, logits: np.ndarray) -> int:
    """cce 모델: 리프 softmax 확률(윈도우 평균)의 argmax"""
    probs = leaf_probabilities(tree, logits).mean(axis=0)
    best = int(probs.argmax())
    path = enumerate_paths(tree)[best]
    for v in path[1:-1]:
        print(f"  depth {tree.depth[v]}  {tree.names[v]}")
    for leaf, p in zip(tree.leaves, probs):
        print(f"  depth {tree.depth[leaf]}  {tree.names[leaf]:<20} {p:.6f}")
    print(f"  -> leaf: {tree.names[path[-1]]}  probability: {probs[best]:.6f}")
    return path[-1]


def cmd_grad_check(cfg: RunConfig, trials: int, tree_path: Optional[str]) -> int:
    tree = load_tree_file(tree_path) if tree_path else build_tree(CAVITATION_EDGES)
    report = gradient_check(tree, cfg.train, trials, cfg.train.seed)
    print(f"checked: {report.checked}  skipped_ties: {report.skipped_ties}")
    print(f"max relative error: {report.max_rel_error:.3e}")
    if not report.passed(GRAD_TOL):
        print(f"[FAIL] gradient mismatch above {GRAD_TOL:g}")
        return 3
    print("[OK]")
    return 0


def cmd_tree_show(tree_path: str):
    tree = load_tree_file(tree_path)
    print(render_tree(tree), end="")
    return tree


def cmd_compare(cfg: RunConfig, objectives: Sequence[str], seeds: int,
                noise_ratios: Sequence[float]) -> pd.DataFrame:
    """목적함수 × 노이즈 비율 × 시드 정확도 표. bce/cce/ht는 가중치 없음"""
    tree = _load_tree(cfg)
    streams = _load_streams(cfg, tree)
    rows = []
    for objective in map(Objective, objectives):
        weights = cfg.train.weight_scheme if objective in (Objective.FHT, Objective.DHK) else WeightScheme.NONE
        for ratio in noise_ratios:
            for seed in range(cfg.train.seed, cfg.train.seed + seeds):
                run = replace(cfg, noise_ratio=ratio,
                              train=replace(cfg.train, objective=objective, weight_scheme=weights, seed=seed))
                train_streams, test_streams = stratified_split(streams, run.test_ratio, seed)
                net, _, test_set = _fit(tree, run, train_streams, test_streams)
                acc = float(np.mean(predict(tree, net, test_set.features, objective) == test_set.leaves))
                rows.append({"objective": objective.value, "weights": weights.value,
                             "noise_ratio": ratio, "seed": seed, "accuracy": acc})
                logger.info("%s noise=%.2f seed=%d -> %.4f", objective.value, ratio, seed, acc)
    table = pd.DataFrame(rows)
    out = _out_dir(cfg)
    try:
        table.to_csv(out / "comparison.csv", index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise DataIOError(f"cannot write {out / 'comparison.csv'}: {e}") from e
    summary = table.groupby(["objective", "noise_ratio"], sort=False)["accuracy"].mean().unstack()
    print(summary.to_string(float_format=lambda x: f"{x:.4f}"))
    return table


# ─── argparse ───────────────────────────────────────────────────

class _ArgumentParser(argparse.ArgumentParser):
    """잘못된 인자는 SystemExit(2) 대신 ConfigParse (종료 코드 1)"""

    def error(self, message):
        raise ConfigParse("argv", message)


def _parser() -> argparse.ArgumentParser:
    p = _ArgumentParser(prog="dhk", description="Deep hierarchical knowledge loss toolkit")
    p.add_argument("--verbose", action="store_true", help="DEBUG 로그")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--tree", dest="tree_path")
        sp.add_argument("--data", dest="data_path")
        sp.add_argument("--out", dest="out_dir")
        sp.add_argument("--seed", type=int)

    def objective_flag(sp):
        sp.add_argument("--loss", dest="objective", choices=[o.value for o in Objective])

    def training(sp):
        objective_flag(sp)
        sp.add_argument("--weights", dest="weight_scheme", choices=[w.value for w in WeightScheme])
        sp.add_argument("--mode", dest="loss_mode", choices=[a.value for a in Aggregation])
        sp.add_argument("--noise-ratio", dest="noise_ratio", type=float)
        sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("gen-data", help="합성 계층 데이터셋 생성")
    common(sp)
    sp.add_argument("--per-leaf", dest="per_leaf", type=int)
    sp.add_argument("--length", type=int)
    sp.add_argument("--snr", dest="snr_db", type=float)

    sp = sub.add_parser("train", help="전처리 → 학습 → 체크포인트/이력/지표")
    common(sp)
    training(sp)

    sp = sub.add_parser("eval", help="체크포인트 평가")
    common(sp)
    objective_flag(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("infer", help="레코드 하나의 루트→리프 경로")
    common(sp)
    objective_flag(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--record-file")
    sp.add_argument("--line", type=int, default=1)

    sp = sub.add_parser("grad-check", help="결합 손실 기울기 유한 차분 검사")
    common(sp)
    training(sp)
    sp.add_argument("--trials", type=int, default=200)

    sp = sub.add_parser("tree-show", help="트리 출력")
    sp.add_argument("--tree", dest="tree_path", required=True)

    sp = sub.add_parser("compare", help="목적함수/노이즈 비교 표")
    common(sp)
    training(sp)
    sp.add_argument("--objectives", default="bce,cce,ht,fht,dhk")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--noise-ratios", dest="noise_ratios", default="0")
    return p


_OVERRIDE_KEYS = ("tree_path", "data_path", "out_dir", "seed", "objective", "weight_scheme",
                  "loss_mode", "noise_ratio", "epochs", "per_leaf", "length", "snr_db")


def _split_list(key: str, raw: str, cast):
    try:
        return [cast(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigParse(key, str(e)) from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except ConfigParse as e:
        logging.basicConfig(level=logging.INFO, format="[%(levelname)s] %(message)s")
        logger.error("인자 오류: %s", e)
        return e.exit_code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="[%(levelname)s] %(message)s")
    try:
        if args.command == "tree-show":
            cmd_tree_show(args.tree_path)
            return 0
        overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS if getattr(args, k, None) is not None}
        if args.command == "grad-check" and "loss_mode" not in overrides:
            overrides["loss_mode"] = Aggregation.SMOOTH.value
        cfg = load_run_config(args.config, overrides)

        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "infer":
            cmd_infer(cfg, args.checkpoint, args.record_file, args.line)
        elif args.command == "grad-check":
            return cmd_grad_check(cfg, args.trials, args.tree_path)
        elif args.command == "compare":
            objectives = _split_list("objectives", args.objectives, Objective)
            ratios = _split_list("noise_ratios", args.noise_ratios, float)
            cmd_compare(cfg, objectives, args.seeds, ratios)
        return 0
    except DHKError as e:
        logger.error("실행 오류: %s", e)
        return e.exit_code
    except Exception as e:
        logger.exception("내부 오류: %s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
