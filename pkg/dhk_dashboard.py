#!/usr/bin/env python3
"""
DHK - 학습 결과 대시보드 (Streamlit :8510)
출력 디렉터리의 history.csv, metrics.json, comparison.csv, run.conf 를 표로 보여준다

실행: streamlit run dhk_dashboard.py -- --out out
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd
import streamlit as st

from dhk_config import load_conf
from dhk_errors import DHKError
from dhk_hierarchy import load_tree_file, render_tree
from dhk_inference import MetricsReport, read_metrics
from dhk_trainer import read_history

logger = logging.getLogger("dhk.dashboard")
logging.basicConfig(level=logging.INFO, format="[%(levelname)s] %(message)s")


# ─── 로더 (Streamlit 없이 호출 가능) ────────────────────────────

def load_run(out_dir) -> Dict[str, Any]:
    """실행 결과 로드. 없는 파일은 None"""
    out = Path(out_dir)
    run: Dict[str, Any] = {"out_dir": str(out), "history": None, "metrics": None,
                           "eval_metrics": None, "comparison": None, "conf": None}
    loaders = {
        "history": (out / "history.csv", read_history),
        "metrics": (out / "metrics.json", read_metrics),
        "eval_metrics": (out / "eval_metrics.json", read_metrics),
        "comparison": (out / "comparison.csv", pd.read_csv),
        "conf": (out / "run.conf", load_conf),
    }
    for key, (path, loader) in loaders.items():
        if not path.is_file():
            continue
        try:
            run[key] = loader(path)
        except (DHKError, OSError, ValueError) as e:
            logger.warning("%s 로드 실패: %s", path, e)
    return run


def confusion_frame(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame(report.confusion, index=report.labels, columns=report.labels)


def comparison_summary(table: pd.DataFrame) -> pd.DataFrame:
    """objective × noise_ratio 평균 정확도 (± 표준편차 열 포함)"""
    grouped = table.groupby(["objective", "noise_ratio"], sort=False)["accuracy"]
    return grouped.agg(["mean", "std", "count"]).reset_index()


# ─── 화면 ───────────────────────────────────────────────────────

def render_metrics(report: Optional[MetricsReport], title: str):
    st.subheader(title)
    if report is None:
        st.info("지표 파일이 없습니다.")
        return
    col1, col2, col3, col4 = st.columns(4)
    for col, (name, value) in zip((col1, col2, col3, col4), (
            ("Accuracy", report.accuracy), ("Precision", report.precision),
            ("Recall", report.recall), ("F1", report.f1))):
        with col:
            st.markdown(f"""
            <div class="stat-card">
                <h3>{value:.4f}</h3>
                <p>{name}</p>
            </div>
            """, unsafe_allow_html=True)
    if report.labels:
        with st.expander("리프별 정확도 / 혼동 행렬", expanded=False):
            st.dataframe(pd.DataFrame(list(report.per_class_accuracy.items()), columns=["leaf", "accuracy"]),
                         use_container_width=True)
            st.dataframe(confusion_frame(report), use_container_width=True)


def render_history(history: Optional[pd.DataFrame]):
    st.subheader("학습 이력")
    if history is None or history.empty:
        st.info("history.csv 가 없습니다.")
        return
    last = history.iloc[-1]
    st.write(f"**에폭:** {int(last['epoch'])}  **joint:** {last['joint']:.4f}  "
             f"**train acc:** {last['train_accuracy']:.4f}")
    st.dataframe(history, use_container_width=True, hide_index=True)


def render_comparison(table: Optional[pd.DataFrame]):
    st.subheader("목적함수 비교")
    if table is None or table.empty:
        st.info("comparison.csv 가 없습니다. `dhk_cli.py compare` 를 먼저 실행해주세요.")
        return
    st.dataframe(comparison_summary(table), use_container_width=True, hide_index=True)
    with st.expander("전체 실행", expanded=False):
        st.dataframe(table, use_container_width=True, hide_index=True)


def render_config(conf: Optional[Dict[str, str]]):
    st.subheader("실행 설정")
    if not conf:
        st.info("run.conf 가 없습니다.")
        return
    st.dataframe(pd.DataFrame(list(conf.items()), columns=["key", "value"]),
                 use_container_width=True, hide_index=True)
    tree_path = Path(conf.get("tree_path", ""))
    if tree_path.is_file():
        with st.expander("레이블 트리", expanded=False):
            try:
                st.code(render_tree(load_tree_file(tree_path)), language=None)
            except DHKError as e:
                st.warning(f"트리 로드 실패: {e}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="out")
    args, _ = parser.parse_known_args(sys.argv[1:])

    st.set_page_config(page_title="DHK 대시보드", page_icon="🌳", layout="wide")
    st.markdown("""
    <style>
    .stat-card { background: #1a1a2e; border-radius: 8px; padding: 12px; text-align: center; }
    .stat-card h3 { margin: 0; color: #00d4ff; }
    .stat-card p { margin: 0; color: #b0b0b0; }
    </style>
    """, unsafe_allow_html=True)

    st.title("🌳 DHK 학습 결과")
    col_dir, col_refresh = st.columns([4, 1])
    with col_dir:
        out_dir = st.text_input("출력 디렉터리", value=args.out, key="dhk_out_dir")
    with col_refresh:
        st.markdown("<br>", unsafe_allow_html=True)
        if st.button("새로고침", key="dhk_refresh"):
            st.session_state.pop(f"dhk_run_{out_dir}", None)
            st.rerun()

    cache_key = f"dhk_run_{out_dir}"
    if cache_key not in st.session_state:
        with st.spinner("결과 로딩 중..."):
            st.session_state[cache_key] = load_run(out_dir)
    run = st.session_state[cache_key]

    tab_metrics, tab_history, tab_compare, tab_conf = st.tabs(["지표", "학습 이력", "비교", "설정"])
    with tab_metrics:
        render_metrics(run["metrics"], "테스트 지표")
        st.markdown("---")
        render_metrics(run["eval_metrics"], "평가 지표 (eval)")
    with tab_history:
        render_history(run["history"])
    with tab_compare:
        render_comparison(run["comparison"])
    with tab_conf:
        render_config(run["conf"])


if __name__ == "__main__":
    main()
