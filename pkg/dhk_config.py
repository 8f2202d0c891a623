#!/usr/bin/env python3
"""
DHK - 실행 설정
`key = value` 설정 파일(# 주석) + 환경변수 + CLI 플래그 → RunConfig

우선순위: 기본값 < 설정 파일 < 환경변수(DHK_OUT_DIR, DHK_SEED) < CLI 플래그
"""

import logging
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dhk_errors import ConfigParse, DataIOError
from dhk_signal import DEFAULT_SAMPLE_RATE, DEFAULT_STFT_HOP, DEFAULT_STFT_WINDOW, WindowFn
from dhk_trainer import TrainConfig

logger = logging.getLogger("dhk.config")

ENV_CONFIG = "DHK_CONFIG"
ENV_OVERRIDES = {"DHK_OUT_DIR": "out_dir", "DHK_SEED": "seed"}
_INLINE_COMMENT = re.compile(r"\s+#")


# ─── 설정 파일 ──────────────────────────────────────────────────

def load_conf(path) -> Dict[str, str]:
    """`key = value` 파일 로드. 빈 줄/# 주석 무시, 값의 따옴표 제거.
    줄 중간의 #은 앞에 공백이 있을 때만 주석으로 본다 (경로 안의 # 보존)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot read config {path}: {e}") from e
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = _INLINE_COMMENT.split(line.strip(), 1)[0]
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigParse(f"line {line_no}", f"expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip().strip('"').strip("'")
    return values


def save_conf(path, values: Mapping[str, Any]):
    """dict → `key = value` 파일 저장"""
    lines = ["# DHK 실행 설정 (자동 생성)", ""]
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif hasattr(value, "value"):
            value = value.value
        lines.append(f"{key} = {value}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"cannot write config {path}: {e}") from e


# ─── RunConfig ──────────────────────────────────────────────────

@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    tree_path: str = "trees/cavitation.tsv"
    data_path: str = "out/dataset.tsv"
    out_dir: str = "out"
    # 전처리 (window = 0 이면 스트림 전체를 한 윈도우로)
    window: int = 0
    step: int = 0
    stft_window: int = DEFAULT_STFT_WINDOW
    stft_hop: int = DEFAULT_STFT_HOP
    window_fn: WindowFn = WindowFn.HANN
    n_bands: int = 32
    sample_rate: float = DEFAULT_SAMPLE_RATE
    downsample: int = 1
    noise_ratio: float = 0.0
    test_ratio: float = 0.2
    # 합성 데이터 생성
    per_leaf: int = 60
    length: int = 8192
    snr_db: float = 15.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "window_fn", WindowFn(self.window_fn))
        except ValueError:
            raise ConfigParse("window_fn", f"must be hann or rect, got {self.window_fn!r}") from None
        for name in ("window", "step"):
            if getattr(self, name) < 0:
                raise ConfigParse(name, f"must be >= 0, got {getattr(self, name)}")
        if self.stft_window < 2:
            raise ConfigParse("stft_window", f"must be >= 2, got {self.stft_window}")
        for name in ("stft_hop", "n_bands", "downsample", "per_leaf"):
            if getattr(self, name) < 1:
                raise ConfigParse(name, f"must be >= 1, got {getattr(self, name)}")
        if self.length < 256:
            raise ConfigParse("length", f"must be >= 256, got {self.length}")
        if not self.sample_rate > 0:
            raise ConfigParse("sample_rate", f"must be positive, got {self.sample_rate}")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ConfigParse("noise_ratio", f"must be in [0, 1], got {self.noise_ratio}")
        if not 0.0 < self.test_ratio < 1.0:
            raise ConfigParse("test_ratio", f"must be in (0, 1), got {self.test_ratio}")

    def require_file(self, name: str) -> Path:
        path = Path(getattr(self, name))
        if not path.is_file():
            raise DataIOError(f"{name}: file not found: {path}")
        return path

    def flat(self) -> Dict[str, Any]:
        """설정 파일 형태의 평탄한 dict"""
        out = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        out.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"})
        return out


_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "train"}
_TUPLE_KEYS = {"betas": float, "hidden": int}


def _convert(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if key in _TUPLE_KEYS:
            return tuple(_TUPLE_KEYS[key](v) for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int) and not hasattr(default, "value"):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigParse(key, f"cannot parse {raw!r}") from None
    return raw


def build_run_config(values: Mapping[str, Any]) -> RunConfig:
    """평탄한 key → value 매핑으로 RunConfig 생성. 모르는 키는 ConfigParse"""
    train_kw, run_kw = {}, {}
    train_defaults, run_defaults = TrainConfig(), RunConfig.__dataclass_fields__
    for key, raw in values.items():
        if raw is None:
            continue
        if key in _TRAIN_KEYS:
            train_kw[key] = _convert(key, raw, getattr(train_defaults, key))
        elif key in _RUN_KEYS:
            run_kw[key] = _convert(key, raw, run_defaults[key].default)
        else:
            raise ConfigParse(key, "unknown config key")
    return RunConfig(train=TrainConfig(**train_kw), **run_kw)


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """기본값 → 설정 파일 → 환경변수 → overrides(CLI) 순으로 병합"""
    values: Dict[str, Any] = {}
    path = path or os.environ.get(ENV_CONFIG)
    if path:
        values.update(load_conf(path))
        logger.debug("설정 로드: %s (%d 키)", path, len(values))
    for env_key, key in ENV_OVERRIDES.items():
        if os.environ.get(env_key):
            values[key] = os.environ[env_key]
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_run_config(values)
