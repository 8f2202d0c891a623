#!/usr/bin/env python3
"""
DHK - 음향 신호 전처리
슬라이딩 윈도우 → STFT → dB 스펙트로그램 → 밴드 특징,
합성 계층 데이터셋 생성, 레이블 노이즈 주입, 데이터셋/스펙트로그램 캐시 입출력
"""

import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import decimate, get_window

from dhk_errors import (
    AllZeroSpectrum,
    DataIOError,
    DatasetParseError,
    InvalidTree,
    LabelNotInTree,
    NonPositiveStep,
    SignalTooShort,
    ValidationError,
    WindowTooLarge,
)
from dhk_hierarchy import ROOT, LabelTree, ancestors

logger = logging.getLogger("dhk.signal")

DB_FLOOR = -120.0
FEATURE_DB_SCALE = 40.0
DEFAULT_STFT_WINDOW = 2048
DEFAULT_STFT_HOP = 512
DEFAULT_SAMPLE_RATE = 16000.0
SPEC_MAGIC = b"DHKS"
SPEC_VERSION = 1


class WindowFn(str, Enum):
    HANN = "hann"
    RECT = "rect"


@dataclass(frozen=True, eq=False)
class SignalStream:
    samples: np.ndarray
    sample_rate: float
    leaf_label: int
    stream_id: str = ""


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """T×F dB 행렬. 전역 최댓값이 0 dB"""

    values: np.ndarray
    window_len: int
    hop: int
    leaf_label: int = -1


# ─── 슬라이딩 윈도우 ────────────────────────────────────────────

def window_offsets(m: int, w: int, s: int) -> np.ndarray:
    """시작 위치 0, s, 2s, ... (개수 = ⌊(M−w)/s⌋ + 1)"""
    if s < 1:
        raise NonPositiveStep(f"step must be >= 1, got {s}")
    if not 1 <= w <= m:
        raise WindowTooLarge(f"window {w} does not fit a stream of {m} samples")
    return np.arange(0, m - w + 1, s)


def sliding_window(stream: SignalStream, w: int, s: int) -> List[SignalStream]:
    offsets = window_offsets(len(stream.samples), w, s)
    return [
        replace(stream, samples=stream.samples[o:o + w], stream_id=f"{stream.stream_id}@{o}")
        for o in offsets
    ]


def downsample(stream: SignalStream, factor: int) -> SignalStream:
    """안티에일리어싱 필터 후 1/factor 로 다운샘플링"""
    if factor < 1:
        raise NonPositiveStep(f"downsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return stream
    samples = decimate(stream.samples, factor, ftype="fir", zero_phase=True)
    return replace(stream, samples=np.ascontiguousarray(samples), sample_rate=stream.sample_rate / factor)


# ─── STFT / 스펙트로그램 ────────────────────────────────────────

def stft(signal, window_len: int, hop: int, window_fn: WindowFn = WindowFn.HANN) -> np.ndarray:
    """프레임 t는 [t·hop, t·hop + window_len) 구간. 반환 (T, window_len/2 + 1) 복소 행렬"""
    x = np.asarray(signal, dtype=np.float64)
    if window_len < 2:
        raise ValidationError(f"window_len must be >= 2, got {window_len}")
    if hop < 1:
        raise NonPositiveStep(f"hop must be >= 1, got {hop}")
    if x.size < window_len:
        raise SignalTooShort(f"signal of {x.size} samples is shorter than window {window_len}")
    if WindowFn(window_fn) is WindowFn.HANN:
        window = get_window("hann", window_len)
    else:
        window = np.ones(window_len)
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop]
    return np.fft.rfft(frames * window, axis=-1)


def log_spectrogram(stft_mag, window_len: int = 0, hop: int = 0, leaf_label: int = -1) -> Spectrogram:
    """10·log10(|X| / max|X|), 하한 −120 dB"""
    mag = np.abs(np.asarray(stft_mag))
    if mag.ndim != 2 or mag.size == 0:
        raise ValidationError(f"expected a non-empty T×F matrix, got shape {mag.shape}")
    peak = mag.max()
    if not peak > 0:
        raise AllZeroSpectrum("spectrum has no positive entry")
    ratio = np.maximum(mag / peak, 10.0 ** (DB_FLOOR / 10.0))
    values = np.maximum(10.0 * np.log10(ratio), DB_FLOOR)
    return Spectrogram(values=values, window_len=window_len, hop=hop, leaf_label=leaf_label)


def band_features(spec: Spectrogram, n_bands: int) -> np.ndarray:
    """시간 평균 dB를 주파수 밴드별로 평균. 네트워크 입력 벡터"""
    profile = spec.values.mean(axis=0)
    n_bands = min(n_bands, profile.size)
    return np.array([band.mean() for band in np.array_split(profile, n_bands)])


def preprocess(streams: Sequence[SignalStream], window: int, step: int,
               stft_window: int = DEFAULT_STFT_WINDOW, stft_hop: int = DEFAULT_STFT_HOP,
               n_bands: int = 32, window_fn: WindowFn = WindowFn.HANN) -> Tuple[np.ndarray, np.ndarray]:
    """SW → STFT → dB → 밴드 특징. 입력 순서대로 (features, leaves) 반환"""
    features, leaves = [], []
    for stream in streams:
        for sub in sliding_window(stream, window, step):
            spec = log_spectrogram(stft(sub.samples, stft_window, stft_hop, window_fn),
                                   stft_window, stft_hop, sub.leaf_label)
            features.append(band_features(spec, n_bands) / FEATURE_DB_SCALE)
            leaves.append(sub.leaf_label)
    if not features:
        return np.zeros((0, n_bands)), np.zeros(0, dtype=np.intp)
    return np.stack(features), np.asarray(leaves, dtype=np.intp)


# ─── 합성 데이터 ────────────────────────────────────────────────

def _leaf_tones(tree: LabelTree, sample_rate: float):
    """리프별 (그룹 중심 주파수, 리프 고유 주파수). 그룹 = 깊이 1 조상"""
    groups = tree.children[ROOT]
    lo, hi = 0.05 * sample_rate, 0.45 * sample_rate
    band = (hi - lo) / len(groups)
    tones = {}
    for g_rank, g in enumerate(groups):
        g_lo = lo + g_rank * band
        members = [v for v in tree.leaves if g in ancestors(tree, v)]
        for rank, leaf in enumerate(members):
            tones[leaf] = (g_lo + 0.5 * band, g_lo + (rank + 0.5) / len(members) * band)
    return tones


def synth_dataset(tree: LabelTree, per_leaf: int, length: int, snr_db: float, seed: int,
                  sample_rate: float = DEFAULT_SAMPLE_RATE) -> List[SignalStream]:
    """리프마다 per_leaf 개. 깊이 1 조상이 대역을, 리프가 정확한 음을 정한다 + 백색 잡음"""
    if per_leaf < 1:
        raise ValidationError(f"per_leaf must be >= 1, got {per_leaf}")
    if length < 256:
        raise ValidationError(f"length must be >= 256, got {length}")
    if not tree.leaves or tree.height < 1:
        raise InvalidTree("tree has no leaves below the root")

    rng = np.random.default_rng(seed)
    tones = _leaf_tones(tree, sample_rate)
    t = np.arange(length) / sample_rate
    jitter = 0.002 * sample_rate
    streams = []
    for leaf in tree.leaves:
        f_group, f_leaf = tones[leaf]
        for k in range(per_leaf):
            f1 = f_group + rng.uniform(-jitter, jitter)
            f2 = f_leaf + rng.uniform(-jitter, jitter)
            phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
            clean = 0.5 * np.sin(2 * np.pi * f1 * t + phase[0]) + np.sin(2 * np.pi * f2 * t + phase[1])
            noise_power = np.mean(clean ** 2) / 10.0 ** (snr_db / 10.0)
            samples = clean + rng.normal(0.0, np.sqrt(noise_power), size=length)
            streams.append(SignalStream(samples, sample_rate, leaf, f"{tree.names[leaf]}-{k:04d}"))
    logger.info("합성 데이터: 리프 %d × %d = %d 스트림 (SNR %.1f dB)",
                len(tree.leaves), per_leaf, len(streams), snr_db)
    return streams


def flip_labels(streams: Sequence[SignalStream], ratio: float, seed: int,
                leaves: Optional[Sequence[int]] = None) -> List[SignalStream]:
    """⌊ratio·N⌋ 개를 균등 추출해 다른 리프 레이블로 바꾼다"""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"noise ratio must be in [0, 1], got {ratio}")
    out = list(streams)
    n_flip = int(np.floor(ratio * len(out) + 1e-9))
    candidates = sorted(set(leaves) if leaves is not None else {s.leaf_label for s in out})
    if n_flip == 0:
        return out
    if len(candidates) < 2:
        logger.warning("레이블 종류가 하나뿐이라 뒤집을 수 없습니다")
        return out
    rng = np.random.default_rng(seed)
    for i in sorted(rng.choice(len(out), size=n_flip, replace=False)):
        others = [v for v in candidates if v != out[i].leaf_label]
        out[i] = replace(out[i], leaf_label=int(rng.choice(others)))
    logger.info("레이블 노이즈: %d / %d 뒤집음", n_flip, len(out))
    return out


# ─── 파일 입출력 ────────────────────────────────────────────────

def write_dataset(path, streams: Sequence[SignalStream], tree: LabelTree) -> Path:
    """레코드 한 줄: id<TAB>leaf_name<TAB>콤마 구분 샘플"""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for i, s in enumerate(streams):
                sid = s.stream_id or f"s{i:06d}"
                f.write(f"{sid}\t{tree.names[s.leaf_label]}\t{','.join(map(repr, s.samples.tolist()))}\n")
    except OSError as e:
        raise DataIOError(f"cannot write dataset {path}: {e}") from e
    return path


def parse_record(line: str, tree: LabelTree, sample_rate: float = DEFAULT_SAMPLE_RATE,
                 source="<record>", line_no: int = 1) -> SignalStream:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 3:
        raise DatasetParseError(source, line_no, f"expected 3 tab-separated fields, got {len(fields)}")
    sid, leaf_name, raw = fields
    try:
        leaf = tree.node(leaf_name)
    except ValidationError:
        raise LabelNotInTree(f"{source}:{line_no}: label {leaf_name!r} is not in the tree") from None
    if not tree.is_leaf(leaf):
        raise LabelNotInTree(f"{source}:{line_no}: label {leaf_name!r} is not a leaf")
    try:
        samples = np.array([float(x) for x in raw.split(",")], dtype=np.float64)
    except ValueError as e:
        raise DatasetParseError(source, line_no, f"bad sample value: {e}") from None
    if samples.size < 1 or not np.all(np.isfinite(samples)):
        raise DatasetParseError(source, line_no, "samples must be finite and non-empty")
    return SignalStream(samples, sample_rate, leaf, sid)


def read_dataset(path, tree: LabelTree, sample_rate: float = DEFAULT_SAMPLE_RATE) -> List[SignalStream]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataIOError(f"cannot read dataset {path}: {e}") from e
    streams = [
        parse_record(line, tree, sample_rate, path, line_no)
        for line_no, line in enumerate(lines, start=1) if line.strip()
    ]
    logger.debug("데이터셋 로드: %s (%d 레코드)", path, len(streams))
    return streams


def write_spectrogram(path, spec: Spectrogram) -> Path:
    """16바이트 헤더(magic, T, F, version) + little-endian float32"""
    path = Path(path)
    T, F = spec.values.shape
    try:
        with open(path, "wb") as f:
            f.write(SPEC_MAGIC + struct.pack("<III", T, F, SPEC_VERSION))
            f.write(spec.values.astype("<f4").tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write spectrogram {path}: {e}") from e
    return path


def read_spectrogram(path) -> Spectrogram:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read spectrogram {path}: {e}") from e
    if len(blob) < 16 or blob[:4] != SPEC_MAGIC:
        raise ValidationError(f"{path}: not a spectrogram cache (bad magic)")
    T, F, _ = struct.unpack("<III", blob[4:16])
    if len(blob) != 16 + 4 * T * F:
        raise ValidationError(f"{path}: expected {T}x{F} floats, file size {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=16).reshape(T, F).astype(np.float64)
    return Spectrogram(values=values, window_len=0, hop=0)
