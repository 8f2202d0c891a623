#!/usr/bin/env python3
"""
DHK - 예외 계층
라이브러리는 raise만 하고, CLI 경계에서 exit_code로 변환한다.
"""


class DHKError(Exception):
    """모든 DHK 예외의 기반"""

    exit_code = 3


# ─── 계열 ───────────────────────────────────────────────────────

class ValidationError(DHKError, ValueError):
    """입력/설정 검증 실패 (exit 1)"""

    exit_code = 1


class DataIOError(DHKError, OSError):
    """파일 읽기/쓰기 실패 (exit 2)"""

    exit_code = 2


class InvariantError(DHKError, RuntimeError):
    """내부 불변식 위반 (exit 3)"""

    exit_code = 3


# ─── hierarchy ──────────────────────────────────────────────────

class EmptyTree(ValidationError):
    pass


class MultipleRoots(ValidationError):
    pass


class Cycle(ValidationError):
    pass


class DuplicateChild(ValidationError):
    pass


class InvalidNode(ValidationError):
    pass


class NotALeaf(ValidationError):
    pass


class TreeFileError(ValidationError):
    """트리 파일 파싱 오류 (줄 번호 포함)"""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


# ─── hkloss / grouptriplet ──────────────────────────────────────

class LengthMismatch(ValidationError):
    pass


class GammaOutOfRange(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class NonPositiveBeta(ValidationError):
    pass


class InvalidTriplet(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


# ─── signal ─────────────────────────────────────────────────────

class WindowTooLarge(ValidationError):
    pass


class NonPositiveStep(ValidationError):
    pass


class SignalTooShort(ValidationError):
    pass


class AllZeroSpectrum(ValidationError):
    pass


class InvalidTree(ValidationError):
    pass


class DatasetParseError(ValidationError):
    """데이터셋 레코드 파싱 오류 (줄 번호 포함)"""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


# ─── trainer / cli ──────────────────────────────────────────────

class InvalidShape(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class LabelNotInTree(ValidationError):
    pass


class ConfigParse(ValidationError):
    """설정 값 오류 - 어떤 키가 문제인지 함께 보관"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointCorrupt(ValidationError):
    pass
