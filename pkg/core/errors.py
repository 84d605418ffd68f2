# core/errors.py
from __future__ import annotations
from typing import Any, Optional


class CensAftError(Exception):
    """ライブラリ内の例外はすべてここから派生する"""


# --- 入力 ---
class InvalidDataset(CensAftError, ValueError):
    pass


class InputParseError(CensAftError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# --- QP ---
class InvalidProblem(CensAftError, ValueError):
    pass


class NotPositiveDefinite(CensAftError):
    pass


class Infeasible(CensAftError):
    def __init__(self, message: str, margin: Optional[float] = None, point: Any = None):
        super().__init__(message)
        # 全制約を一律に緩めれば実行可能になる最小の幅（負値）
        self.margin = margin
        # その幅を達成したフェーズ1 の点
        self.point = point


class IterationLimit(CensAftError):
    def __init__(self, message: str, solution: Any = None):
        super().__init__(message)
        self.solution = solution


# --- SWLS ---
class AllWeightsZero(CensAftError):
    pass


class RankDeficient(CensAftError):
    pass


class NoUncensored(CensAftError):
    pass


class NonPositiveZ(CensAftError, ValueError):
    pass


# --- Buckley-James ---
class SingularDesign(CensAftError):
    pass


# --- imputation ---
class NoTailMass(CensAftError):
    pass


class TooFewCensored(CensAftError):
    pass


class DegenerateRegression(CensAftError):
    pass


class LargestNotCensored(CensAftError):
    pass


class InsufficientCovariates(CensAftError):
    pass


class DegenerateCurve(CensAftError):
    pass


class ImputedTimeOverflow(CensAftError):
    """補完した log 時間が元の時間単位で表せない（exp が溢れる）"""


# --- simulation ---
class CalibrationFailed(CensAftError):
    pass
