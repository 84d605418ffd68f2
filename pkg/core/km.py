# core/km.py
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from core.errors import InvalidDataset


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """(T*, δ, X) の三つ組。times は元の時間単位、statuses は 1=イベント / 0=打ち切り"""
    times: np.ndarray
    statuses: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        statuses = np.asarray(self.statuses).ravel()
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1) if cov.size == times.size else cov.reshape(times.size, -1)
        n = times.size
        if n < 1:
            raise InvalidDataset("dataset must contain at least one observation")
        if statuses.size != n or cov.shape[0] != n:
            raise InvalidDataset(
                f"length mismatch: times={n}, statuses={statuses.size}, covariate rows={cov.shape[0]}"
            )
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            raise InvalidDataset("all times must be finite and strictly positive")
        if not np.all(np.isin(statuses, (0, 1))):
            raise InvalidDataset("statuses must be exactly 0 or 1")
        if not np.all(np.isfinite(cov)):
            raise InvalidDataset("covariates must be finite")
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "statuses", _frozen(statuses.astype(np.int64)))
        object.__setattr__(self, "covariates", _frozen(cov))

    @property
    def n(self) -> int:
        return int(self.times.size)

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def log_times(self) -> np.ndarray:
        return np.log(self.times)

    @property
    def censoring_rate(self) -> float:
        return float(1.0 - self.statuses.mean())


@dataclass(frozen=True, eq=False)
class OrderedDataset(SurvivalDataset):
    """時間昇順（同時刻はイベントが先）に並べたデータ。permutation[k] = 元の行番号"""
    permutation: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        perm = np.arange(self.n) if self.permutation is None else np.asarray(self.permutation, dtype=np.int64)
        if perm.size != self.n or not np.array_equal(np.sort(perm), np.arange(self.n)):
            raise InvalidDataset("permutation must be a bijection on the observation indices")
        t, s = self.times, self.statuses
        if np.any(np.diff(t) < 0):
            raise InvalidDataset("ordered times must be nondecreasing")
        # 同時刻で 打ち切り→イベント の並びは不可（最後の1件は Efron 補正で読み替え済みのことがある）
        bad = (np.diff(t) == 0) & (s[:-1] == 0) & (s[1:] == 1)
        if np.any(bad[:-1]):
            raise InvalidDataset("events must precede censored observations at tied times")
        object.__setattr__(self, "permutation", _frozen(perm))

    def with_last(self, time: Optional[float] = None, status: Optional[int] = None) -> "OrderedDataset":
        """最大観測値だけ差し替えたコピー。最大であり続けることが前提"""
        times = np.array(self.times)
        statuses = np.array(self.statuses)
        if time is not None:
            times[-1] = time
        if status is not None:
            statuses[-1] = status
        return OrderedDataset(times, statuses, self.covariates, self.permutation)


def order_dataset(data: SurvivalDataset) -> OrderedDataset:
    idx = np.arange(data.n)
    # 主キー: 時間, 副キー: イベント先, 最後に元の順（安定）
    perm = np.lexsort((idx, 1 - data.statuses, data.times))
    return OrderedDataset(
        data.times[perm], data.statuses[perm], data.covariates[perm], perm
    )


def corrected_statuses(data: OrderedDataset, tail_correction: bool) -> np.ndarray:
    """Efron の補正: 最後の観測だけ δ_(n)=1 に読み替える"""
    st = np.array(data.statuses, dtype=np.int64)
    if tail_correction and st[-1] == 0:
        st[-1] = 1
    return st


@dataclass(frozen=True, eq=False)
class KmCurve:
    event_times: np.ndarray
    survival: np.ndarray
    jumps: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    defined_beyond_max: bool

    def survival_at(self, t):
        """右連続の階段関数。最初のイベント前は 1"""
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.event_times, t_arr, side="right") - 1
        padded = np.concatenate(([1.0], self.survival))
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out

    @property
    def final_survival(self) -> float:
        return float(self.survival[-1]) if self.survival.size else 1.0


def km_estimate(data: OrderedDataset, tail_correction: bool = False) -> KmCurve:
    st = corrected_statuses(data, tail_correction)
    forced = bool(tail_correction and data.statuses[-1] == 0)
    times = data.times
    n = data.n

    ev = times[st == 1]
    event_times = np.unique(ev)
    at_risk = n - np.searchsorted(times, event_times, side="left")
    d = np.searchsorted(ev, event_times, side="right") - np.searchsorted(ev, event_times, side="left")
    survival = np.cumprod(1.0 - d / at_risk)
    if forced and survival.size:
        # 最大値に残りの質量をすべて載せる（同時刻の打ち切りが複数あっても 0 まで落とす）
        survival[-1] = 0.0
    prev = np.concatenate(([1.0], survival[:-1]))
    return KmCurve(
        event_times=_frozen(event_times),
        survival=_frozen(survival),
        jumps=_frozen(prev - survival),
        at_risk=_frozen(at_risk.astype(np.int64)),
        events=_frozen(d.astype(np.int64)),
        defined_beyond_max=bool(st[-1] == 1),
    )


@dataclass(frozen=True, eq=False)
class StuteWeights:
    weights: np.ndarray
    statuses: np.ndarray
    tail_corrected: bool

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def stute_weights(data: OrderedDataset, tail_correction: bool = False) -> StuteWeights:
    """K-M 重み（閉じた積の形で計算。曲線の差分は使わない）"""
    st = corrected_statuses(data, tail_correction)
    n = data.n
    i = np.arange(1, n + 1, dtype=float)
    delta = st.astype(float)
    factors = ((n - i) / (n - i + 1.0)) ** delta
    prefix = np.concatenate(([1.0], np.cumprod(factors[:-1])))
    w = delta / (n - i + 1.0) * prefix
    return StuteWeights(weights=_frozen(w), statuses=_frozen(st), tail_corrected=bool(tail_correction))
