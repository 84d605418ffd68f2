# core/impute.py
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm

from core.buckley_james import (
    ResidualSet,
    bj_resample_distribution,
    conditional_tail_mean,
    conditional_tail_median,
    residual_km,
    residual_km_weighted,
)
from core.errors import (
    DegenerateCurve,
    DegenerateRegression,
    ImputedTimeOverflow,
    InsufficientCovariates,
    LargestNotCensored,
    NoTailMass,
    TooFewCensored,
)
from core.km import OrderedDataset, SurvivalDataset, km_estimate, order_dataset
from core.models import PipelineOptions
from core.swls import AftFit, fit_penalized_swls

logger = logging.getLogger(__name__)


class ImputationMethod(str, Enum):
    LN_AFT = "lnaft"
    EFRON = "efron"
    COND_MEAN = "cmean"
    COND_MEDIAN = "cmedian"
    RESAMP_COND_MEAN = "rmean"
    RESAMP_COND_MEDIAN = "rmedian"
    PRED_DIFF = "pdiff"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    ImputationMethod.LN_AFT: "LN_AFT",
    ImputationMethod.EFRON: "W0",
    ImputationMethod.COND_MEAN: "W_tau_m",
    ImputationMethod.COND_MEDIAN: "W_tau_md",
    ImputationMethod.RESAMP_COND_MEAN: "W_tau*_m",
    ImputationMethod.RESAMP_COND_MEDIAN: "W_tau*_md",
    ImputationMethod.PRED_DIFF: "W_nu",
}

EMPTY_TAIL = "EmptyTail"
CLAMPED_NU = "ClampedNu"
SUB_CENSORING = "SubCensoringImputation"

# exp が有限に収まる log 時間の上限
_MAX_LOG_TIME = float(np.log(np.finfo(float).max))


@dataclass(frozen=True, eq=False)
class ImputationResult:
    method: ImputationMethod
    fit: AftFit
    imputed_log_time: Optional[float] = None
    censored_log_time: Optional[float] = None
    tau: Optional[float] = None
    flags: frozenset = field(default_factory=frozenset)
    draws: Optional[np.ndarray] = None

    @property
    def imputed_time(self) -> Optional[float]:
        return None if self.imputed_log_time is None else float(np.exp(self.imputed_log_time))


@dataclass(frozen=True, eq=False)
class MeanImputedTimes:
    """Y^m（打ち切り観測の条件付き期待 log 時間）。index は順序付きデータ上の位置"""
    log_times: np.ndarray
    index: np.ndarray
    censored_log_times: np.ndarray

    @property
    def differences(self) -> np.ndarray:
        return self.log_times - self.censored_log_times


@dataclass(frozen=True, eq=False)
class DiffRegression:
    intercept: float
    slope: float
    weights: np.ndarray
    censored_log_times: np.ndarray
    differences: np.ndarray
    anchor_log_time: float
    predicted: float
    nu: float

    @property
    def clamped(self) -> bool:
        return self.predicted <= 0

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({
            "censored_log_time": self.censored_log_times,
            "difference": self.differences,
            "weight": self.weights,
        })
        df.attrs.update(intercept=self.intercept, slope=self.slope, nu=self.nu)
        return df


# =========================
# 平均補完と予測差分
# =========================

def _max_censored_time(data: OrderedDataset) -> float:
    cen = data.statuses == 0
    if not np.any(cen):
        raise TooFewCensored("dataset has no censored observation")
    return float(data.times[cen].max())


def mean_impute_all(data: OrderedDataset) -> MeanImputedTimes:
    """
    補正付き K-M で各打ち切り観測の条件付き期待 log 時間を計算する。
    最大の打ち切り時刻に並ぶ観測は除く（その先に K-M の質量がない）
    """
    cen = np.flatnonzero(data.statuses == 0)
    if cen.size == 0:
        return MeanImputedTimes(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0))
    t_max = data.times[cen].max()
    idx = cen[data.times[cen] < t_max]
    if idx.size == 0:
        return MeanImputedTimes(np.zeros(0), idx, np.zeros(0))

    curve = km_estimate(data, tail_correction=True)
    log_t = np.log(curve.event_times)
    # 後ろからの累積で Σ_{t_r > C} log(t_r) ΔŜ(t_r)
    tail_sum = np.concatenate((np.cumsum((log_t * curve.jumps)[::-1])[::-1], [0.0]))
    c = data.times[idx]
    k = np.searchsorted(curve.event_times, c, side="right")
    s_c = curve.survival_at(c)
    s_c = np.atleast_1d(s_c)
    if np.any(s_c <= 0):
        bad = int(idx[np.flatnonzero(s_c <= 0)[0]])
        raise NoTailMass(f"no survival mass beyond censoring time {data.times[bad]:g}")
    y_m = tail_sum[k] / s_c
    return MeanImputedTimes(y_m, idx, np.log(c))


def predicted_difference(data: OrderedDataset) -> DiffRegression:
    """
    D_i = Y^m_i - Y_i を Y_i に重み (Y_max - Y_i)^-1 で WLS 回帰し、
    最大打ち切り時刻での予測値を 0 で切ったものを ν とする
    """
    anchor = float(np.log(_max_censored_time(data)))
    mi = mean_impute_all(data)
    if mi.index.size < 2:
        raise TooFewCensored(
            f"need at least 2 censored observations below the largest, got {mi.index.size}"
        )
    y = mi.censored_log_times
    if np.ptp(y) == 0:
        raise DegenerateRegression("all censored times below the largest are equal")
    d = mi.differences
    w = 1.0 / (anchor - y)
    res = sm.WLS(d, sm.add_constant(y, has_constant="add"), weights=w).fit()
    a, b = (float(v) for v in res.params)
    pred = a + b * anchor
    nu = max(0.0, pred)
    if pred <= 0:
        logger.warning("predicted difference %.4g <= 0 at the largest censored time; nu clamped to 0", pred)
    return DiffRegression(a, b, w, y, d, anchor, float(pred), float(nu))


def difference_points(data: OrderedDataset) -> pd.DataFrame:
    """D と打ち切り時刻の関係（プロット用）。回帰直線は attrs に入る"""
    return predicted_difference(data).to_frame()


# =========================
# パイプライン
# =========================

def _to_time(log_time: float) -> float:
    if not np.isfinite(log_time) or log_time >= _MAX_LOG_TIME:
        raise ImputedTimeOverflow(f"imputed log time {log_time:.6g} has no finite value on the time scale")
    return float(np.exp(log_time))


def _fit(data: OrderedDataset, lambda2, options: PipelineOptions, tail_correction: bool = True) -> AftFit:
    return fit_penalized_swls(
        data, lambda2, tail_correction,
        relax_infeasible=options.relax_infeasible, constraint_rows=options.constraint_rows,
    )


def _refit(data: OrderedDataset, imputed_log_time: float, lambda2, options: PipelineOptions) -> AftFit:
    return _fit(data.with_last(time=_to_time(imputed_log_time), status=1), lambda2, options)


def _tail_increment(km, anchor: float, median: bool):
    tv = conditional_tail_median(km, anchor) if median else conditional_tail_mean(km, anchor)
    if tv.empty_tail:
        return 0.0, True
    return tv.value - anchor, False


def _resampled_tau(data: OrderedDataset, beta, median: bool, options: PipelineOptions):
    """τ* を B 個の Z ドローで平均する（B=1 なら単一ドロー）"""
    res = ResidualSet.from_fit(data, beta)
    anchor = float(res.residuals[-1])
    vals = []
    for ss in np.random.SeedSequence([options.seed, 1]).spawn(options.tau_draws):
        z = np.random.default_rng(ss).exponential(1.0, size=data.n)
        inc, empty = _tail_increment(residual_km_weighted(res, z), anchor, median)
        if not empty:
            vals.append(inc)
    if not vals:
        return 0.0, True
    return float(np.mean(vals)), False


def run_pipeline(
    data: OrderedDataset,
    method: ImputationMethod,
    lambda2: Optional[float] = None,
    options: Optional[PipelineOptions] = None,
) -> ImputationResult:
    method = ImputationMethod(method)
    options = options or PipelineOptions()
    if method in (ImputationMethod.LN_AFT, ImputationMethod.EFRON):
        # LN_AFT は補正なしの K-M 重みで当てはめる基準線
        fit = _fit(data, lambda2, options, tail_correction=method is ImputationMethod.EFRON)
        return ImputationResult(method, fit, flags=fit.flags)

    if data.statuses[-1] == 1:
        raise LargestNotCensored(f"{method.value}: the largest observation is not censored")
    y_n = float(data.log_times[-1])
    flags = set()
    draws = None

    if method in (ImputationMethod.COND_MEAN, ImputationMethod.COND_MEDIAN):
        w0 = _fit(data, lambda2, options)
        res = ResidualSet.from_fit(data, w0.beta)
        tau, empty = _tail_increment(
            residual_km(res), float(res.residuals[-1]), method is ImputationMethod.COND_MEDIAN
        )
    elif method in (ImputationMethod.RESAMP_COND_MEAN, ImputationMethod.RESAMP_COND_MEDIAN):
        if data.p < 2:
            raise InsufficientCovariates(f"{method.value} needs at least two covariates, got {data.p}")
        draws = bj_resample_distribution(
            data, lambda2, m=options.m, n_draws=options.n_draws, rng_seed=options.seed,
            relax_infeasible=options.relax_infeasible, constraint_rows=options.constraint_rows,
        )
        tau, empty = _resampled_tau(
            data, draws.mean(axis=0), method is ImputationMethod.RESAMP_COND_MEDIAN, options
        )
    else:
        dr = predicted_difference(data)
        tau, empty = dr.nu, False
        if dr.clamped:
            flags.add(CLAMPED_NU)

    if empty:
        flags.add(EMPTY_TAIL)
        logger.warning("%s: empty residual tail above the largest censored observation; tau = 0", method.value)
    imputed = y_n + tau
    logger.info("%s: tau=%.6g imputed log time %.6g (censored %.6g)", method.value, tau, imputed, y_n)
    fit = _refit(data, imputed, lambda2, options)
    return ImputationResult(
        method=method,
        fit=fit,
        imputed_log_time=imputed,
        censored_log_time=y_n,
        tau=float(tau),
        flags=frozenset(flags | set(fit.flags)),
        draws=draws,
    )


# =========================
# 最大値の同順位（tail ties）
# =========================

def _tied_maxima(data: OrderedDataset) -> np.ndarray:
    if data.statuses[-1] == 1:
        raise LargestNotCensored("the largest observation is not censored")
    t_max = data.times[-1]
    return np.flatnonzero((data.times == t_max) & (data.statuses == 0))


@dataclass(frozen=True, eq=False)
class TailTieResult:
    log_times: np.ndarray
    nus: np.ndarray
    censored_log_time: float
    flags: frozenset = field(default_factory=frozenset)

    @property
    def lifetimes(self) -> np.ndarray:
        return np.exp(self.log_times)


def tail_ties_iterative(data: OrderedDataset) -> TailTieResult:
    """
    同順位の最大打ち切り観測を 1 件ずつ予測差分法で補完する。
    補完済みの値はイベントとして作業データに残り、次の ν の計算に使われる
    """
    tied = _tied_maxima(data)
    times = np.array(data.times, dtype=float)
    statuses = np.array(data.statuses)
    y_max = float(np.log(times[tied[0]]))
    out, nus, flags = [], [], set()
    for k, q in enumerate(tied, start=1):
        work = order_dataset(SurvivalDataset(times, statuses, data.covariates))
        dr = predicted_difference(work)
        if dr.clamped:
            flags.add(CLAMPED_NU)
        imputed = y_max + dr.nu
        times[q] = _to_time(imputed)
        statuses[q] = 1
        out.append(imputed)
        nus.append(dr.nu)
        logger.debug("tail tie %d/%d: nu=%.6g", k, tied.size, dr.nu)
    return TailTieResult(np.asarray(out), np.asarray(nus), y_max, frozenset(flags))


@dataclass(frozen=True, eq=False)
class ExtrapolationResult:
    lifetimes: np.ndarray
    probabilities: np.ndarray
    intercept: float
    slope: float
    r_squared: float
    psi: float
    censored_time: float
    flags: frozenset = field(default_factory=frozenset)


def tail_ties_extrapolate(data: OrderedDataset, psi: float = 1.0) -> ExtrapolationResult:
    """
    K-M 曲線の支持点で 寿命 ~ Ŝ(t)^ψ を OLS で当てはめ、最後の生存確率より下の
    等間隔の確率 p_k = Ŝ_last·(1 - k/m) での寿命を返す（元の時間単位）
    """
    if psi <= 0:
        raise ValueError("psi must be positive")
    tied = _tied_maxima(data)
    m = tied.size
    curve = km_estimate(data, tail_correction=False)
    if curve.event_times.size < 2:
        raise DegenerateCurve("Kaplan-Meier curve has fewer than 2 support points")
    s = curve.survival ** psi
    if np.ptp(s) == 0:
        raise DegenerateCurve("Kaplan-Meier curve is flat over its support points")
    fit = sm.OLS(curve.event_times, sm.add_constant(s, has_constant="add")).fit()
    a, b = (float(v) for v in fit.params)
    probs = curve.final_survival * (1.0 - np.arange(1, m + 1) / m)
    lifetimes = a + b * probs ** psi
    t_max = float(data.times[-1])
    flags = set()
    if b >= 0:
        flags.add("NonDecreasingTrend")
        logger.warning("lifetime trend in survival is not decreasing (slope %.4g)", b)
    if np.any(lifetimes < t_max):
        flags.add(SUB_CENSORING)
        logger.warning("%d extrapolated lifetimes fall below the censoring time %g",
                       int(np.sum(lifetimes < t_max)), t_max)
    return ExtrapolationResult(lifetimes, probs, a, b, float(fit.rsquared), float(psi), t_max, frozenset(flags))


def refit_with_tail_ties(
    data: OrderedDataset,
    imputed_times: Sequence[float],
    lambda2: Optional[float] = None,
    relax_infeasible: bool = True,
    constraint_rows: str = "unweighted",
) -> AftFit:
    """同順位の最大値を補完寿命で置き換え、イベント扱いにして当てはめ直す"""
    tied = _tied_maxima(data)
    imputed_times = np.asarray(imputed_times, dtype=float).ravel()
    if imputed_times.size != tied.size:
        raise ValueError(f"expected {tied.size} imputed lifetimes, got {imputed_times.size}")
    times = np.array(data.times, dtype=float)
    statuses = np.array(data.statuses)
    times[tied] = imputed_times
    statuses[tied] = 1
    modified = order_dataset(SurvivalDataset(times, statuses, data.covariates))
    return fit_penalized_swls(
        modified, lambda2, True, relax_infeasible=relax_infeasible, constraint_rows=constraint_rows
    )
