# core/simulate.py
from __future__ import annotations
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import cholesky

from core.errors import CalibrationFailed, CensAftError
from core.impute import ImputationMethod, run_pipeline
from core.km import SurvivalDataset, order_dataset
from core.models import SimConfig
from core.swls import default_ridge

logger = logging.getLogger(__name__)

MAX_REDRAWS = 1000
MAX_BISECTIONS = 200


def resolve_threads(threads: Optional[int] = None) -> int:
    """CENSAFT_THREADS（0 = 自動）"""
    if threads is None:
        try:
            threads = int(os.getenv("CENSAFT_THREADS", "0"))
        except ValueError:
            threads = 0
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


# =========================
# データ生成
# =========================

def gen_covariates(n: int, p: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """相関 rho^|i-j| の多変量正規（相関行列のコレスキー因子で作る）"""
    if abs(rho) >= 1:
        raise ValueError("|rho| must be below 1")
    idx = np.arange(p)
    R = float(rho) ** np.abs(idx[:, None] - idx[None, :])
    L = cholesky(R, lower=True)
    return rng.standard_normal((n, p)) @ L.T


def _latent_times(config: SimConfig, n: int, rng: np.random.Generator):
    X = gen_covariates(n, config.p, config.rho, rng)
    y = config.alpha + X @ np.asarray(config.beta) + config.sigma * rng.standard_normal(n)
    return X, np.exp(y)


def calibrate_censoring(config: SimConfig, rng: np.random.Generator) -> float:
    """
    C ~ U(a, 2a) の a を二分法で決める。パイロットの乱数は共通に使うので
    打ち切り率は a について単調
    """
    target = config.target_censoring
    if not 0 < target < 100:
        raise ValueError("target_censoring must lie in (0, 100) for calibration")
    _, T = _latent_times(config, config.pilot_size, rng)
    U = rng.uniform(size=config.pilot_size)

    def rate(a: float) -> float:
        return 100.0 * float(np.mean(T > a * (1.0 + U)))

    lo, hi = 1e-6, 1.0
    if rate(lo) < target:
        raise CalibrationFailed(f"target {target}% is not reachable (max pilot rate {rate(lo):.2f}%)")
    for _ in range(MAX_BISECTIONS):
        if rate(hi) <= target:
            break
        hi *= 2.0
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target) <= config.calibration_tolerance:
            logger.info("calibrated a=%.6g (pilot censoring %.2f%%, target %.1f%%)", mid, r, target)
            return mid
        if r > target:
            lo = mid
        else:
            hi = mid
    raise CalibrationFailed(f"bisection did not reach {target}% within {MAX_BISECTIONS} steps")


def gen_dataset(
    config: SimConfig,
    a: float,
    rng: np.random.Generator,
    force_censored_max: Optional[bool] = None,
) -> SurvivalDataset:
    """
    T* = min(T, C), δ = 1{T <= C}。最大観測が打ち切りになるまで打ち切り時間だけ引き直し、
    MAX_REDRAWS 回で駄目なら最大 T の観測の打ち切り時間を上書きする
    """
    force = config.force_censored_max if force_censored_max is None else force_censored_max
    X, T = _latent_times(config, config.n, rng)

    def draw():
        C = a * (1.0 + rng.uniform(size=config.n))
        return np.minimum(T, C), (T <= C).astype(np.int64)

    obs, st = draw()
    if force:
        for _ in range(MAX_REDRAWS):
            if st[np.argmax(obs)] == 0:
                break
            obs, st = draw()
        else:
            i = int(np.argmax(T))
            others = np.delete(obs, i)
            lo = max(a, float(others.max())) if others.size else a
            lo = min(lo, T[i])
            obs[i] = rng.uniform(lo, T[i]) if lo < T[i] else T[i]
            st[i] = 0
            logger.debug("censored maximum forced by overwriting observation %d", i)
    return SurvivalDataset(obs, st, X)


# =========================
# 集計
# =========================

@dataclass(frozen=True, eq=False)
class StudyReport:
    config: SimConfig
    methods: List[str]
    true_beta: np.ndarray
    estimates: Dict[str, np.ndarray]
    replication_ids: Dict[str, np.ndarray]
    failures: Dict[str, Dict[str, int]]
    censoring_rates: np.ndarray
    calibrated_a: float

    @property
    def replications(self) -> int:
        return int(self.censoring_rates.size)

    def _stats(self, method: str):
        est = self.estimates[method]
        if est.shape[0] == 0:
            nan = np.full(self.true_beta.size, np.nan)
            return nan, nan, nan
        bias = est.mean(axis=0) - self.true_beta
        var = est.var(axis=0)
        mse = np.mean((est - self.true_beta) ** 2, axis=0)
        return bias, var, mse

    def bias(self, method: str) -> np.ndarray:
        return self._stats(method)[0]

    def variance(self, method: str) -> np.ndarray:
        return self._stats(method)[1]

    def mse(self, method: str) -> np.ndarray:
        return self._stats(method)[2]

    @property
    def failure_count(self) -> int:
        return int(sum(sum(v.values()) for v in self.failures.values()))

    def to_frame(self) -> pd.DataFrame:
        """method × 係数 × 統計量 の縦長表"""
        rows = []
        for m in self.methods:
            stats = dict(zip(("bias", "variance", "mse"), self._stats(m)))
            label = ImputationMethod(m).label
            for j in range(self.true_beta.size):
                for name, vals in stats.items():
                    rows.append({"method": m, "label": label, "coefficient": f"beta{j + 1}",
                                 "statistic": name, "value": float(vals[j])})
        return pd.DataFrame(rows, columns=["method", "label", "coefficient", "statistic", "value"])

    def estimates_frame(self) -> pd.DataFrame:
        """各反復の推定値（箱ひげ図の元データ）"""
        frames = []
        cols = [f"beta{j + 1}" for j in range(self.true_beta.size)]
        for m in self.methods:
            df = pd.DataFrame(self.estimates[m], columns=cols)
            df.insert(0, "method", m)
            df.insert(0, "replication", self.replication_ids[m])
            frames.append(df)
        return pd.concat(frames, ignore_index=True)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g")

    def to_dict(self) -> dict:
        summary = {}
        for m in self.methods:
            bias, var, mse = self._stats(m)
            summary[m] = {
                "label": ImputationMethod(m).label,
                "n": int(self.estimates[m].shape[0]),
                "bias": [float(v) for v in bias],
                "variance": [float(v) for v in var],
                "mse": [float(v) for v in mse],
            }
        rates = self.censoring_rates
        return {
            "config": self.config.model_dump(),
            "replications": self.replications,
            "calibrated_a": self.calibrated_a,
            "censoring": {"mean": float(rates.mean()), "min": float(rates.min()), "max": float(rates.max())},
            "summary": summary,
            "failures": self.failures,
        }

    def to_json(self, path=None) -> str:
        s = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8") as f:
                f.write(s)
        return s


@dataclass
class _Replication:
    index: int
    censoring_rate: float
    estimates: Dict[str, np.ndarray] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)


def _run_replication(config: SimConfig, methods: Sequence[str], a: float, lambda2: float,
                     ss: np.random.SeedSequence, r: int) -> _Replication:
    rng = np.random.default_rng(ss)
    data = gen_dataset(config, a, rng)
    options = config.pipeline_options(int(rng.integers(0, 2**32 - 1)))
    out = _Replication(r, data.censoring_rate * 100.0)
    ordered = order_dataset(data)
    for m in methods:
        try:
            out.estimates[m] = run_pipeline(ordered, m, lambda2, options).fit.beta
        except CensAftError as e:
            out.failures[m] = type(e).__name__
            logger.warning("replication %d, %s failed: %s", r, m, e)
    return out


def run_study(
    config: SimConfig,
    methods: Optional[Sequence[str]] = None,
    lambda2_rule: Optional[Callable[[int], float]] = None,
    threads: Optional[int] = None,
) -> StudyReport:
    """反復 r の乱数は (seed, r) から決まる。集計は反復番号順なのでスレッド数に依存しない"""
    if config.replications < 2:
        raise ValueError("replications must be at least 2")
    methods = [ImputationMethod(m).value for m in (methods or config.methods)]
    if config.lambda2 is not None:
        lambda2 = config.lambda2
    else:
        lambda2 = (lambda2_rule or default_ridge)(config.p)

    root = np.random.SeedSequence(config.seed)
    cal_ss, *rep_ss = root.spawn(config.replications + 1)
    if config.target_censoring > 0:
        a = calibrate_censoring(config, np.random.default_rng(cal_ss))
    else:
        a = math.inf

    workers = min(resolve_threads(threads), config.replications)
    logger.info("study: %d replications, methods=%s, threads=%d", config.replications, methods, workers)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(_run_replication, config, methods, a, lambda2, ss, r)
                   for r, ss in enumerate(rep_ss)]
        results = [f.result() for f in futures]

    p = config.p
    estimates, ids, failures = {}, {}, {}
    for m in methods:
        ok = [res for res in results if m in res.estimates]
        estimates[m] = np.array([res.estimates[m] for res in ok]).reshape(-1, p)
        ids[m] = np.array([res.index for res in ok], dtype=np.int64)
        counts: Dict[str, int] = {}
        for res in results:
            if m in res.failures:
                counts[res.failures[m]] = counts.get(res.failures[m], 0) + 1
        failures[m] = dict(sorted(counts.items()))
    return StudyReport(
        config=config,
        methods=methods,
        true_beta=np.asarray(config.beta, dtype=float),
        estimates=estimates,
        replication_ids=ids,
        failures=failures,
        censoring_rates=np.array([res.censoring_rate for res in results]),
        calibrated_a=float(a),
    )
