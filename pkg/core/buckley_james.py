# core/buckley_james.py
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from core.errors import NonPositiveZ, SingularDesign
from core.km import OrderedDataset
from core.swls import fit_resampled_swls

logger = logging.getLogger(__name__)

BJ_MAX_M = 50
BJ_TOL = 1e-6
RESAMPLE_DRAWS = 100
RESAMPLE_M = 3

_MASS_EPS = 1e-14


@dataclass(frozen=True, eq=False)
class ResidualSet:
    residuals: np.ndarray
    statuses: np.ndarray
    beta_used: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.residuals, dtype=float).ravel()
        s = np.asarray(self.statuses).astype(np.int64).ravel()
        if r.size != s.size or r.size < 1:
            raise ValueError("residuals and statuses must have equal, nonzero length")
        if not np.all(np.isfinite(r)):
            raise ValueError("residuals must be finite")
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "statuses", s)
        object.__setattr__(self, "beta_used", np.asarray(self.beta_used, dtype=float).ravel())

    @classmethod
    def from_fit(cls, data: OrderedDataset, beta, statuses=None) -> "ResidualSet":
        """ξ_i = Y_i - X_iᵀβ（切片は含めない）"""
        beta = np.asarray(beta, dtype=float)
        st = data.statuses if statuses is None else statuses
        return cls(data.log_times - data.covariates @ beta, st, beta)


@dataclass(frozen=True, eq=False)
class ResidualKm:
    """残差の K-M 分布。atoms は相異なるイベント残差（昇順）"""
    atoms: np.ndarray
    cdf: np.ndarray
    jumps: np.ndarray
    z: Optional[np.ndarray] = None

    def cdf_at(self, x):
        idx = np.searchsorted(self.atoms, np.asarray(x, dtype=float), side="right") - 1
        padded = np.concatenate(([0.0], self.cdf))
        out = padded[idx + 1]
        return float(out) if np.ndim(out) == 0 else out

    @property
    def total_mass(self) -> float:
        return float(self.jumps.sum())


class TailValue(NamedTuple):
    value: float
    empty_tail: bool

    def __float__(self) -> float:
        return float(self.value)


def _product_limit(res: ResidualSet, z: np.ndarray) -> ResidualKm:
    xi, st = res.residuals, res.statuses
    order = np.lexsort((1 - st, xi))
    xs, ss, zs = xi[order], st[order], z[order]
    ev = ss == 1
    atoms, inv = np.unique(xs[ev], return_inverse=True)
    d = np.zeros(atoms.size)
    np.add.at(d, inv, zs[ev])
    suffix = np.concatenate((np.cumsum(zs[::-1])[::-1], [0.0]))
    r = suffix[np.searchsorted(xs, atoms, side="left")]
    surv = np.cumprod(1.0 - d / r)
    prev = np.concatenate(([1.0], surv[:-1]))
    return ResidualKm(atoms=atoms, cdf=1.0 - surv, jumps=prev - surv)


def residual_km(res: ResidualSet) -> ResidualKm:
    return _product_limit(res, np.ones(res.residuals.size))


def _check_z(z, n: int) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    if z.size != n:
        raise NonPositiveZ(f"z must have length {n}, got {z.size}")
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise NonPositiveZ("resampling multipliers must be strictly positive")
    return z


def residual_km_weighted(res: ResidualSet, z: Sequence[float]) -> ResidualKm:
    """イベント数とリスク集合の両方に Z_i を掛けた K-M"""
    z = _check_z(z, res.residuals.size)
    km = _product_limit(res, z)
    return ResidualKm(km.atoms, km.cdf, km.jumps, z)


def _tail(km: ResidualKm, anchor: float):
    k = np.searchsorted(km.atoms, anchor, side="right")
    atoms, jumps = km.atoms[k:], km.jumps[k:]
    mass = float(jumps.sum())
    return atoms, jumps, mass


def conditional_tail_mean(km: ResidualKm, anchor: float) -> TailValue:
    """
    anchor より大きい残差の条件付き平均。
    分母は anchor より上のジャンプ量の合計（曲線が 1 に届くときは 1 - F̂(anchor) と一致）
    """
    atoms, jumps, mass = _tail(km, anchor)
    if mass <= _MASS_EPS:
        return TailValue(0.0, True)
    return TailValue(float(atoms @ jumps / mass), False)


def conditional_tail_median(km: ResidualKm, anchor: float) -> TailValue:
    """累積条件付き質量が 0.5 に達する最小の原子。ちょうど 0.5 は小さい方"""
    atoms, jumps, mass = _tail(km, anchor)
    if mass <= _MASS_EPS:
        return TailValue(0.0, True)
    cum = np.cumsum(jumps) / mass
    k = int(np.searchsorted(cum, 0.5 - 1e-12, side="left"))
    return TailValue(float(atoms[min(k, atoms.size - 1)]), False)


class ImputedResponses(NamedTuple):
    values: np.ndarray
    empty_tail: np.ndarray


def _tail_means(km: ResidualKm, anchors: np.ndarray):
    """各 anchor の条件付き平均をまとめて計算"""
    uj = np.concatenate((np.cumsum((km.atoms * km.jumps)[::-1])[::-1], [0.0]))
    jj = np.concatenate((np.cumsum(km.jumps[::-1])[::-1], [0.0]))
    k = np.searchsorted(km.atoms, anchors, side="right")
    num, den = uj[k], jj[k]
    empty = den <= _MASS_EPS
    vals = np.where(empty, 0.0, num / np.where(empty, 1.0, den))
    return vals, empty


def bj_imputed_responses(data: OrderedDataset, beta, z: Optional[Sequence[float]] = None) -> ImputedResponses:
    """
    打ち切り観測を X_iᵀβ + E[ξ | ξ > ξ_i] に置き換える。
    非打ち切りはそのまま。裾が空なら観測値のまま（empty_tail=True）
    """
    res = ResidualSet.from_fit(data, beta)
    km = residual_km(res) if z is None else residual_km_weighted(res, z)
    Y = np.array(data.log_times, dtype=float)
    cen = data.statuses == 0
    empty = np.zeros(data.n, dtype=bool)
    if np.any(cen):
        xi = res.residuals[cen]
        tau, emp = _tail_means(km, xi)
        fitted = Y[cen] - xi
        Y[cen] = np.where(emp, Y[cen], fitted + tau)
        empty[cen] = emp
    return ImputedResponses(Y, empty)


def _ls_map(X: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    zt = z / z.sum()
    Xc = X - zt @ X
    yc = y - zt @ y
    G = Xc.T @ (z[:, None] * Xc)
    if np.linalg.matrix_rank(G) < X.shape[1]:
        raise SingularDesign("centered covariate cross-product is not invertible")
    return np.linalg.solve(G, Xc.T @ (z * yc))


@dataclass(frozen=True, eq=False)
class BjTrace:
    beta: np.ndarray
    trace: List[np.ndarray] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def bj_iterate(
    data: OrderedDataset,
    beta0,
    max_m: int = BJ_MAX_M,
    tol: float = BJ_TOL,
    z: Optional[Sequence[float]] = None,
) -> BjTrace:
    """β_(m) = L(β_(m-1))。z を渡すと F̂* と Z 重み付き最小二乗で回す"""
    beta = np.asarray(beta0, dtype=float).ravel()
    trace = [beta.copy()]
    zz = np.ones(data.n) if z is None else _check_z(z, data.n)
    X = data.covariates
    if max_m <= 0:
        return BjTrace(beta, trace, 0, False)
    # 逆行列の存在は最初に確認しておく
    _ls_map(X, data.log_times, zz)
    for m in range(1, max_m + 1):
        y_hat = bj_imputed_responses(data, beta, z).values
        new = _ls_map(X, y_hat, zz)
        delta = float(np.abs(new - beta).max())
        beta = new
        trace.append(beta.copy())
        logger.debug("bj iter %d: delta=%.3g", m, delta)
        if delta < tol:
            return BjTrace(beta, trace, m, True)
    return BjTrace(beta, trace, max_m, False)


def exponential_z(rng: np.random.Generator, n: int) -> np.ndarray:
    """平均 1・分散 1 の正値乗数"""
    return rng.exponential(1.0, size=n)


def draw_seeds(rng_seed: int, n_draws: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(rng_seed).spawn(n_draws)


def bj_resample_distribution(
    data: OrderedDataset,
    lambda2: Optional[float],
    m: int = RESAMPLE_M,
    n_draws: int = RESAMPLE_DRAWS,
    rng_seed: int = 0,
    *,
    z_sampler: Callable[[np.random.Generator, int], np.ndarray] = exponential_z,
    relax_infeasible: bool = False,
    constraint_rows: str = "unweighted",
) -> np.ndarray:
    """
    再標本化分布（n_draws × p）。各ドローは (rng_seed, ドロー番号) から
    独立に乱数列を作るので、評価順に依存しない
    """
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    out = np.empty((n_draws, data.p))
    for k, ss in enumerate(draw_seeds(rng_seed, n_draws)):
        z = z_sampler(np.random.default_rng(ss), data.n)
        start = fit_resampled_swls(
            data, lambda2, z, relax_infeasible=relax_infeasible, constraint_rows=constraint_rows
        ).beta
        out[k] = bj_iterate(data, start, max_m=m, tol=0.0, z=z).beta
    return out


class ResampleSummary(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    n_draws: int


def resample_summary(draws) -> ResampleSummary:
    """係数ごとの平均と標準偏差（標準誤差として表示する）"""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    n = draws.shape[0]
    std = draws.std(axis=0, ddof=1) if n > 1 else np.full(draws.shape[1], np.nan)
    return ResampleSummary(draws.mean(axis=0), std, n)
