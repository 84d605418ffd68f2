# core/swls.py
from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from core.errors import AllWeightsZero, Infeasible, NonPositiveZ, NoUncensored, RankDeficient
from core.km import OrderedDataset, StuteWeights, stute_weights
from core.qp import DEFAULT_TOL, QpProblem, feasible_start, solve_qp

logger = logging.getLogger(__name__)

CONSTRAINTS_DROPPED = "ConstraintsDropped"
CONSTRAINT_ROWS = ("unweighted", "weighted")


@dataclass(frozen=True, eq=False)
class WeightedDesign:
    """
    重み付き中心化したデザイン。
    - 非打ち切り行: sqrt(w_i) * (X_(i) - X̄_w), sqrt(w_i) * (Y_(i) - Ȳ_w)
    - 打ち切り行: 既定では重みを掛けない中心化値（sqrt(0)=0 を掛けると制約が消える）
    """
    xw_uncensored: np.ndarray
    yw_uncensored: np.ndarray
    xw_censored: np.ndarray
    yw_censored: np.ndarray
    xbar_w: np.ndarray
    ybar_w: float
    weights: StuteWeights
    uncensored_index: np.ndarray
    censored_index: np.ndarray

    @property
    def p(self) -> int:
        return int(self.xbar_w.size)


@dataclass(frozen=True, eq=False)
class AftFit:
    beta: np.ndarray
    intercept: float
    lambda2: float
    qp_diagnostics: dict
    n_active_censoring_constraints: int
    tail_corrected: bool = True
    dropped_constraints: int = 0
    flags: frozenset = field(default_factory=frozenset)
    # 外した打ち切り制約の行（順序付きデータでの位置）
    dropped_rows: tuple = ()

    def predict(self, X) -> np.ndarray:
        """log 時間スケールの予測値 α̂ + Xβ̂"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.intercept + X @ self.beta

    def to_dict(self) -> dict:
        return {
            "beta": [float(v) for v in self.beta],
            "intercept": float(self.intercept),
            "lambda2": float(self.lambda2),
            "active_constraints": int(self.n_active_censoring_constraints),
            "dropped_constraints": int(self.dropped_constraints),
            "dropped_rows": list(self.dropped_rows),
            "flags": sorted(self.flags),
            "qp": self.qp_diagnostics,
        }


def default_ridge(p: int) -> float:
    """λ2 = 0.01·sqrt(2 ln p)"""
    if p < 1:
        raise ValueError("p must be at least 1")
    return 0.01 * math.sqrt(2.0 * math.log(p))


def weighted_center(data: OrderedDataset, weights: StuteWeights, constraint_rows: str = "unweighted") -> WeightedDesign:
    """
    constraint_rows="unweighted": 打ち切り行は重みを掛けない中心化値
    constraint_rows="weighted": 打ち切り行にも sqrt(w_i) を掛ける（w_i=0 なので制約は空になる）
    """
    if constraint_rows not in CONSTRAINT_ROWS:
        raise ValueError(f"constraint_rows must be one of {CONSTRAINT_ROWS}, got {constraint_rows!r}")
    w = np.asarray(weights.weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise AllWeightsZero("all Stute weights are zero; no uncensored observation carries mass")
    X = data.covariates
    Y = data.log_times
    xbar = (w @ X) / total
    ybar = float(w @ Y / total)
    Xc = X - xbar
    Yc = Y - ybar
    sw = np.sqrt(w)
    unc = np.flatnonzero(weights.statuses == 1)
    cen = np.flatnonzero(weights.statuses == 0)
    cs = sw[cen] if constraint_rows == "weighted" else np.ones(cen.size)
    return WeightedDesign(
        xw_uncensored=sw[unc, None] * Xc[unc],
        yw_uncensored=sw[unc] * Yc[unc],
        xw_censored=cs[:, None] * Xc[cen],
        yw_censored=cs * Yc[cen],
        xbar_w=xbar,
        ybar_w=ybar,
        weights=weights,
        uncensored_index=unc,
        censored_index=cen,
    )


def _live_constraints(design: WeightedDesign) -> np.ndarray:
    # 中心化後ゼロ行で右辺 <= 0 の制約は常に成り立つので落とす
    A, b0 = design.xw_censored, design.yw_censored
    zero_row = np.all(np.abs(A) <= 1e-14, axis=1)
    return ~(zero_row & (b0 <= 0))


def build_qp(design: WeightedDesign, lambda2: float, z: Optional[np.ndarray] = None) -> QpProblem:
    """
    D = X_uᵀ Z X_u + λ2 I, d = X_uᵀ Z Y_u, A = X_ū, b0 = Y_ū
    z は非打ち切り行の倍率（None なら 1）。制約行はスケールしない
    """
    if lambda2 < 0:
        raise ValueError("lambda2 must be nonnegative")
    Xu, Yu = design.xw_uncensored, design.yw_uncensored
    zu = np.ones(Xu.shape[0]) if z is None else np.asarray(z, dtype=float)
    D = Xu.T @ (zu[:, None] * Xu) + lambda2 * np.eye(design.p)
    d = Xu.T @ (zu * Yu)
    if lambda2 == 0 and np.linalg.matrix_rank(D) < design.p:
        raise RankDeficient("uncensored weighted design is rank deficient and lambda2 = 0")
    keep = _live_constraints(design)
    return QpProblem(d=d, D=D, A=design.xw_censored[keep], b0=design.yw_censored[keep])


def feasible_rows(problem: QpProblem, tol: float = DEFAULT_TOL) -> np.ndarray:
    """
    同時に満たせる制約行の添字。フェーズ1 LP の最良点で最も違反している行
    （共通スラックに張り付いた行）だけを外し、残りが実行可能になるまで繰り返す。
    """
    rows = np.arange(problem.m)
    scale = max(1.0, float(np.abs(problem.b0).max(initial=0.0)))
    while rows.size:
        sub = QpProblem(problem.d, problem.D, problem.A[rows], problem.b0[rows])
        try:
            feasible_start(sub, tol)
            break
        except Infeasible as e:
            if e.point is None or e.margin is None:
                raise
            slack = sub.A @ e.point - sub.b0
            worst = slack <= e.margin + tol * scale
            if not worst.any():
                worst = slack <= slack.min()
            logger.debug("phase-1 slack %.4g; dropping rows %s", e.margin, rows[worst].tolist())
            rows = rows[~worst]
    return rows


def _solve(design: WeightedDesign, lambda2: float, z, tol: float, relax_infeasible: bool) -> AftFit:
    problem = build_qp(design, lambda2, z)
    positions = design.censored_index[_live_constraints(design)]
    dropped: tuple = ()
    flags = set()
    try:
        sol = solve_qp(problem, tol=tol)
    except Infeasible as e:
        if not relax_infeasible:
            raise
        rows = feasible_rows(problem, tol)
        dropped = tuple(int(i) for i in np.setdiff1d(positions, positions[rows]))
        logger.warning("censoring constraints infeasible (best common slack %s); dropped %d of %d constraints",
                       "n/a" if e.margin is None else f"{e.margin:.4g}", len(dropped), problem.m)
        flags.add(CONSTRAINTS_DROPPED)
        sol = solve_qp(QpProblem(problem.d, problem.D, problem.A[rows], problem.b0[rows]), tol=tol)

    beta = sol.b
    intercept = float(design.ybar_w - design.xbar_w @ beta)
    return AftFit(
        beta=beta,
        intercept=intercept,
        lambda2=float(lambda2),
        qp_diagnostics=sol.summary(),
        n_active_censoring_constraints=len(sol.active_set),
        tail_corrected=design.weights.tail_corrected,
        dropped_constraints=len(dropped),
        flags=frozenset(flags),
        dropped_rows=dropped,
    )


def fit_penalized_swls(
    data: OrderedDataset,
    lambda2: Optional[float] = None,
    tail_correction: bool = True,
    *,
    tol: float = DEFAULT_TOL,
    relax_infeasible: bool = False,
    constraint_rows: str = "unweighted",
) -> AftFit:
    """リッジ罰則付き Stute 重み付き最小二乗（打ち切り制約付き QP）"""
    if lambda2 is None:
        lambda2 = default_ridge(data.p)
    weights = stute_weights(data, tail_correction)
    if not np.any(weights.statuses == 1):
        raise NoUncensored("no uncensored observation to fit")
    design = weighted_center(data, weights, constraint_rows)
    return _solve(design, lambda2, None, tol, relax_infeasible)


def fit_resampled_swls(
    data: OrderedDataset,
    lambda2: Optional[float],
    z: Sequence[float],
    tail_correction: bool = True,
    *,
    tol: float = DEFAULT_TOL,
    relax_infeasible: bool = False,
    constraint_rows: str = "unweighted",
) -> AftFit:
    """各観測に倍率 Z_i を掛けた版。Z_i > 0 なので打ち切り制約は倍率なしと同値"""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != data.n:
        raise NonPositiveZ(f"z must have length {data.n}, got {z.size}")
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise NonPositiveZ("resampling multipliers must be strictly positive")
    if lambda2 is None:
        lambda2 = default_ridge(data.p)
    weights = stute_weights(data, tail_correction)
    if not np.any(weights.statuses == 1):
        raise NoUncensored("no uncensored observation to fit")
    design = weighted_center(data, weights, constraint_rows)
    return _solve(design, lambda2, z[design.uncensored_index], tol, relax_infeasible)
