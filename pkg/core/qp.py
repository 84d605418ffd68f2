# core/qp.py
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import linprog

from core.errors import Infeasible, InvalidProblem, IterationLimit, NotPositiveDefinite

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class QpProblem:
    """min -dᵀb + ½ bᵀDb  s.t.  A b >= b0"""
    d: np.ndarray
    D: np.ndarray
    A: Optional[np.ndarray] = None
    b0: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).ravel()
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p = d.size
        if D.shape != (p, p):
            raise InvalidProblem(f"D must be {p}x{p}, got {D.shape}")
        A = np.zeros((0, p)) if self.A is None else np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.size == 0:
            A = np.zeros((0, p))
        b0 = np.zeros(0) if self.b0 is None else np.asarray(self.b0, dtype=float).ravel()
        if A.shape[1] != p or A.shape[0] != b0.size:
            raise InvalidProblem(f"constraint shapes do not match: A={A.shape}, b0={b0.size}, p={p}")
        scale = max(1.0, float(np.abs(D).max(initial=0.0)))
        if np.abs(D - D.T).max(initial=0.0) > 1e-10 * scale:
            raise InvalidProblem("D must be symmetric")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(D)) and np.all(np.isfinite(A)) and np.all(np.isfinite(b0))):
            raise InvalidProblem("problem data must be finite")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "D", 0.5 * (D + D.T))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b0", b0)

    @property
    def p(self) -> int:
        return int(self.d.size)

    @property
    def m(self) -> int:
        return int(self.b0.size)

    def objective(self, b: np.ndarray) -> float:
        return float(-self.d @ b + 0.5 * b @ self.D @ b)


@dataclass(frozen=True, eq=False)
class QpSolution:
    b: np.ndarray
    active_set: Tuple[int, ...]
    multipliers: np.ndarray
    kkt_residual: float
    iterations: int
    objective: float = field(default=float("nan"))

    def summary(self) -> dict:
        return {
            "active_set": list(self.active_set),
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "objective": self.objective,
        }


def kkt_residual(problem: QpProblem, b: np.ndarray, mu: np.ndarray) -> float:
    """KKT 条件の最大違反量。停留性は問題のスケールで割った相対値"""
    grad = problem.D @ b - problem.d
    stat = grad - problem.A.T @ mu if problem.m else grad
    scale = max(1.0, float(np.abs(problem.d).max(initial=0.0)),
                float(np.abs(problem.D).max(initial=0.0)) * float(np.abs(b).max(initial=0.0)))
    res = float(np.abs(stat).max(initial=0.0)) / scale
    if problem.m:
        slack = problem.A @ b - problem.b0
        res = max(res,
                  float(np.maximum(-slack, 0.0).max(initial=0.0)),
                  float(np.maximum(-mu, 0.0).max(initial=0.0)),
                  float(np.abs(mu * slack).max(initial=0.0)) / scale)
    return res


def _factor(D: np.ndarray):
    try:
        return cho_factor(D, lower=True, check_finite=False)
    except LinAlgError as e:
        raise NotPositiveDefinite(f"Cholesky factorization of D failed: {e}") from e


def _solve_eqp(cho, problem: QpProblem, working: list) -> Tuple[np.ndarray, np.ndarray]:
    """作業集合を等式制約とした部分問題（Schur 補元）。戻り値は (b, 作業集合の乗数)"""
    b_free = cho_solve(cho, problem.d, check_finite=False)
    if not working:
        return b_free, np.zeros(0)
    Aw = problem.A[working]
    Y = cho_solve(cho, Aw.T, check_finite=False)
    S = Aw @ Y
    rhs = problem.b0[working] - Aw @ b_free
    mu = np.linalg.lstsq(S, rhs, rcond=None)[0]
    return b_free + Y @ mu, mu


def feasible_start(problem: QpProblem, tol: float = DEFAULT_TOL) -> np.ndarray:
    """フェーズ1: max s s.t. A b - s >= b0, s <= 1 を LP で解き、内側寄りの実行可能点を返す"""
    p, m = problem.p, problem.m
    c = np.zeros(p + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-problem.A, np.ones((m, 1))])
    b_ub = -problem.b0
    bounds = [(None, None)] * p + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0 or res.x is None:
        raise Infeasible(f"feasibility phase failed: {res.message}")
    margin = float(res.x[-1])
    scale = max(1.0, float(np.abs(problem.b0).max(initial=0.0)))
    if margin < -tol * scale:
        raise Infeasible(
            f"constraints cannot all hold (best common slack {margin:.6g})",
            margin=margin,
            point=np.asarray(res.x[:p], dtype=float),
        )
    logger.debug("phase-1 slack=%.3g", margin)
    return np.asarray(res.x[:p], dtype=float)


def solve_qp(problem: QpProblem, tol: float = DEFAULT_TOL, max_iter: Optional[int] = None) -> QpSolution:
    """主 active-set 法。Bland 則（最小添字）で出入りを決める"""
    if tol <= 0:
        raise InvalidProblem("tol must be positive")
    p, m = problem.p, problem.m
    if max_iter is None:
        max_iter = 50 * (p + m)
    cho = _factor(problem.D)

    b = cho_solve(cho, problem.d, check_finite=False)
    if m == 0 or np.all(problem.A @ b >= problem.b0 - tol):
        mu = np.zeros(m)
        return QpSolution(b, (), mu, kkt_residual(problem, b, mu), 0, problem.objective(b))

    b = feasible_start(problem, tol)
    working: list = []
    mu_w = np.zeros(0)
    for it in range(1, max_iter + 1):
        b_eq, mu_w = _solve_eqp(cho, problem, working)
        step = b_eq - b
        if np.abs(step).max() <= tol * (1.0 + np.abs(b).max()):
            b = b_eq
            neg = [k for k, v in zip(working, mu_w) if v < -tol]
            if not neg:
                mu = np.zeros(m)
                mu[working] = np.maximum(mu_w, 0.0)
                res = kkt_residual(problem, b, mu)
                logger.debug("qp converged: iter=%d active=%s kkt=%.3g", it, sorted(working), res)
                return QpSolution(b, tuple(sorted(working)), mu, res, it, problem.objective(b))
            leave = min(neg)
            working.remove(leave)
            logger.debug("iter %d: drop constraint %d", it, leave)
            continue

        # ratio test
        alpha, enter = 1.0, None
        Ap = problem.A @ step
        slack = problem.A @ b - problem.b0
        for i in range(m):
            if i in working or Ap[i] >= -1e-14:
                continue
            a_i = max(slack[i], 0.0) / -Ap[i]
            if a_i < alpha:
                alpha, enter = a_i, i
        b = b + alpha * step
        if enter is not None:
            working.append(enter)
            logger.debug("iter %d: step %.3g, add constraint %d", it, alpha, enter)

    mu = np.zeros(m)
    if working and mu_w.size == len(working):
        mu[working] = np.maximum(mu_w, 0.0)
    best = QpSolution(b, tuple(sorted(working)), mu, kkt_residual(problem, b, mu), max_iter, problem.objective(b))
    raise IterationLimit(f"active-set method did not converge in {max_iter} iterations", solution=best)
