# core/models.py
from __future__ import annotations
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

# =========================
# Pydantic Schemas
# =========================

METHOD_NAMES = ("lnaft", "efron", "cmean", "cmedian", "rmean", "rmedian", "pdiff")


class PipelineOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_draws: int = Field(100, ge=1, description="再標本化のドロー数（rmean/rmedian の初期値）")
    m: int = Field(3, ge=0, description="Z 重み付き Buckley-James の反復回数")
    tau_draws: int = Field(100, ge=1, description="τ* を平均する Z ドロー数（1 なら単一ドロー）")
    seed: int = Field(0, ge=0, description="乱数シード")
    relax_infeasible: bool = Field(
        True, description="打ち切り制約が同時に満たせないとき制約を外して解く"
    )
    constraint_rows: Literal["unweighted", "weighted"] = Field(
        "unweighted", description="打ち切り制約行の作り方（weighted は sqrt(w)=0 を掛けるので制約なしと同じ）"
    )


class SimConfig(BaseModel):
    """シミュレーション設定。設定ファイルはこのフィールド名を持つフラットな JSON"""
    model_config = ConfigDict(extra="forbid")

    n: int = Field(100, ge=2, description="sample size")
    p: int = Field(5, ge=1, description="number of covariates")
    beta: Optional[List[float]] = Field(None, description="true coefficients; default β_j = j + 1")
    sigma: float = Field(1.0, ge=0, description="error scale")
    rho: float = Field(0.0, gt=-1, lt=1, description="covariate correlation base, corr = rho^|i-j|")
    target_censoring: float = Field(30.0, ge=0, lt=100, description="target censoring percentage")
    replications: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    alpha: float = Field(0.0, description="intercept")
    methods: List[str] = Field(default_factory=lambda: list(METHOD_NAMES))
    lambda2: Optional[float] = Field(None, ge=0, description="ridge level; default 0.01·sqrt(2 ln p)")
    pilot_size: int = Field(10000, ge=100, description="calibration pilot draws")
    calibration_tolerance: float = Field(1.0, gt=0, description="percentage points")
    force_censored_max: bool = True
    n_draws: int = Field(100, ge=1)
    resample_m: int = Field(3, ge=0)
    tau_draws: int = Field(100, ge=1)
    relax_infeasible: bool = True
    constraint_rows: Literal["unweighted", "weighted"] = "unweighted"

    @model_validator(mode="after")
    def _check(self) -> "SimConfig":
        if self.beta is None:
            self.beta = [float(j + 2) for j in range(self.p)]
        if len(self.beta) != self.p:
            raise ValueError(f"beta must have length p={self.p}, got {len(self.beta)}")
        unknown = [m for m in self.methods if m not in METHOD_NAMES]
        if unknown:
            raise ValueError(f"unknown methods: {unknown}")
        if not self.methods:
            raise ValueError("methods must not be empty")
        return self

    def pipeline_options(self, seed: int) -> PipelineOptions:
        return PipelineOptions(
            n_draws=self.n_draws,
            m=self.resample_m,
            tau_draws=self.tau_draws,
            seed=seed,
            relax_infeasible=self.relax_infeasible,
            constraint_rows=self.constraint_rows,
        )


class FitReport(BaseModel):
    method: str
    label: str
    covariates: List[str]
    beta: List[float]
    intercept: float
    lambda2: float
    censored_time: Optional[float] = None
    imputed_log_time: Optional[float] = None
    imputed_time: Optional[float] = None
    tau: Optional[float] = None
    std_errors: Optional[List[float]] = None
    active_constraints: int = 0
    dropped_constraints: int = 0
    dropped_rows: List[int] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)
