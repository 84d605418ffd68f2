import math

import numpy as np
import pytest

from core.errors import (
    CensAftError, DegenerateRegression, ImputedTimeOverflow, InsufficientCovariates, LargestNotCensored,
    TooFewCensored,
)
import core.impute as impute
from core.impute import (
    CLAMPED_NU, ImputationMethod, difference_points, mean_impute_all, predicted_difference,
    refit_with_tail_ties, run_pipeline, tail_ties_extrapolate, tail_ties_iterative,
)
from core.km import SurvivalDataset, order_dataset
from core.models import PipelineOptions
from core.swls import default_ridge, fit_penalized_swls

from conftest import random_censored

SMALL = PipelineOptions(n_draws=4, m=2, tau_draws=3, seed=1)


def _data(times, statuses, p=2, seed=0):
    X = np.random.default_rng(seed).standard_normal((len(times), p))
    return order_dataset(SurvivalDataset(times, statuses, X))


def test_labels():
    assert ImputationMethod("efron").label == "W0"
    assert ImputationMethod.PRED_DIFF.label == "W_nu"
    assert ImputationMethod.RESAMP_COND_MEDIAN.label == "W_tau*_md"
    assert ImputationMethod("lnaft").label == "LN_AFT"


def test_mean_impute_rats(rats):
    mi = mean_impute_all(rats)
    lg = np.log
    tail45 = 3 / 14 * (lg(45) + lg(48))
    tail31 = 1 / 7 * lg(31) + tail45
    tail13 = 4 / 35 * (lg(18) + lg(23)) + tail31
    assert np.allclose(np.exp(mi.censored_log_times), [13, 28, 34])
    assert np.allclose(mi.log_times, [tail13 / 0.8, tail31 / (4 / 7), tail45 / (3 / 7)])
    assert np.all(mi.differences > 0)


def test_mean_impute_single_atom():
    mi = mean_impute_all(_data([1, 2, 5, 5], [1, 0, 1, 0]))
    assert mi.index.size == 1
    assert mi.log_times[0] == pytest.approx(math.log(5))


def test_predicted_difference_matches_weighted_polyfit(rats):
    dr = predicted_difference(rats)
    mi = mean_impute_all(rats)
    y = mi.censored_log_times
    w = 1.0 / (math.log(48) - y)
    slope, intercept = np.polyfit(y, mi.differences, 1, w=np.sqrt(w))
    assert dr.slope == pytest.approx(slope, rel=1e-8)
    assert dr.intercept == pytest.approx(intercept, rel=1e-8)
    assert dr.predicted == pytest.approx(intercept + slope * math.log(48))
    assert dr.nu == max(0.0, dr.predicted)


def test_predicted_difference_clamps_negative_prediction():
    d = _data([1, 2, 3, 50, 100], [0, 0, 1, 1, 0])
    dr = predicted_difference(d)
    M = (math.log(3) + math.log(50) + math.log(100)) / 3
    assert dr.predicted == pytest.approx(M - math.log(100))
    assert dr.clamped
    assert dr.nu == 0.0

    res = run_pipeline(d, "pdiff")
    assert CLAMPED_NU in res.flags
    assert res.tau == 0.0
    assert res.imputed_log_time == pytest.approx(math.log(100))


def test_predicted_difference_errors():
    with pytest.raises(TooFewCensored):
        predicted_difference(_data([1, 2, 3, 4], [1, 0, 1, 0]))
    with pytest.raises(DegenerateRegression):
        predicted_difference(_data([1, 2, 2, 3, 4], [1, 0, 0, 1, 0]))


def test_difference_points_frame(rats):
    df = difference_points(rats)
    assert list(df.columns) == ["censored_log_time", "difference", "weight"]
    assert len(df) == 3
    assert set(df.attrs) >= {"intercept", "slope", "nu"}


def test_pipelines_need_censored_maximum():
    d = _data([1, 2, 3, 4], [1, 0, 1, 1])
    for method in ("cmean", "cmedian", "rmean", "rmedian", "pdiff"):
        with pytest.raises(LargestNotCensored):
            run_pipeline(d, method, options=SMALL)
    assert run_pipeline(d, "efron").imputed_log_time is None


def test_resampled_pipelines_need_two_covariates(rats):
    with pytest.raises(InsufficientCovariates):
        run_pipeline(rats, "rmean", options=SMALL)
    with pytest.raises(InsufficientCovariates):
        run_pipeline(rats, "rmedian", options=SMALL)


def test_efron_pipeline_is_tail_corrected_fit():
    rng = np.random.default_rng(20)
    d = random_censored(rng, n=40, p=2)
    res = run_pipeline(d, "efron", lambda2=0.02)
    ref = fit_penalized_swls(d, 0.02, True, relax_infeasible=True)
    assert np.allclose(res.fit.beta, ref.beta)
    assert res.tau is None


def test_imputed_value_is_never_below_censoring_time():
    rng = np.random.default_rng(21)
    for _ in range(5):
        d = random_censored(rng, n=40, p=2)
        for method in ("cmean", "cmedian", "rmean", "rmedian", "pdiff"):
            res = run_pipeline(d, method, lambda2=0.02, options=SMALL)
            assert res.tau >= 0
            assert res.imputed_log_time >= res.censored_log_time
            assert res.censored_log_time == pytest.approx(d.log_times[-1])
            assert np.all(np.isfinite(res.fit.beta))
        assert run_pipeline(d, "rmean", options=SMALL).draws.shape == (SMALL.n_draws, 2)


def test_resampled_pipeline_is_reproducible():
    rng = np.random.default_rng(22)
    d = random_censored(rng, n=30, p=2)
    a = run_pipeline(d, "rmedian", options=SMALL)
    b = run_pipeline(d, "rmedian", options=SMALL)
    assert a.tau == b.tau
    assert np.array_equal(a.fit.beta, b.fit.beta)


def test_larynx_stage_four_is_harmful_for_every_method(larynx):
    lam = default_ridge(larynx.p)
    options = SMALL.model_copy(update={"constraint_rows": "weighted"})
    for method in ImputationMethod:
        res = run_pipeline(larynx, method, lam, options)
        assert res.fit.beta[3] < 0, method


def test_single_tie_iterative_matches_pdiff():
    rng = np.random.default_rng(23)
    d = random_censored(rng, n=40, p=2)
    tt = tail_ties_iterative(d)
    assert tt.log_times.size == 1
    assert tt.log_times[0] == pytest.approx(run_pipeline(d, "pdiff").imputed_log_time)


def test_iterative_tail_ties_channing(channing_male):
    tt = tail_ties_iterative(channing_male)
    assert tt.log_times.size == 19
    assert np.all((tt.lifetimes >= 137.5) & (tt.lifetimes <= 138.5))
    assert np.all(np.diff(tt.lifetimes) >= 0)
    assert tt.nus[0] == pytest.approx(predicted_difference(channing_male).nu)
    fit = refit_with_tail_ties(channing_male, tt.lifetimes)
    assert np.all(np.isfinite(fit.beta))


def test_extrapolated_tail_ties_channing(channing_male):
    ex = tail_ties_extrapolate(channing_male)
    assert ex.lifetimes.size == 19
    assert ex.slope < 0
    assert ex.intercept == pytest.approx(198.79, abs=0.05)
    assert ex.r_squared > 0.98
    assert ex.lifetimes.min() < 140
    assert ex.lifetimes.max() > 190
    assert np.all(np.diff(ex.lifetimes) > 0)
    assert ex.probabilities[-1] == 0.0
    assert np.all(np.diff(ex.probabilities) < 0)
    assert 0 <= ex.r_squared <= 1
    with pytest.raises(ValueError):
        tail_ties_extrapolate(channing_male, psi=0)


def test_refit_rejects_wrong_number_of_lifetimes(channing_male):
    with pytest.raises(ValueError):
        refit_with_tail_ties(channing_male, [200.0, 210.0])


def test_lnaft_is_the_uncorrected_fit():
    rng = np.random.default_rng(24)
    d = random_censored(rng, n=40, p=2)
    res = run_pipeline(d, "lnaft", lambda2=0.02)
    ref = fit_penalized_swls(d, 0.02, False, relax_infeasible=True)
    assert np.array_equal(res.fit.beta, ref.beta)
    assert not res.fit.tail_corrected
    assert res.imputed_log_time is None
    assert not np.allclose(res.fit.beta, run_pipeline(d, "efron", lambda2=0.02).fit.beta)


def test_zero_increment_reproduces_the_efron_fit(monkeypatch):
    rng = np.random.default_rng(25)
    d = random_censored(rng, n=40, p=2)
    efron = run_pipeline(d, "efron", lambda2=0.02)
    monkeypatch.setattr(impute, "_tail_increment", lambda km, anchor, median: (0.0, False))
    for method in ("cmean", "cmedian"):
        res = run_pipeline(d, method, lambda2=0.02)
        assert res.tau == 0.0
        assert res.imputed_log_time == res.censored_log_time
        assert np.allclose(res.fit.beta, efron.fit.beta, atol=1e-10)
        assert res.fit.intercept == pytest.approx(efron.fit.intercept, abs=1e-10)


def test_overflowing_imputation_raises_its_own_error(monkeypatch):
    rng = np.random.default_rng(26)
    d = random_censored(rng, n=30, p=2)
    monkeypatch.setattr(impute, "_tail_increment", lambda km, anchor, median: (1438.7, False))
    with pytest.raises(ImputedTimeOverflow):
        run_pipeline(d, "cmean", lambda2=0.02)


def test_iterative_tail_ties_hand_trace():
    # イベント 1,3,6、打ち切り 2,4、最大 8 に打ち切りが 2 件
    d = _data([1, 2, 3, 4, 6, 8, 8], [1, 0, 1, 0, 1, 0, 0])
    tt = tail_ties_iterative(d)
    # 2 点の回帰は D_4 と D_2 を通る直線。1 回目は ln(3/2)/5
    nu1 = math.log(1.5) / 5
    # 2 回目は最大 8 の質量が 8·e^ν1 に移るので D_4 に 2ν1/3, D_2 に 8ν1/15 が足される
    nu2 = nu1 + 2 * (2 * nu1 / 3) - 8 * nu1 / 15
    assert np.allclose(tt.nus, [nu1, nu2], atol=1e-10)
    assert nu2 == pytest.approx(1.8 * nu1)
    assert np.allclose(tt.log_times, math.log(8) + np.array([nu1, nu2]), atol=1e-10)
    assert tt.censored_log_time == pytest.approx(math.log(8))
    assert not tt.flags


def test_extrapolation_recovers_an_exact_linear_trend():
    # 打ち切りなしのイベントは Ŝ = 5/6, 4/6, 3/6 で t = 100 - 60 Ŝ
    d = _data([50, 60, 70, 75, 75, 75], [1, 1, 1, 0, 0, 0])
    ex = tail_ties_extrapolate(d)
    assert ex.intercept == pytest.approx(100.0)
    assert ex.slope == pytest.approx(-60.0)
    assert ex.r_squared == pytest.approx(1.0)
    assert np.allclose(ex.probabilities, [1 / 3, 1 / 6, 0.0])
    assert np.allclose(ex.lifetimes, [80.0, 90.0, 100.0])
    assert not ex.flags


def test_extrapolation_five_point_hand_regression():
    # 7Ŝ = 6,5,4,3,2 に対する t = 10,20,35,40,60 の最小二乗: t = 81 - 84 Ŝ
    d = _data([10, 20, 35, 40, 60, 65, 65], [1, 1, 1, 1, 1, 0, 0])
    ex = tail_ties_extrapolate(d)
    assert ex.intercept == pytest.approx(81.0)
    assert ex.slope == pytest.approx(-84.0)
    assert ex.r_squared == pytest.approx(14400 / 14800)
    assert np.allclose(ex.lifetimes, [69.0, 81.0])


@pytest.mark.slow
def test_imputed_value_is_never_below_censoring_time_over_many_datasets():
    rng = np.random.default_rng(27)
    produced = failed = 0
    for _ in range(500):
        n, p = int(rng.integers(20, 80)), int(rng.integers(2, 4))
        d = random_censored(rng, n=n, p=p, censor_rate=float(rng.uniform(0.2, 0.7)), ties=bool(rng.integers(2)))
        for method in ("cmean", "cmedian", "rmean", "rmedian", "pdiff"):
            try:
                res = run_pipeline(d, method, options=SMALL)
            except CensAftError:
                failed += 1
                continue
            produced += 1
            assert res.imputed_log_time >= res.censored_log_time, method
    assert failed <= 0.05 * (produced + failed)
