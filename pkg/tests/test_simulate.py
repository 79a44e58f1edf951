import math

import numpy as np
import pytest
from scipy import stats

from twinace.errors import ConfigError
from twinace.estimators import FitOptions, fit, fit_with_variance_covariates
from twinace.moments import AceCovariateParams, AceParams, FalconerCovariateParams
from twinace.simulate import (
    ScenarioConfig,
    lgp_pmf,
    lgp_sample,
    simulate,
    simulate_blgp,
    truth,
)


def _corr(y):
    return np.corrcoef(y[:, 0], y[:, 1])[0, 1]


# LGP -------------------------------------------------------------------------


def test_lgp_pmf_examples():
    assert lgp_pmf(1.0, 0.0, 0) == pytest.approx(0.36788, abs=5e-6)
    assert lgp_pmf(2.5, 0.4, 0) == pytest.approx(math.exp(-2.5), rel=1e-14)
    assert lgp_pmf(1.0, 0.35, 1) == pytest.approx(math.exp(-1.35), rel=1e-14)
    assert lgp_pmf(1.0, 0.35, 1) == pytest.approx(0.25924, abs=5e-6)


@pytest.mark.parametrize("theta", [0.2, 1.0, 3.0])
@pytest.mark.parametrize("lam", [0.0, 0.2, 0.5])
def test_lgp_pmf_normalizes(theta, lam):
    p = lgp_pmf(theta, lam, np.arange(501))
    assert np.all((p >= 0) & (p <= 1))
    assert abs(p.sum() - 1) < 1e-9


def _pmf_moments(theta, lam):
    y = np.arange(2000)
    p = lgp_pmf(theta, lam, y)
    m = p @ y
    return m, p @ (y - m) ** 2, p @ (y - m) ** 4


@pytest.mark.parametrize("theta,lam", [(1.0, 0.35), (0.5, 0.35), (0.3, 0.1)])
def test_lgp_sampler_moments(theta, lam):
    n = 1_000_000
    x = lgp_sample(theta, lam, np.random.default_rng(17), n)
    mean, var = theta / (1 - lam), theta / (1 - lam) ** 3
    m_pmf, v_pmf, mu4 = _pmf_moments(theta, lam)
    assert m_pmf == pytest.approx(mean, rel=1e-9) and v_pmf == pytest.approx(var, rel=1e-9)
    assert abs(x.mean() - mean) <= 3 * math.sqrt(var / n)
    assert abs(x.var(ddof=1) - var) <= 3 * math.sqrt((mu4 - var**2) / n)


def test_lgp_lambda_zero_is_poisson():
    theta, n = 2.0, 200_000
    x = lgp_sample(theta, 0.0, np.random.default_rng(5), n)
    k = 9
    obs = np.bincount(np.minimum(x, k), minlength=k + 1)
    probs = stats.poisson.pmf(np.arange(k), theta)
    probs = np.append(probs, 1 - probs.sum())
    assert stats.chisquare(obs, probs * n).pvalue > 0.001


def test_lgp_scalar_draw():
    assert isinstance(lgp_sample(1.0, 0.3, np.random.default_rng(0)), int)


# scenarios ---------------------------------------------------------------------


def test_mvt_pure_e_uncorrelated():
    n = 20_000
    d = simulate(ScenarioConfig("mvt", n, 0, alpha=AceParams(0, 0, 1), seed=1))
    assert abs(_corr(d.y)) < 3 / math.sqrt(n)


def test_mvt_mz_correlation():
    d = simulate(ScenarioConfig("mvt", 100_000, 0, df=4.5, seed=2))
    assert abs(_corr(d.y) - 0.8) < 0.01
    # scale matrix times df / (df - 2)
    assert np.var(d.y) == pytest.approx(4.5 / 2.5, rel=0.05)


@pytest.mark.parametrize("scenario", ["normal", "mvt", "blgp", "unequal_var_normal", "sex_normal", "age_falconer"])
def test_determinism(scenario):
    cfg = ScenarioConfig(scenario, 50, 60, seed=99)
    a, b = simulate(cfg, 3), simulate(cfg, 3)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.mz, b.mz)
    assert np.array_equal(a.covariates, b.covariates)
    assert not np.array_equal(a.y, simulate(cfg, 4).y)


def test_blgp_moments_and_correlations():
    d = simulate(ScenarioConfig("blgp", 100_000, 100_000, lam=0.35, seed=3))
    mean, var = 1 / 0.65, 1 / 0.65**3
    assert mean == pytest.approx(1.5385, abs=1e-4) and var == pytest.approx(3.641, abs=1e-3)
    y = d.y
    assert abs(y.mean() - mean) < 0.01
    assert np.var(y) == pytest.approx(var, rel=0.02)
    assert abs(_corr(y[d.mz]) - 0.8) < 0.01
    assert abs(_corr(y[~d.mz]) - 0.55) < 0.01
    assert truth(ScenarioConfig("blgp"))["all"] == pytest.approx((0.5, 0.3))


def test_blgp_no_genetic_signal():
    d = simulate(ScenarioConfig("blgp", 100_000, 100_000, alpha=AceParams(0, 0.5, 0.5), seed=4))
    diff = _corr(d.y[d.mz]) - _corr(d.y[~d.mz])
    assert abs(diff) < 4 * math.sqrt(2 / 100_000)


def test_blgp_config_guards():
    with pytest.raises(ConfigError):
        ScenarioConfig("blgp", lam=-0.2)
    with pytest.raises(ConfigError):
        ScenarioConfig("blgp", lam=0.0)
    with pytest.raises(ConfigError):
        ScenarioConfig("blgp", alpha=AceParams(0, 0, 0.5))
    with pytest.raises(ConfigError):
        ScenarioConfig("mvt", df=2.0)


def test_blgp_counts_are_integers():
    d = simulate_blgp(ScenarioConfig("blgp", 100, 100, seed=8))
    assert np.array_equal(d.y, np.round(d.y)) and d.y.min() >= 0


def test_unequal_variance_ratio():
    cfg = ScenarioConfig("unequal_var_normal", 100_000, 100_000, seed=5)
    assert cfg.alpha_mz.total == pytest.approx(0.6) and cfg.alpha_dz.total == pytest.approx(1.0)
    assert cfg.alpha_mz.h2 == pytest.approx(0.5) and cfg.alpha_mz.c2 == pytest.approx(0.3)
    d = simulate(cfg)
    assert d.variance_ratio() == pytest.approx(0.6, abs=0.01)


def test_unequal_variance_requires_equal_proportions():
    with pytest.raises(ConfigError):
        ScenarioConfig("unequal_var_normal", alpha_mz=AceParams(0.4, 0.1, 0.1))
    ScenarioConfig("unequal_var_normal", alpha_mz=AceParams(0.4, 0.1, 0.1), require_equal_proportions=False)


def test_sex_scenario_truth():
    t = truth(ScenarioConfig("sex_normal"))
    assert t["Male"] == pytest.approx((0.6, 0.2)) and t["Female"] == pytest.approx((0.3, 0.4))
    m, f = AceCovariateParams(0.3, 0.3, 0.4, -0.2, 0.3, -0.1).at(1), AceCovariateParams(0.3, 0.3, 0.4, -0.2, 0.3, -0.1).at(0)
    assert m.total == pytest.approx(1.0) and f.total == pytest.approx(1.0)


def test_sex_scenario_female_subset():
    d = simulate(ScenarioConfig("sex_normal", 25_000, 25_000, seed=6))
    females = d.subset(d.covariate("sex") == 0)
    assert len(females) == 50_000
    r = fit(females, "GEE2-NACE")
    assert abs(r.proportions.h2 - 0.3) < 0.02


def test_sex_scenario_without_sex_effect():
    cfg = ScenarioConfig("sex_normal", 20_000, 20_000, sex=AceCovariateParams(0.5, 0, 0.3, 0, 0.2, 0), seed=7)
    d = simulate(cfg)
    male = d.y[d.covariate("sex") == 1]
    female = d.y[d.covariate("sex") == 0]
    assert abs(np.var(male) - np.var(female)) < 0.05


def test_age_scenario_constant_truth():
    cfg = ScenarioConfig("age_falconer", 300, 300, seed=9)
    d = simulate(cfg)
    assert set(d.covariate_names) == {"age", "age_sq"}
    assert set(np.unique(d.covariate("age"))) <= {17.0, 20.0, 24.0, 29.0}
    for h2, c2 in truth(cfg, d).values():
        assert h2 == pytest.approx(0.5) and c2 == pytest.approx(0.3)


def test_age_scenario_rejects_invalid_correlation():
    age = FalconerCovariateParams((1, 0, 0, 0, 0, 0), (0.55, 0.25, 0.01, 0, 0, 0))
    with pytest.raises(ConfigError, match="29"):
        simulate(ScenarioConfig("age_falconer", 10, 10, age=age))


def test_age_scenario_parameter_recovery():
    v = (0.6, 0.1, 0.02, 0.001, -0.005, 0.0)
    p = (0.3, 0.3, 0.01, -0.001, -0.002, 0.0005)
    cfg = ScenarioConfig("age_falconer", 20_000, 20_000, age=FalconerCovariateParams(v, p), seed=10)
    d = simulate(cfg)
    res = fit_with_variance_covariates(d, "GEE2-Falconer", ["age"], FitOptions(centering=None), quadratic=["age"])
    se = np.sqrt(np.diag(res.cov_alpha))
    assert np.all(np.abs(res.alpha_hat - np.array(v + p)) <= 3.5 * se)
    t = truth(cfg, d)
    for label, lv in res.levels.items():
        h2, _ = t[label]
        assert abs(lv.proportions.h2 - h2) <= 3.5 * lv.se_h2


def test_scenario_from_dict_accepts_lambda():
    cfg = ScenarioConfig.from_dict({"scenario": "blgp", "lambda": 0.2, "alpha": [0.5, 0.3, 0.2]})
    assert cfg.lam == 0.2 and cfg.alpha == AceParams(0.5, 0.3, 0.2)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"scenario": "normal", "bogus": 1})
