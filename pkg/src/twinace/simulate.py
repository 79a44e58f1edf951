"""Twin-data generators for the simulation scenarios.

Every generator is a pure function of its :class:`ScenarioConfig` and a
numpy ``Generator``. :func:`simulate` derives the generator from
``(config.seed, replicate)`` so replicates are reproducible in any order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .data import TwinDataset, Zygosity
from .errors import ConfigError, SamplingError
from .moments import AceCovariateParams, AceParams, CorrLink, FalconerCovariateParams, VarianceLink

SCENARIOS = ("normal", "mvt", "blgp", "unequal_var_normal", "sex_normal", "age_falconer")

DEFAULT_ALPHA = AceParams(0.5, 0.3, 0.2)
DEFAULT_SEX = AceCovariateParams(0.3, 0.3, 0.4, -0.2, 0.3, -0.1)
# constant-parameter age model: rho_MZ = 0.8, rho_DZ = 0.55, unit variance at every age
DEFAULT_AGE = FalconerCovariateParams((1.0, 0.0, 0.0, 0.0, 0.0, 0.0), (0.55, 0.25, 0.0, 0.0, 0.0, 0.0))
DEFAULT_AGES = (17.0, 20.0, 24.0, 29.0)


@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation scenario.

    ``n_mz``/``n_dz`` are pair counts; for ``sex_normal`` they are counts per
    sex within each zygosity.
    """

    scenario: str = "normal"
    n_mz: int = 700
    n_dz: int = 700
    alpha: AceParams = DEFAULT_ALPHA
    alpha_mz: AceParams = AceParams(0.3, 0.18, 0.12)
    alpha_dz: AceParams = AceParams(0.5, 0.3, 0.2)
    require_equal_proportions: bool = True
    sex: AceCovariateParams = DEFAULT_SEX
    age: FalconerCovariateParams = DEFAULT_AGE
    ages: tuple[float, ...] = DEFAULT_AGES
    df: float = 4.5
    lam: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.n_mz < 0 or self.n_dz < 0:
            raise ConfigError("pair counts must be non-negative")
        if self.scenario == "mvt" and not self.df > 2:
            raise ConfigError(f"mvt requires df > 2 for a finite covariance (got {self.df})")
        if self.scenario == "blgp":
            if not 0 < self.lam < 1:
                raise ConfigError(f"blgp requires 0 < lambda < 1 (got {self.lam}); under-dispersion is not supported")
            for name, rate in _blgp_rates(self.alpha).items():
                if rate <= 0:
                    raise ConfigError(f"blgp component rate {name} = {rate} must be positive")
        if self.scenario == "unequal_var_normal":
            for a in (self.alpha_mz, self.alpha_dz):
                if min(a.as_array()) < 0 or a.total <= 0:
                    raise ConfigError("variance components must be non-negative with positive total")
            if self.require_equal_proportions and not (
                math.isclose(self.alpha_mz.h2, self.alpha_dz.h2, abs_tol=1e-12)
                and math.isclose(self.alpha_mz.c2, self.alpha_dz.c2, abs_tol=1e-12)
            ):
                raise ConfigError("MZ and DZ component sets imply different h2/c2")
        if self.scenario == "sex_normal":
            for s in (0, 1):
                if min(self.sex.at(s).as_array()) < 0:
                    raise ConfigError(f"negative variance component for sex={s}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("alpha", "alpha_mz", "alpha_dz"):
            if key in d and not isinstance(d[key], AceParams):
                d[key] = AceParams(**d[key]) if isinstance(d[key], dict) else AceParams(*d[key])
        if "sex" in d and isinstance(d["sex"], dict):
            d["sex"] = AceCovariateParams(**d["sex"])
        if "age" in d and isinstance(d["age"], dict):
            a = dict(d["age"])
            a["v"], a["p"] = tuple(a["v"]), tuple(a["p"])
            d["age"] = FalconerCovariateParams(**a)
        if "ages" in d:
            d["ages"] = tuple(float(a) for a in d["ages"])
        for key in ("lambda",):
            if key in d:
                d["lam"] = d.pop(key)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        return cls(**d)


def rng_for(seed: int, replicate: int | None = None) -> np.random.Generator:
    """Generator for a replicate, derived only from (seed, replicate)."""
    if replicate is None:
        return np.random.default_rng(np.random.SeedSequence(seed))
    return np.random.default_rng(np.random.SeedSequence([seed, replicate]))


def _normal_pairs(sigma: np.ndarray, n: int, rng) -> np.ndarray:
    L = np.linalg.cholesky(sigma)
    return rng.standard_normal((n, 2)) @ L.T


def _psd_chol(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ConfigError(f"covariance {sigma.tolist()} is not positive definite") from None


def _stack(parts: Sequence[tuple[np.ndarray, bool]], covariates=None) -> TwinDataset:
    y = np.vstack([p for p, _ in parts]) if parts else np.empty((0, 2))
    mz = np.concatenate([np.full(len(p), flag) for p, flag in parts]) if parts else np.empty(0, bool)
    return TwinDataset.from_arrays(y, mz, covariates)


# ---------------------------------------------------------------------------
# generators


def simulate_normal(config: ScenarioConfig, rng=None) -> TwinDataset:
    rng = rng or rng_for(config.seed)
    parts = []
    for z, n in ((Zygosity.MZ, config.n_mz), (Zygosity.DZ, config.n_dz)):
        _psd_chol(config.alpha.sigma(z))
        parts.append((_normal_pairs(config.alpha.sigma(z), n, rng), z is Zygosity.MZ))
    return _stack(parts)


def simulate_mvt(config: ScenarioConfig, rng=None) -> TwinDataset:
    """Bivariate t pairs with scale matrix from the ACE structure.

    The covariance is the scale matrix times df/(df - 2).
    """
    rng = rng or rng_for(config.seed)
    parts = []
    for z, n in ((Zygosity.MZ, config.n_mz), (Zygosity.DZ, config.n_dz)):
        sigma = config.alpha.sigma(z)
        _psd_chol(sigma)
        x = _normal_pairs(sigma, n, rng)
        g = rng.chisquare(config.df, size=n)
        parts.append((x * np.sqrt(config.df / g)[:, None], z is Zygosity.MZ))
    return _stack(parts)


def lgp_logpmf(theta: float, lam: float, y):
    y = np.asarray(y, float)
    with np.errstate(divide="ignore"):
        out = math.log(theta) + (y - 1) * np.log(theta + lam * y) - theta - lam * y - gammaln(y + 1)
    return out


def lgp_pmf(theta: float, lam: float, y):
    """Lagrangian Poisson probability ``theta (theta + lam y)^(y-1) e^(-theta - lam y) / y!``."""
    if not theta > 0 or not 0 <= lam < 1:
        raise ValueError("need theta > 0 and 0 <= lambda < 1")
    out = np.exp(lgp_logpmf(theta, lam, y))
    return float(out) if np.ndim(out) == 0 else out


def _lgp_cdf_table(theta: float, lam: float, cap: float = 1 - 1e-12, max_terms: int = 1_000_000) -> np.ndarray:
    probs = []
    total = 0.0
    start = 0
    chunk = 64
    while total < cap:
        if start >= max_terms:
            raise SamplingError(f"LGP({theta}, {lam}) tail not reached within {max_terms} terms")
        p = np.exp(lgp_logpmf(theta, lam, np.arange(start, start + chunk)))
        probs.append(p)
        total += float(p.sum())
        start += chunk
        chunk *= 2
    cdf = np.cumsum(np.concatenate(probs))
    cut = int(np.searchsorted(cdf, cap)) + 1
    return cdf[:cut]


def lgp_sample(theta: float, lam: float, rng, size=None):
    """Inverse-CDF draws from LGP(theta, lam); tail truncated at cumulative 1 - 1e-12."""
    if not theta > 0 or not 0 <= lam < 1:
        raise ValueError("need theta > 0 and 0 <= lambda < 1")
    cdf = _lgp_cdf_table(theta, lam)
    u = rng.random(size)
    draws = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    return int(draws) if size is None else draws


def _blgp_rates(alpha: AceParams) -> dict[str, float]:
    a, c, e = alpha.as_array()
    return {"MZ shared": a + c, "MZ unique": e, "DZ shared": 0.5 * a + c, "DZ unique": 0.5 * a + e}


def simulate_blgp(config: ScenarioConfig, rng=None) -> TwinDataset:
    """Over-dispersed count pairs built as shared + unique Lagrangian Poisson parts."""
    rng = rng or rng_for(config.seed)
    rates = _blgp_rates(config.alpha)
    parts = []
    for label, n in (("MZ", config.n_mz), ("DZ", config.n_dz)):
        q0 = lgp_sample(rates[f"{label} shared"], config.lam, rng, n)
        q = lgp_sample(rates[f"{label} unique"], config.lam, rng, (n, 2))
        parts.append(((q0[:, None] + q).astype(float), label == "MZ"))
    return _stack(parts)


def simulate_unequal_var_normal(config: ScenarioConfig, rng=None) -> TwinDataset:
    rng = rng or rng_for(config.seed)
    parts = [
        (_normal_pairs(config.alpha_mz.sigma(Zygosity.MZ), config.n_mz, rng), True),
        (_normal_pairs(config.alpha_dz.sigma(Zygosity.DZ), config.n_dz, rng), False),
    ]
    return _stack(parts)


def simulate_sex_normal(config: ScenarioConfig, rng=None) -> TwinDataset:
    """Normal pairs with sex-specific ACE components; sex coded 1 = male, 0 = female."""
    rng = rng or rng_for(config.seed)
    parts, sex = [], []
    for z, n in ((Zygosity.MZ, config.n_mz), (Zygosity.DZ, config.n_dz)):
        for s in (1, 0):
            sigma = config.sex.at(s).sigma(z)
            _psd_chol(sigma)
            parts.append((_normal_pairs(sigma, n, rng), z is Zygosity.MZ))
            sex.append(np.full(n, float(s)))
    return _stack(parts, {"sex": np.concatenate(sex) if sex else np.empty(0)})


def age_moments(params: FalconerCovariateParams, age, mz, age_center: float):
    """Variance and correlation from the quadratic-in-age Falconer predictors."""
    age = np.asarray(age, float)
    mz = np.asarray(mz, float)
    sq = (age - age_center) ** 2
    X = np.column_stack([np.ones_like(age), mz, age, sq, age * mz, sq * mz])
    s2 = VarianceLink(params.var_link).inverse(X @ np.asarray(params.v, float))
    rho = CorrLink(params.corr_link).inverse(X @ np.asarray(params.p, float))
    return s2, rho


def simulate_age_falconer(config: ScenarioConfig, rng=None) -> TwinDataset:
    """Normal pairs whose variance and correlation are quadratic in pair age.

    Ages are drawn uniformly from ``config.ages``; the square is centered at
    the sample mean age. Covariates ``age`` and ``age_sq`` are recorded.
    """
    rng = rng or rng_for(config.seed)
    if len(config.age.v) != 6 or len(config.age.p) != 6:
        raise ConfigError("age model needs 6 variance and 6 correlation coefficients")
    n = config.n_mz + config.n_dz
    grid = np.asarray(config.ages, float)
    age = grid[rng.integers(0, len(grid), size=n)]
    mz = np.concatenate([np.ones(config.n_mz), np.zeros(config.n_dz)])
    center = float(age.mean()) if n else float(grid.mean())
    bad = []
    for a in grid:
        s2, rho = age_moments(config.age, [a, a], [1.0, 0.0], center)
        if not (np.all(np.isfinite(s2)) and np.all(s2 > 0) and np.all(np.abs(rho) < 1)):
            bad.append(float(a))
    if bad:
        raise ConfigError(f"age model leaves the admissible variance/correlation range at ages {bad}")
    s2, rho = age_moments(config.age, age, mz, center)
    x = rng.standard_normal((n, 2))
    # y1 = s*x1, y2 = s*(rho x1 + sqrt(1-rho^2) x2)
    s = np.sqrt(s2)
    y = np.column_stack([s * x[:, 0], s * (rho * x[:, 0] + np.sqrt(1 - rho**2) * x[:, 1])])
    return TwinDataset.from_arrays(y, mz.astype(bool), {"age": age, "age_sq": (age - center) ** 2})


GENERATORS = {
    "normal": simulate_normal,
    "mvt": simulate_mvt,
    "blgp": simulate_blgp,
    "unequal_var_normal": simulate_unequal_var_normal,
    "sex_normal": simulate_sex_normal,
    "age_falconer": simulate_age_falconer,
}


def simulate(config: ScenarioConfig, replicate: int | None = None) -> TwinDataset:
    return GENERATORS[config.scenario](config, rng_for(config.seed, replicate))


# ---------------------------------------------------------------------------
# truth


def truth(config: ScenarioConfig, data: TwinDataset | None = None) -> dict[str, tuple[float, float]]:
    """True (h2, c2) per reporting level of a scenario.

    The age scenario's truth depends on the sample mean age, so ``data`` is
    needed there.
    """
    if config.scenario in ("normal", "mvt", "blgp"):
        return {"all": (config.alpha.h2, config.alpha.c2)}
    if config.scenario == "unequal_var_normal":
        return {"all": (config.alpha_dz.h2, config.alpha_dz.c2)}
    if config.scenario == "sex_normal":
        m, f = config.sex.at(1), config.sex.at(0)
        return {"Male": (m.h2, m.c2), "Female": (f.h2, f.c2)}
    center = float(np.mean(data.covariate("age"))) if data is not None and len(data) else float(np.mean(config.ages))
    out = {}
    for a in config.ages:
        _, rho = age_moments(config.age, [a, a], [1.0, 0.0], center)
        out[f"age={a:g}"] = (2 * (rho[0] - rho[1]), 2 * rho[1] - rho[0])
    return out


def level_profiles(config: ScenarioConfig) -> dict[str, dict[str, float]]:
    """Covariate profile behind each reporting level of :func:`truth`."""
    if config.scenario == "sex_normal":
        return {"Male": {"sex": 1.0}, "Female": {"sex": 0.0}}
    if config.scenario == "age_falconer":
        return {f"age={a:g}": {"age": float(a)} for a in config.ages}
    return {"all": {}}


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(config, seed=seed)
