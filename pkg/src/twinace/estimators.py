"""Heritability estimators: classical NACE and Falconer plus their GEE2 versions."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .data import TwinDataset, center
from .errors import DegenerateDataError, UsageError
from .moments import CorrLink, CovariateDesign, Derived, FalconerModel, MomentModel, NaceModel, VarianceLink
from .solver import SolveOutcome, SolverConfig, model_based_cov, sandwich_cov, solve

log = logging.getLogger(__name__)

Z95 = 1.96


class Estimator(str, enum.Enum):
    NACE = "NACE"
    GEE2_NACE = "GEE2-NACE"
    FALCONER = "Falconer"
    GEE2_FALCONER = "GEE2-Falconer"

    @classmethod
    def parse(cls, name) -> "Estimator":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for e in cls:
            if e.value.lower() == key:
                return e
        raise UsageError(f"unknown estimator {name!r}; choose from {[e.value for e in cls]}")


@dataclass(frozen=True)
class AceProportions:
    h2: float
    c2: float

    @property
    def e2(self) -> float:
        return 1.0 - self.h2 - self.c2

    @property
    def out_of_range(self) -> bool:
        return not all(0.0 <= v <= 1.0 for v in (self.h2, self.c2, self.e2))

    def as_dict(self) -> dict[str, float]:
        return {"h2": self.h2, "c2": self.c2, "e2": self.e2}


@dataclass(frozen=True)
class GroupCorrelations:
    r_mz: float
    r_dz: float
    n_mz: int
    n_dz: int


def _ci(est: float, se: float) -> tuple[float, float]:
    return (est - Z95 * se, est + Z95 * se)


@dataclass
class FitResult:
    estimator: Estimator
    param_names: tuple[str, ...]
    alpha_hat: np.ndarray
    cov_alpha: np.ndarray
    proportions: AceProportions
    se_h2: float
    se_c2: float
    se_e2: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def ci_h2(self):
        return _ci(self.proportions.h2, self.se_h2)

    @property
    def ci_c2(self):
        return _ci(self.proportions.c2, self.se_c2)

    @property
    def ci_e2(self):
        return _ci(self.proportions.e2, self.se_e2)

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", True))

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator.value,
            "param_names": list(self.param_names),
            "alpha_hat": [float(a) for a in self.alpha_hat],
            "cov_alpha": [[float(v) for v in row] for row in self.cov_alpha],
            "proportions": self.proportions.as_dict(),
            "se": {"h2": self.se_h2, "c2": self.se_c2, "e2": self.se_e2},
            "ci95": {"h2": list(self.ci_h2), "c2": list(self.ci_c2), "e2": list(self.ci_e2)},
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass(frozen=True)
class FitOptions:
    var_link: VarianceLink = VarianceLink.IDENTITY
    corr_link: CorrLink = CorrLink.IDENTITY
    centering: str | None = "per_zygosity"
    pooled_corr: bool = False
    falconer_se_n: str = "group"
    working_cov: str | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)


# ---------------------------------------------------------------------------
# classical Falconer


def pearson(pairs) -> float:
    """Product-moment correlation of the two twins' values."""
    y = np.asarray(pairs, float).reshape(-1, 2)
    if len(y) < 2:
        raise DegenerateDataError("correlation needs at least two pairs")
    d = y - y.mean(axis=0)
    sxx, syy = float(d[:, 0] @ d[:, 0]), float(d[:, 1] @ d[:, 1])
    if sxx == 0 or syy == 0:
        raise DegenerateDataError("zero variance in a twin coordinate")
    return float(np.clip(d[:, 0] @ d[:, 1] / math.sqrt(sxx * syy), -1.0, 1.0))


def pooled_correlation(pairs) -> float:
    """Cross-product mean over the pooled mean square (no mean removal)."""
    y = np.asarray(pairs, float).reshape(-1, 2)
    s2 = float(np.mean(y**2))
    if s2 == 0:
        raise DegenerateDataError("zero variance")
    return float(np.mean(y[:, 0] * y[:, 1]) / s2)


def group_correlations(data: TwinDataset, pooled: bool = False) -> GroupCorrelations:
    data.require_both_groups()
    corr = pooled_correlation if pooled else pearson
    return GroupCorrelations(corr(data.y[data.mz]), corr(data.y[~data.mz]), data.n_mz, data.n_dz)


def falconer_point(r: GroupCorrelations) -> AceProportions:
    return AceProportions(2.0 * (r.r_mz - r.r_dz), 2.0 * r.r_dz - r.r_mz)


def _r_variances(r: GroupCorrelations, n: str = "group") -> tuple[float, float]:
    if n == "group":
        n_mz, n_dz = r.n_mz, r.n_dz
    elif n == "total":
        n_mz = n_dz = r.n_mz + r.n_dz
    else:
        raise ValueError(f"unknown sample-size convention {n!r}")
    return (1 - r.r_mz**2) ** 2 / n_mz, (1 - r.r_dz**2) ** 2 / n_dz


def falconer_se(r: GroupCorrelations, n: str = "group") -> tuple[float, float]:
    """Standard errors of h2 and c2 from the large-sample variance of Pearson's r.

    ``n="group"`` divides each correlation's variance by its own pair count;
    ``n="total"`` divides both by N_MZ + N_DZ, which is the convention that
    reproduces the published simulation tables.
    """
    var_mz, var_dz = _r_variances(r, n)
    return math.sqrt(4 * (var_mz + var_dz)), math.sqrt(4 * var_dz + var_mz)


# ---------------------------------------------------------------------------
# fitting


def _se(grad: np.ndarray, cov: np.ndarray) -> float:
    return math.sqrt(max(float(grad @ cov @ grad), 0.0))


def _prepare(data: TwinDataset, options: FitOptions) -> TwinDataset:
    data.require_both_groups()
    if options.centering:
        data = center(data, options.centering)
    return data


def build_model(
    estimator: Estimator, options: FitOptions, design: CovariateDesign | None = None
) -> MomentModel:
    design = design or CovariateDesign()
    if estimator in (Estimator.NACE, Estimator.GEE2_NACE):
        return NaceModel(design, options.var_link, options.working_cov or "normal")
    if estimator is Estimator.GEE2_FALCONER:
        return FalconerModel(design, options.var_link, options.corr_link, options.working_cov or "identity")
    raise UsageError(f"{estimator.value} has no moment model")


def _diagnostics(data: TwinDataset, outcome: SolveOutcome | None = None) -> dict:
    diag = {
        "n_mz": data.n_mz,
        "n_dz": data.n_dz,
        "variance_ratio_mz_dz": data.variance_ratio(),
    }
    if outcome is not None:
        diag.update(
            converged=outcome.converged,
            iterations=outcome.iterations,
            final_update_norm=outcome.final_update_norm,
            relative_change=outcome.relative_change,
        )
    return diag


def fit(data: TwinDataset, estimator, options: FitOptions | None = None) -> FitResult:
    """Fit one estimator without variance covariates."""
    options = options or FitOptions()
    estimator = Estimator.parse(estimator)
    data = _prepare(data, options)

    if estimator is Estimator.FALCONER:
        r = group_correlations(data, pooled=options.pooled_corr)
        props = falconer_point(r)
        se_h2, se_c2 = falconer_se(r, options.falconer_se_n)
        cov = np.diag(_r_variances(r, options.falconer_se_n))
        diag = _diagnostics(data)
        diag["correlation"] = "pooled" if options.pooled_corr else "pearson"
        result = FitResult(
            estimator, ("r_MZ", "r_DZ"), np.array([r.r_mz, r.r_dz]), cov, props, se_h2, se_c2,
            math.sqrt(cov[0, 0]), diag,
        )
    else:
        model = build_model(estimator, options)
        outcome = solve(data, model, config=options.solver)
        robust = estimator is not Estimator.NACE
        cov = sandwich_cov(outcome) if robust else model_based_cov(outcome)
        derived = model.proportions(outcome.alpha_hat)
        props = AceProportions(derived["h2"].value, derived["c2"].value)
        diag = _diagnostics(data, outcome)
        if isinstance(model, NaceModel):
            comps = model.variances(outcome.alpha_hat)
            diag["negative_components"] = bool(min(comps.as_array()) < 0)
        result = FitResult(
            estimator, model.param_names, outcome.alpha_hat, cov, props,
            _se(derived["h2"].gradient, cov), _se(derived["c2"].gradient, cov), _se(derived["e2"].gradient, cov),
            diag,
        )

    result.diagnostics["out_of_range"] = props.out_of_range
    if props.out_of_range:
        log.warning("%s: proportions outside [0, 1]: %s", estimator.value, props.as_dict())
    return result


def fit_all(data: TwinDataset, options: FitOptions | None = None) -> list[FitResult]:
    return [fit(data, e, options) for e in Estimator]


# ---------------------------------------------------------------------------
# variance covariates


@dataclass
class LevelResult:
    profile: dict[str, float]
    proportions: AceProportions
    se_h2: float
    se_c2: float
    se_e2: float

    @property
    def ci_h2(self):
        return _ci(self.proportions.h2, self.se_h2)

    @property
    def ci_c2(self):
        return _ci(self.proportions.c2, self.se_c2)

    @property
    def ci_e2(self):
        return _ci(self.proportions.e2, self.se_e2)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "proportions": self.proportions.as_dict(),
            "se": {"h2": self.se_h2, "c2": self.se_c2, "e2": self.se_e2},
            "ci95": {"h2": list(self.ci_h2), "c2": list(self.ci_c2), "e2": list(self.ci_e2)},
        }


@dataclass
class CovariateFit:
    estimator: Estimator
    model: MomentModel
    outcome: SolveOutcome
    cov_alpha: np.ndarray
    levels: dict[str, LevelResult]
    diagnostics: dict = field(default_factory=dict)

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.outcome.alpha_hat

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.model.param_names

    @property
    def converged(self) -> bool:
        return self.outcome.converged

    def derived(self, quantity: str, profile: Mapping[str, float]) -> Derived:
        return self.model.proportions(self.alpha_hat, profile)[quantity]

    def at(self, profile: Mapping[str, float]) -> LevelResult:
        d = self.model.proportions(self.alpha_hat, profile)
        return LevelResult(
            dict(profile),
            AceProportions(d["h2"].value, d["c2"].value),
            _se(d["h2"].gradient, self.cov_alpha),
            _se(d["c2"].gradient, self.cov_alpha),
            _se(d["e2"].gradient, self.cov_alpha),
        )

    def contrast(self, quantity: str, profile_a: Mapping[str, float], profile_b: Mapping[str, float]) -> "Contrast":
        """Wald test of quantity(profile_a) - quantity(profile_b) = 0."""
        return wald_contrast(self.derived(quantity, profile_a), self.derived(quantity, profile_b), self.cov_alpha)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator.value,
            "param_names": list(self.param_names),
            "alpha_hat": [float(a) for a in self.alpha_hat],
            "cov_alpha": [[float(v) for v in row] for row in self.cov_alpha],
            "levels": {k: v.to_dict() for k, v in self.levels.items()},
            "diagnostics": _jsonable(self.diagnostics),
        }


def _level_label(profile: Mapping[str, float]) -> str:
    return ",".join(f"{k}={v:g}" for k, v in profile.items())


def fit_with_variance_covariates(
    data: TwinDataset,
    estimator,
    covariates: str | Sequence[str],
    options: FitOptions | None = None,
    quadratic: Sequence[str] = (),
    levels: Sequence[Mapping[str, float]] | None = None,
) -> CovariateFit:
    """Joint GEE2 fit with covariate-dependent variance parameters.

    Falconer designs always include covariate-by-zygosity interactions.
    ``levels`` lists the covariate profiles to report; by default every
    distinct observed combination (at most 50).
    """
    options = options or FitOptions()
    estimator = Estimator.parse(estimator)
    if estimator not in (Estimator.GEE2_NACE, Estimator.GEE2_FALCONER):
        raise UsageError("variance covariates require GEE2-NACE or GEE2-Falconer")
    covariates = [covariates] if isinstance(covariates, str) else list(covariates)
    data = _prepare(data, options)
    design = CovariateDesign.from_data(data, covariates, quadratic)
    model = build_model(estimator, options, design)
    outcome = solve(data, model, config=options.solver)
    cov = sandwich_cov(outcome)

    if levels is None:
        values = np.column_stack([data.covariate(c) for c in covariates])
        uniq = np.unique(values, axis=0)
        if len(uniq) > 50:
            raise UsageError("more than 50 distinct covariate profiles; pass levels explicitly")
        levels = [dict(zip(covariates, map(float, row))) for row in uniq]
    fit_ = CovariateFit(estimator, model, outcome, cov, {}, _diagnostics(data, outcome))
    for prof in levels:
        fit_.levels[_level_label(prof)] = fit_.at(prof)
    fit_.diagnostics["out_of_range"] = any(lv.proportions.out_of_range for lv in fit_.levels.values())
    return fit_


# ---------------------------------------------------------------------------
# contrasts


@dataclass(frozen=True)
class Contrast:
    estimate: float
    se: float
    z: float
    p: float


def wald_contrast(a: Derived, b: Derived, cov: np.ndarray) -> Contrast:
    """Delta-method Wald test of a - b = 0 using the joint parameter covariance."""
    ga, gb = np.asarray(a.gradient, float), np.asarray(b.gradient, float)
    cov = np.asarray(cov, float)
    if ga.shape != gb.shape or cov.shape != (ga.size, ga.size):
        raise UsageError("gradients and covariance refer to different parameter vectors")
    est = float(a.value - b.value)
    se = _se(ga - gb, cov)
    if se == 0.0:
        z = 0.0 if est == 0.0 else math.copysign(math.inf, est)
    else:
        z = est / se
    p = float(2 * stats.norm.sf(abs(z)))
    return Contrast(est, se, z, p)
