"""Second-moment structures for the ACE (NACE) and Falconer parameterisations.

For a centered pair ``y = (y1, y2)`` the sample vector is
``gamma = (y1**2, y2**2, y1*y2)``; each model supplies its population
counterpart ``Gamma(alpha)``, the Jacobian ``D = dGamma/dalpha`` and a
working covariance ``Omega`` for ``gamma``. Everything is vectorised over
pairs: arrays carry a leading pair axis of length N.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import TwinDataset, TwinPair, Zygosity, collinear_columns
from .errors import DomainError, SingularityError


class VarianceLink(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"

    def inverse(self, eta):
        return np.exp(eta) if self is VarianceLink.LOG else np.asarray(eta, float)

    def dinverse(self, eta):
        return np.exp(eta) if self is VarianceLink.LOG else np.ones_like(np.asarray(eta, float))

    def __call__(self, x):
        return np.log(x) if self is VarianceLink.LOG else np.asarray(x, float)


class CorrLink(str, enum.Enum):
    IDENTITY = "identity"
    FISHER_Z = "fisher_z"

    def inverse(self, eta):
        return np.tanh(eta) if self is CorrLink.FISHER_Z else np.asarray(eta, float)

    def dinverse(self, eta):
        return 1.0 - np.tanh(eta) ** 2 if self is CorrLink.FISHER_Z else np.ones_like(np.asarray(eta, float))

    def __call__(self, r):
        return np.arctanh(r) if self is CorrLink.FISHER_Z else np.asarray(r, float)


@dataclass(frozen=True)
class AceParams:
    sigma2_A: float
    sigma2_C: float
    sigma2_E: float

    @property
    def total(self) -> float:
        return self.sigma2_A + self.sigma2_C + self.sigma2_E

    def covariance(self, z: Zygosity) -> float:
        return z.weight * self.sigma2_A + self.sigma2_C

    def sigma(self, z: Zygosity) -> np.ndarray:
        """2x2 trait covariance matrix for a pair of zygosity ``z``."""
        t, c = self.total, self.covariance(z)
        return np.array([[t, c], [c, t]])

    @property
    def h2(self) -> float:
        return self.sigma2_A / self.total

    @property
    def c2(self) -> float:
        return self.sigma2_C / self.total

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma2_A, self.sigma2_C, self.sigma2_E])


@dataclass(frozen=True)
class AceCovariateParams:
    """ACE components varying with one pair-level covariate: g(s2_A) = a0 + a1*x, etc."""

    a0: float
    a1: float
    c0: float
    c1: float
    e0: float
    e1: float
    link: VarianceLink = VarianceLink.IDENTITY

    def at(self, x: float) -> AceParams:
        g = VarianceLink(self.link).inverse
        return AceParams(
            float(g(self.a0 + self.a1 * x)), float(g(self.c0 + self.c1 * x)), float(g(self.e0 + self.e1 * x))
        )


@dataclass(frozen=True)
class FalconerParams:
    v0: float
    v1: float
    p0: float
    p1: float
    var_link: VarianceLink = VarianceLink.IDENTITY
    corr_link: CorrLink = CorrLink.IDENTITY

    def variance(self, z: Zygosity) -> float:
        zi = 1.0 if z is Zygosity.MZ else 0.0
        return float(VarianceLink(self.var_link).inverse(self.v0 + self.v1 * zi))

    def correlation(self, z: Zygosity) -> float:
        zi = 1.0 if z is Zygosity.MZ else 0.0
        return float(CorrLink(self.corr_link).inverse(self.p0 + self.p1 * zi))


@dataclass(frozen=True)
class FalconerCovariateParams:
    """Coefficients on the design (1, z, terms..., terms*z...)."""

    v: tuple[float, ...]
    p: tuple[float, ...]
    var_link: VarianceLink = VarianceLink.IDENTITY
    corr_link: CorrLink = CorrLink.IDENTITY


# ---------------------------------------------------------------------------
# single-pair helpers


def gamma_sample(pair: TwinPair) -> np.ndarray:
    return np.array([pair.y1 * pair.y1, pair.y2 * pair.y2, pair.y1 * pair.y2])


def gamma_pop_nace(alpha: AceParams, z: Zygosity) -> np.ndarray:
    t = alpha.total
    return np.array([t, t, alpha.covariance(z)])


def gamma_pop_falconer(params: FalconerParams, z: Zygosity) -> np.ndarray:
    s2 = params.variance(z)
    rho = params.correlation(z)
    if not np.isfinite(s2) or not np.isfinite(rho):
        raise DomainError(f"non-finite link inverse for {z.value}")
    if abs(rho) >= 1.0:
        raise DomainError(f"correlation {rho:g} for {z.value} is outside (-1, 1)")
    return np.array([s2, s2, s2 * rho])


def normal_omega(gamma: np.ndarray) -> np.ndarray:
    """Normal-theory covariance of the sample vector, given Gamma rows (..., 3)."""
    gamma = np.asarray(gamma, float)
    t = gamma[..., 0]
    c = gamma[..., 2]
    out = np.empty(gamma.shape[:-1] + (3, 3))
    out[..., 0, 0] = out[..., 1, 1] = 2 * t * t
    out[..., 0, 1] = out[..., 1, 0] = 2 * c * c
    out[..., 0, 2] = out[..., 2, 0] = out[..., 1, 2] = out[..., 2, 1] = 2 * t * c
    out[..., 2, 2] = c * c + t * t
    return out


# ---------------------------------------------------------------------------
# covariate designs


@dataclass(frozen=True)
class Term:
    """One covariate column of a variance design: ``x`` or ``(x - center)**2``."""

    name: str
    power: int = 1
    center: float = 0.0

    @property
    def label(self) -> str:
        return self.name if self.power == 1 else f"{self.name}^2c"

    def evaluate(self, x):
        x = np.asarray(x, float)
        return x if self.power == 1 else (x - self.center) ** 2


@dataclass(frozen=True)
class CovariateDesign:
    terms: tuple[Term, ...] = ()

    @classmethod
    def from_data(cls, data: TwinDataset, covariates: Sequence[str] = (), quadratic: Sequence[str] = ()):
        """Linear term for each covariate, plus a centered square for those in ``quadratic``.

        The square is centered at the sample mean of the covariate over pairs.
        """
        terms = []
        for name in covariates:
            data.covariate(name)
            terms.append(Term(name))
        for name in quadratic:
            if name not in covariates:
                raise ValueError(f"quadratic covariate {name!r} must also be listed as a covariate")
            terms.append(Term(name, 2, float(np.mean(data.covariate(name)))))
        return cls(tuple(terms))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(t.name for t in self.terms))

    def values(self, data: TwinDataset) -> np.ndarray:
        """(N, k) matrix of term values for every pair."""
        if not self.terms:
            return np.empty((len(data), 0))
        return np.column_stack([t.evaluate(data.covariate(t.name)) for t in self.terms])

    def row(self, profile: Mapping[str, float]) -> np.ndarray:
        missing = [n for n in self.names if n not in profile]
        if missing:
            raise KeyError(f"profile lacks covariate(s) {missing}")
        return np.array([float(t.evaluate(profile[t.name])) for t in self.terms])


@dataclass(frozen=True)
class Derived:
    """A scalar function of the parameter vector with its gradient."""

    value: float
    gradient: np.ndarray


# ---------------------------------------------------------------------------
# models


@dataclass
class Frame:
    """Per-dataset arrays a model needs, computed once before solving."""

    gamma: np.ndarray  # (N, 3) sample vectors
    mz: np.ndarray  # (N,) float indicator
    w: np.ndarray  # (N,) kinship weight
    X: np.ndarray  # (N, p) design, model specific


class MomentModel:
    parameterization = "?"
    working_cov = "normal"
    omega_scale = 1.0
    design: CovariateDesign

    @property
    def param_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    @property
    def q(self) -> int:
        return len(self.param_names)

    def frame(self, data: TwinDataset) -> Frame:
        y = data.y
        gamma = np.column_stack([y[:, 0] ** 2, y[:, 1] ** 2, y[:, 0] * y[:, 1]])
        X = self._design_matrix(data.mz.astype(float), self.design.values(data))
        return Frame(gamma, data.mz.astype(float), data.weights, X)

    def gamma(self, alpha, frame: Frame) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, alpha, frame: Frame) -> np.ndarray:
        raise NotImplementedError

    def omega(self, alpha, frame: Frame, gamma=None) -> np.ndarray | None:
        """Working covariance per pair, or None for a scaled identity."""
        if self.working_cov == "identity":
            return None
        if gamma is None:
            gamma = self.gamma(alpha, frame)
        return self.omega_scale * normal_omega(gamma)

    def valid(self, alpha, frame: Frame, gamma=None) -> bool:
        """Whether ``alpha`` is an admissible iterate (finite Gamma, usable Omega)."""
        if gamma is None:
            gamma = self.gamma(alpha, frame)
        if not np.all(np.isfinite(gamma)):
            return False
        if self.working_cov == "normal":
            t, c = gamma[:, 0], gamma[:, 2]
            return bool(np.all(t > 0) and np.all(np.abs(c) < t))
        return True

    def check_design(self, frame: Frame) -> None:
        labels = self._column_labels()
        if np.linalg.matrix_rank(frame.X) < frame.X.shape[1]:
            cols = collinear_columns(frame.X, labels)
            raise SingularityError(f"variance design is rank deficient; collinear columns: {cols}", columns=cols)

    def _design_matrix(self, mz, terms) -> np.ndarray:
        raise NotImplementedError

    def _column_labels(self) -> list[str]:
        raise NotImplementedError


@dataclass
class NaceModel(MomentModel):
    """ACE components shared by MZ and DZ pairs, optionally varying with covariates.

    Each component follows ``g(sigma2_K) = x' a_K`` with x = (1, terms...);
    parameters are ordered (a-block, c-block, e-block).
    """

    design: CovariateDesign = field(default_factory=CovariateDesign)
    link: VarianceLink = VarianceLink.IDENTITY
    working_cov: str = "normal"
    omega_scale: float = 1.0
    parameterization = "NACE"

    def __post_init__(self):
        self.link = VarianceLink(self.link)

    @property
    def p(self) -> int:
        return 1 + len(self.design.terms)

    @property
    def param_names(self):
        if not self.design.terms and self.link is VarianceLink.IDENTITY:
            return ("sigma2_A", "sigma2_C", "sigma2_E")
        return tuple(f"{k}{j}" for k in "ace" for j in range(self.p))

    def _column_labels(self):
        return ["(intercept)", *(t.label for t in self.design.terms)]

    def _design_matrix(self, mz, terms):
        return np.column_stack([np.ones(len(mz)), terms])

    def _components(self, alpha, X):
        a = np.asarray(alpha, float).reshape(3, self.p)
        eta = X @ a.T  # (N, 3)
        return self.link.inverse(eta), self.link.dinverse(eta)

    def gamma(self, alpha, frame):
        s, _ = self._components(alpha, frame.X)
        total = s.sum(axis=1)
        cov = frame.w * s[:, 0] + s[:, 1]
        return np.column_stack([total, total, cov])

    def jacobian(self, alpha, frame):
        _, ds = self._components(alpha, frame.X)
        n = len(frame.X)
        # dGamma_k / d sigma2_j, j in (A, C, E)
        dG = np.zeros((n, 3, 3))
        dG[:, 0, :] = dG[:, 1, :] = 1.0
        dG[:, 2, 0] = frame.w
        dG[:, 2, 1] = 1.0
        # chain through the link: d sigma2_j / d a_j = g^-1'(eta_j) x
        D = dG[:, :, :, None] * (ds[:, None, :, None] * frame.X[:, None, None, :])
        return D.reshape(n, 3, 3 * self.p)

    def start(self, frame):
        third = frame.gamma[:, :2].mean() / 3.0
        a = np.zeros((3, self.p))
        a[:, 0] = self.link(third)
        return a.ravel()

    def variances(self, alpha, profile: Mapping[str, float] | None = None) -> AceParams:
        x = np.concatenate([[1.0], self.design.row(profile or {})])
        s, _ = self._components(alpha, x[None, :])
        return AceParams(*map(float, s[0]))

    def proportions(self, alpha, profile: Mapping[str, float] | None = None) -> dict[str, Derived]:
        """h2, c2, e2 at a covariate profile, with gradients w.r.t. alpha."""
        x = np.concatenate([[1.0], self.design.row(profile or {})])
        s, ds = self._components(alpha, x[None, :])
        A, C, E = s[0]
        T = A + C + E
        dsig = np.zeros((3, 3 * self.p))  # d sigma2_K / d alpha
        for k in range(3):
            dsig[k, k * self.p : (k + 1) * self.p] = ds[0, k] * x
        gh = np.array([C + E, -A, -A]) / T**2 @ dsig
        gc = np.array([-C, A + E, -C]) / T**2 @ dsig
        h2, c2 = A / T, C / T
        return {
            "h2": Derived(h2, gh),
            "c2": Derived(c2, gc),
            "e2": Derived(1.0 - h2 - c2, -gh - gc),
        }


@dataclass
class FalconerModel(MomentModel):
    """Separate MZ/DZ variances and correlations.

    ``g(sigma2_z) = x_z' v`` and ``h(rho_z) = x_z' p`` with
    x_z = (1, z, terms..., terms*z...), z = 1 for MZ and 0 for DZ.
    """

    design: CovariateDesign = field(default_factory=CovariateDesign)
    var_link: VarianceLink = VarianceLink.IDENTITY
    corr_link: CorrLink = CorrLink.IDENTITY
    working_cov: str = "identity"
    omega_scale: float = 1.0
    parameterization = "Falconer"

    def __post_init__(self):
        self.var_link = VarianceLink(self.var_link)
        self.corr_link = CorrLink(self.corr_link)

    @property
    def p(self) -> int:
        return 2 + 2 * len(self.design.terms)

    @property
    def param_names(self):
        return tuple(f"{k}{j}" for k in "vp" for j in range(self.p))

    def _column_labels(self):
        labels = [t.label for t in self.design.terms]
        return ["(intercept)", "z", *labels, *(f"{lab}:z" for lab in labels)]

    def _design_matrix(self, mz, terms):
        mz = np.asarray(mz, float)
        return np.column_stack([np.ones(len(mz)), mz, terms, terms * mz[:, None]])

    def _split(self, alpha):
        alpha = np.asarray(alpha, float)
        return alpha[: self.p], alpha[self.p :]

    def moments(self, alpha, X):
        """(sigma2, dsigma2/deta, rho, drho/deta) per design row."""
        v, p = self._split(alpha)
        ev, ep = X @ v, X @ p
        return self.var_link.inverse(ev), self.var_link.dinverse(ev), self.corr_link.inverse(ep), self.corr_link.dinverse(ep)

    def gamma(self, alpha, frame):
        s2, _, rho, _ = self.moments(alpha, frame.X)
        return np.column_stack([s2, s2, s2 * rho])

    def jacobian(self, alpha, frame):
        s2, ds2, rho, drho = self.moments(alpha, frame.X)
        X = frame.X
        n = len(X)
        D = np.zeros((n, 3, 2 * self.p))
        dv = ds2[:, None] * X
        D[:, 0, : self.p] = dv
        D[:, 1, : self.p] = dv
        D[:, 2, : self.p] = rho[:, None] * dv
        D[:, 2, self.p :] = (s2 * drho)[:, None] * X
        return D

    def valid(self, alpha, frame, gamma=None):
        if gamma is None:
            gamma = self.gamma(alpha, frame)
        if not super().valid(alpha, frame, gamma):
            return False
        return bool(np.all(gamma[:, 0] > 0))

    def start(self, frame):
        v = np.zeros(self.p)
        p = np.zeros(self.p)
        links = {}
        for grp, flag in (("DZ", 0.0), ("MZ", 1.0)):
            sel = frame.mz == flag
            g = frame.gamma[sel]
            s2 = g[:, :2].mean() if len(g) else 1.0
            s2 = s2 if s2 > 0 else 1.0
            rho = np.clip(g[:, 2].mean() / s2 if len(g) else 0.0, -0.99, 0.99)
            links[grp] = (self.var_link(s2), self.corr_link(rho))
        v[0], p[0] = links["DZ"]
        v[1] = links["MZ"][0] - links["DZ"][0]
        p[1] = links["MZ"][1] - links["DZ"][1]
        return np.concatenate([v, p])

    def profile_rows(self, profile: Mapping[str, float] | None = None):
        t = self.design.row(profile or {})
        mz = np.concatenate([[1.0, 1.0], t, t])
        dz = np.concatenate([[1.0, 0.0], t, np.zeros_like(t)])
        return mz, dz

    def group_moments(self, alpha, profile: Mapping[str, float] | None = None) -> dict[str, tuple[float, float]]:
        """(sigma2, rho) for MZ and DZ pairs at a covariate profile."""
        mz, dz = self.profile_rows(profile)
        s2, _, rho, _ = self.moments(alpha, np.vstack([mz, dz]))
        return {"MZ": (float(s2[0]), float(rho[0])), "DZ": (float(s2[1]), float(rho[1]))}

    def proportions(self, alpha, profile: Mapping[str, float] | None = None) -> dict[str, Derived]:
        mz, dz = self.profile_rows(profile)
        _, _, rho, drho = self.moments(alpha, np.vstack([mz, dz]))
        d_mz = np.concatenate([np.zeros(self.p), drho[0] * mz])
        d_dz = np.concatenate([np.zeros(self.p), drho[1] * dz])
        h2 = 2 * (rho[0] - rho[1])
        c2 = 2 * rho[1] - rho[0]
        gh = 2 * (d_mz - d_dz)
        gc = 2 * d_dz - d_mz
        return {
            "h2": Derived(float(h2), gh),
            "c2": Derived(float(c2), gc),
            "e2": Derived(float(1.0 - h2 - c2), -gh - gc),
        }


# ---------------------------------------------------------------------------
# single-pair views of a model


def _single_frame(model: MomentModel, z: Zygosity, covariates: Mapping[str, float] | None = None) -> Frame:
    covariates = dict(covariates or {})
    zi = 1.0 if z is Zygosity.MZ else 0.0
    terms = model.design.row(covariates)[None, :]
    X = model._design_matrix(np.array([zi]), terms)
    return Frame(np.zeros((1, 3)), np.array([zi]), np.array([z.weight]), X)


def jacobian(model: MomentModel, alpha, z: Zygosity, covariates: Mapping[str, float] | None = None) -> np.ndarray:
    """3 x q Jacobian of Gamma for one pair."""
    alpha = np.asarray(alpha, float)
    if alpha.shape != (model.q,):
        raise ValueError(f"alpha has length {alpha.size}, model expects {model.q}")
    return model.jacobian(alpha, _single_frame(model, z, covariates))[0]


def working_cov(model: MomentModel, alpha, z: Zygosity, covariates: Mapping[str, float] | None = None) -> np.ndarray:
    frame = _single_frame(model, z, covariates)
    om = model.omega(np.asarray(alpha, float), frame)
    return model.omega_scale * np.eye(3) if om is None else om[0]
