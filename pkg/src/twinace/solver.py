"""Fisher-scoring solver for the second-order estimating equations.

Solves ``sum_i D_i' Omega_i^-1 (gamma_i - Gamma_i(alpha)) = 0`` with the update

    alpha <- alpha + (sum D' Omega^-1 D)^-1 (sum D' Omega^-1 f)

and exposes the pieces of the model-based and sandwich covariances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import TwinDataset
from .errors import InsufficientDataError, SingularityError
from .moments import MomentModel

log = logging.getLogger(__name__)

MAX_CONDITION = 1e13


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 100
    tol: float = 1e-8
    step_halving_max: int = 30
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0 or self.ridge < 0 or self.step_halving_max < 0:
            raise ValueError(f"invalid solver configuration {self}")


@dataclass
class SolveOutcome:
    alpha_hat: np.ndarray
    iterations: int
    converged: bool
    final_update_norm: float
    relative_change: float
    psi: np.ndarray
    meat: np.ndarray
    score: np.ndarray
    n_pairs: int
    param_names: tuple[str, ...] = ()


def _weighted(model: MomentModel, alpha, frame, gamma=None):
    """D, Omega^-1 D and f for every pair."""
    if gamma is None:
        gamma = model.gamma(alpha, frame)
    D = model.jacobian(alpha, frame)
    f = frame.gamma - gamma
    om = model.omega(alpha, frame, gamma)
    if om is None:
        WD = D / model.omega_scale
    else:
        WD = np.linalg.solve(om, D)
    return D, WD, f


def _normal_equations(D, WD, f):
    psi_sum = np.einsum("nkq,nkr->qr", D, WD)
    psi_sum = 0.5 * (psi_sum + psi_sum.T)
    score = np.einsum("nkq,nk->q", WD, f)
    return psi_sum, score


def _solve_psd(M, b, ridge):
    if ridge > 0:
        M = M + ridge * np.trace(M) / len(M) * np.eye(len(M))
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularityError("sum of D' Omega^-1 D is singular", condition=float(cond))
    return np.linalg.solve(M, b)


def solve(data: TwinDataset, model: MomentModel, alpha0=None, config: SolverConfig | None = None) -> SolveOutcome:
    """Iterate the scoring update from ``alpha0`` (model default start if None)."""
    config = config or SolverConfig()
    if len(data) == 0:
        raise InsufficientDataError("cannot fit an empty dataset")
    if model.parameterization == "Falconer":
        data.require_both_groups()
    frame = model.frame(data)
    model.check_design(frame)
    alpha = np.array(model.start(frame) if alpha0 is None else alpha0, dtype=float)
    if alpha.shape != (model.q,):
        raise ValueError(f"alpha0 has length {alpha.size}, model expects {model.q}")
    if not model.valid(alpha, frame):
        raise ValueError("starting value gives an inadmissible moment structure")

    converged = False
    step_norm = np.inf
    rel = np.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        D, WD, f = _weighted(model, alpha, frame)
        psi_sum, score = _normal_equations(D, WD, f)
        step = _solve_psd(psi_sum, score, config.ridge)
        for _ in range(config.step_halving_max + 1):
            candidate = alpha + step
            if model.valid(candidate, frame):
                break
            step = step / 2
        else:
            log.debug("step halving exhausted at iteration %d", it)
            break
        step_norm = float(np.max(np.abs(step)))
        rel = step_norm / max(float(np.max(np.abs(candidate))), np.finfo(float).tiny)
        alpha = candidate
        if step_norm <= config.tol:
            converged = True
            break

    D, WD, f = _weighted(model, alpha, frame)
    psi_sum, score = _normal_equations(D, WD, f)
    u = np.einsum("nkq,nk->nq", WD, f)
    meat = u.T @ u
    meat = 0.5 * (meat + meat.T)
    n = len(data)
    return SolveOutcome(
        alpha_hat=alpha,
        iterations=it,
        converged=converged,
        final_update_norm=step_norm,
        relative_change=rel,
        psi=psi_sum / n,
        meat=meat,
        score=score,
        n_pairs=n,
        param_names=model.param_names,
    )


def _inverse(psi):
    cond = np.linalg.cond(psi)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularityError("Psi is singular", condition=float(cond))
    inv = np.linalg.inv(psi)
    return 0.5 * (inv + inv.T)


def sandwich_cov(outcome: SolveOutcome, n_pairs: int | None = None) -> np.ndarray:
    """Robust covariance ``N^-2 Psi^-1 meat Psi^-1``."""
    n = outcome.n_pairs if n_pairs is None else n_pairs
    inv = _inverse(outcome.psi)
    cov = inv @ outcome.meat @ inv / n**2
    return 0.5 * (cov + cov.T)


def model_based_cov(outcome: SolveOutcome, n_pairs: int | None = None) -> np.ndarray:
    """Model-based covariance ``Psi^-1 / N``."""
    n = outcome.n_pairs if n_pairs is None else n_pairs
    return _inverse(outcome.psi) / n
