"""Classical solvers used for comparison: ALS and SGD for matrix completion, EM for mixtures."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
from numba import njit
from scipy import linalg

from .problems.gmm import GMMProblem, MixtureParams, nll_value, responsibilities
from .problems.matrix_completion import MatrixCompletionProblem

log = logging.getLogger(__name__)

DIVERGED_LOSS = 1e12


@dataclass
class BaselineConfig:
    max_iters: int = 100
    lr: float = 0.01
    lam: float | None = None  # None: use the problem's lambda
    tolerance: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


class FactorResult(NamedTuple):
    U: np.ndarray
    V: np.ndarray
    history: list[float]


class BaselineDiverged(RuntimeError):
    def __init__(self, msg: str, history: list[float]):
        super().__init__(msg)
        self.history = history


def _lam(problem, config: BaselineConfig) -> float:
    return problem.lam if config.lam is None else config.lam


def _init_factors(problem, init, seed):
    if init is None:
        rng = np.random.default_rng([seed, problem.seed])
        init = problem.init_variables(rng)
    return np.array(init["U"], dtype=np.float64), np.array(init["V"], dtype=np.float64)


def _ridge_rows(target, mask, F, lam, out):
    # row i: (F_i^T F_i + lam I) x = F_i^T r_i over the observed columns of row i
    p = F.shape[1]
    for i in range(target.shape[0]):
        obs = mask[i]
        Fi = F[obs]
        A = Fi.T @ Fi + lam * np.eye(p)
        b = Fi.T @ target[i, obs]
        try:
            out[i] = linalg.cho_solve(linalg.cho_factor(A), b)
        except linalg.LinAlgError:
            warnings.warn(f"singular normal equations in row {i}; adding 1e-10*I", RuntimeWarning)
            out[i] = linalg.solve(A + 1e-10 * np.eye(p), b, assume_a="sym")


def als_solve(
    problem: MatrixCompletionProblem,
    config: BaselineConfig | None = None,
    init: Mapping[str, np.ndarray] | None = None,
) -> FactorResult:
    """Alternating exact ridge solves for U then V. History starts with the initial loss."""
    config = config or BaselineConfig()
    lam = _lam(problem, config)
    U, V = _init_factors(problem, init, config.seed)
    hist = [_objective(problem, U, V, lam)]
    for _ in range(config.max_iters):
        _ridge_rows(problem.R_S, problem.mask, V, lam, U)
        _ridge_rows(problem.R_S.T, problem.mask.T, U, lam, V)
        hist.append(_objective(problem, U, V, lam))
        if abs(hist[-2] - hist[-1]) <= config.tolerance * max(1.0, abs(hist[-1])):
            break
    return FactorResult(U, V, hist)


def _objective(problem, U, V, lam):
    resid = (problem.R_S - U @ V.T)[problem.mask]
    return 0.5 * float(resid @ resid) + 0.5 * lam * float(np.sum(U * U) + np.sum(V * V))


@njit(cache=True)
def _sgd_epoch(U, V, rows, cols, vals, order, lr, lam):
    p = U.shape[1]
    for n in range(order.shape[0]):
        idx = order[n]
        i = rows[idx]
        j = cols[idx]
        e = vals[idx]
        for k in range(p):
            e -= U[i, k] * V[j, k]
        for k in range(p):
            u = U[i, k]
            U[i, k] = u + lr * (e * V[j, k] - lam * u)
            V[j, k] = V[j, k] + lr * (e * u - lam * V[j, k])


def sgd_solve(
    problem: MatrixCompletionProblem,
    config: BaselineConfig | None = None,
    init: Mapping[str, np.ndarray] | None = None,
) -> FactorResult:
    """Per-entry SGD; one iteration is one pass over a seeded shuffle of the observed entries."""
    config = config or BaselineConfig()
    lam = _lam(problem, config)
    U, V = _init_factors(problem, init, config.seed)
    rows, cols = np.nonzero(problem.mask)
    vals = problem.R_S[rows, cols].copy()
    rng = np.random.default_rng([config.seed, problem.seed, 3])
    hist = [_objective(problem, U, V, lam)]
    for _ in range(config.max_iters):
        _sgd_epoch(U, V, rows, cols, vals, rng.permutation(rows.size), config.lr, lam)
        f = _objective(problem, U, V, lam)
        hist.append(f)
        if not np.isfinite(f) or f > DIVERGED_LOSS:
            raise BaselineDiverged(f"SGD diverged with lr={config.lr}", hist)
    return FactorResult(U, V, hist)


class MixtureResult(NamedTuple):
    params: MixtureParams
    history: list[float]


@dataclass
class EMEvents:
    reinitialized: list[tuple[int, int]] = field(default_factory=list)  # (iteration, component)


EM_STOP = 1e-4


def em_fit(
    problem: GMMProblem,
    init: MixtureParams | Mapping[str, np.ndarray],
    config: BaselineConfig | None = None,
    events: EMEvents | None = None,
) -> MixtureResult:
    """EM on means and weights; covariances stay fixed.

    Stops once the total negative log-likelihood changes by less than 1e-4.
    """
    config = config or BaselineConfig(max_iters=1000)
    if isinstance(init, MixtureParams):
        init = init.as_dict()
    logits = np.array(init["logits"], dtype=np.float64)
    mu = np.array(init["mu"], dtype=np.float64)
    rng = np.random.default_rng([config.seed, problem.seed, 5])
    hist = [nll_value(logits, mu, problem)]
    for it in range(config.max_iters):
        gamma = responsibilities(logits, mu, problem)
        nk = gamma.sum(axis=0)
        pi = nk / problem.G
        for k in np.flatnonzero(nk < 1e-12):
            mu[k] = problem.X[rng.integers(problem.G)]
            pi[k] = 1.0 / problem.G
            if events is not None:
                events.reinitialized.append((it, int(k)))
            log.info("EM: component %d empty at iteration %d; reinitialized", k, it)
        live = nk >= 1e-12
        mu[live] = (gamma[:, live].T @ problem.X) / nk[live, None]
        pi = pi / pi.sum()
        logits = np.log(pi)
        hist.append(nll_value(logits, mu, problem))
        if abs(hist[-2] - hist[-1]) < EM_STOP:
            break
    return MixtureResult(MixtureParams(logits, mu), hist)
