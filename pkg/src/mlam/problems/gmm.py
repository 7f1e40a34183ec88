"""Gaussian mixtures with known, frozen covariances.

Solvers optimize the mixing logits and the component means. Mixing weights are
``softmax(logits)`` so an additive update never leaves the simplex.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..autodiff import Tape, Var, concat, const

EPS_LOG = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MixtureParams:
    logits: np.ndarray  # (K,)
    mu: np.ndarray  # (K, D)

    @property
    def pi(self) -> np.ndarray:
        return softmax(self.logits)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"logits": self.logits, "mu": self.mu}


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(eq=False)
class GMMProblem:
    X: np.ndarray  # (G, D)
    K: int
    covs: np.ndarray  # (K, D, D), frozen
    seed: int = 0
    meta: dict = field(default_factory=dict)  # generator record, reporting only

    variables = ("logits", "mu")

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("samples must be a (G, D) matrix")
        if not np.all(np.isfinite(self.X)):
            bad = int(np.argwhere(~np.isfinite(self.X))[0][0])
            raise ValueError(f"non-finite sample at row {bad}")
        G, D = self.X.shape
        if not (G >= self.K >= 1 and D >= 1):
            raise ValueError(f"need G >= K >= 1 and D >= 1, got G={G}, K={self.K}, D={D}")
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(self.K, D, D)
        chol = np.linalg.cholesky(self.covs)  # raises LinAlgError if not SPD
        self.logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        self.prec = np.linalg.inv(self.covs)
        self.prec = 0.5 * (self.prec + np.swapaxes(self.prec, 1, 2))
        self.shared_cov = bool(np.all(self.covs == self.covs[0]))
        # quadratic-form pieces that do not depend on the means
        self._XP = np.einsum("gd,kde->kge", self.X, self.prec)
        self._xPx = np.einsum("kge,ge->kg", self._XP, self.X)

    @property
    def G(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def variable_shapes(self) -> dict[str, tuple[int, ...]]:
        return {"logits": (self.K,), "mu": (self.K, self.D)}

    def init_variables(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = rng.choice(self.G, size=self.K, replace=False)
        return {"logits": np.zeros(self.K), "mu": self.X[idx].copy()}

    def global_loss(self, tape: Tape, variables: Mapping[str, Var]) -> Var:
        return gmm_nll(variables["logits"], variables["mu"], self)

    def metric(self, variables: Mapping[str, np.ndarray]) -> float:
        return nll_value(variables["logits"], variables["mu"], self) / self.G

    def log_densities(self, mu: np.ndarray) -> np.ndarray:
        """``log N(x_g | mu_k, Sigma_k)`` as a (G, K) matrix."""
        mu = np.asarray(mu, dtype=np.float64)
        cross = np.einsum("kge,ke->gk", self._XP, mu)
        mPm = np.einsum("kd,kde,ke->k", mu, self.prec, mu)
        quad = self._xPx.T - 2.0 * cross + mPm[None, :]
        return -0.5 * quad - 0.5 * (self.D * LOG_2PI + self.logdet)[None, :]

    def save(self, stem) -> None:
        """Samples to ``<stem>.csv``, everything else to ``<stem>.json``."""
        stem = Path(stem)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{d}" for d in range(self.D)])
            w.writerows([repr(float(v)) for v in row] for row in self.X)
        meta = {"K": self.K, "seed": self.seed, "covs": self.covs.tolist(), "meta": self.meta}
        stem.with_suffix(".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, stem) -> "GMMProblem":
        stem = Path(stem)
        with open(stem.with_suffix(".csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        meta = json.loads(stem.with_suffix(".json").read_text())
        X = np.array([[float(v) for v in r] for r in rows])
        return cls(X, meta["K"], np.array(meta["covs"]), meta["seed"], meta["meta"])


def generate_gmm(K: int, D: int, G: int, separation: float = 3.0, seed: int = 0) -> GMMProblem:
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    mu = rng.normal(0.0, separation, size=(K, D))
    pi = np.full(K, 1.0 / K)
    labels = rng.choice(K, size=G, p=pi)
    X = mu[labels] + rng.normal(size=(G, D))
    covs = np.broadcast_to(np.eye(D), (K, D, D)).copy()
    meta = {
        "generator": "gmm",
        "K": K,
        "D": D,
        "G": G,
        "separation": separation,
        "true_mu": mu.tolist(),
        "true_pi": pi.tolist(),
    }
    return GMMProblem(X, K, covs, seed, meta)


def flower_geometry(petals: int, radius: float = 6.0, minor_var: float = 0.25, ratio: float = 10.0):
    """Petal means on a circle and covariances elongated along the radius."""
    if petals < 2:
        raise ValueError("need at least 2 petals")
    ang = 2.0 * math.pi * np.arange(petals) / petals
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    covs = np.empty((petals, 2, 2))
    for k, a in enumerate(ang):
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        covs[k] = rot @ np.diag([ratio * minor_var, minor_var]) @ rot.T
        covs[k] = 0.5 * (covs[k] + covs[k].T)
    return means, covs


def generate_flower(
    petals: int = 8,
    G: int = 10_000,
    seed: int = 0,
    radius: float = 6.0,
    minor_var: float = 0.25,
    ratio: float = 10.0,
) -> GMMProblem:
    means, covs = flower_geometry(petals, radius, minor_var, ratio)
    rng = np.random.default_rng(seed)
    labels = rng.choice(petals, size=G)
    chol = np.linalg.cholesky(covs)
    X = means[labels] + np.einsum("gde,ge->gd", chol[labels], rng.normal(size=(G, 2)))
    meta = {
        "generator": "flower",
        "petals": petals,
        "G": G,
        "radius": radius,
        "minor_var": minor_var,
        "ratio": ratio,
        "true_mu": means.tolist(),
        "true_pi": [1.0 / petals] * petals,
    }
    return GMMProblem(X, petals, covs, seed, meta)


def _row_lse_with_floor(a: np.ndarray) -> np.ndarray:
    # log(sum_k exp(a_gk) + EPS_LOG), shifted by the row max
    m = a.max(axis=1)
    floor = EPS_LOG * np.exp(np.minimum(-m, 700.0))
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1) + floor)


def nll_value(logits, mu, problem: GMMProblem) -> float:
    logpi = np.log(softmax(logits))
    a = logpi[None, :] + problem.log_densities(mu)
    return -float(_row_lse_with_floor(a).sum())


def gmm_nll(logits: Var, mu: Var, problem: GMMProblem) -> Var:
    """Total negative log-likelihood ``-sum_g log(sum_k pi_k N_gk + eps)`` on the tape."""
    K, D, G = problem.K, problem.D, problem.G
    if logits.shape != (K,) or mu.shape != (K, D):
        raise ValueError(f"expected logits {(K,)} and mu {(K, D)}, got {logits.shape}, {mu.shape}")
    tape = mu.tape
    ones_1K = const(tape, np.ones((1, K)))
    ones_K1 = const(tape, np.ones((K, 1)))

    # log softmax of the logits
    l = logits.reshape(1, K)
    lmax = float(l.value.max())
    lse = ((l - const(tape, np.full((1, K), lmax))).exp().sum().log() + lmax).reshape(1, 1)
    logpi = l - lse @ ones_1K

    norm = -0.5 * (D * LOG_2PI + problem.logdet)
    if problem.shared_cov:
        P = problem.prec[0]
        cross = const(tape, problem._XP[0]) @ mu.T  # (G, K)
        mPm = ((mu @ const(tape, P)) * mu) @ const(tape, np.ones((D, 1)))  # (K, 1)
        quad = const(tape, np.repeat(problem._xPx[0][:, None], K, axis=1)) - cross * 2.0
        quad = quad + mPm.T.broadcast_row(G)
        logN = quad * -0.5 + const(tape, np.tile(norm, (G, 1)))
    else:
        cols = []
        for k in range(K):
            e_k = np.zeros((1, K))
            e_k[0, k] = 1.0
            mu_k = const(tape, e_k) @ mu  # (1, D)
            cross = const(tape, problem._XP[k]) @ mu_k.T  # (G, 1)
            mPm = (mu_k @ const(tape, problem.prec[k])) @ mu_k.T  # (1, 1)
            quad = const(tape, problem._xPx[k][:, None]) - cross * 2.0 + mPm.broadcast_row(G)
            cols.append(quad * -0.5 + const(tape, np.full((G, 1), norm[k])))
        logN = cols[0] if K == 1 else concat(cols, axis=1)

    a = logpi.broadcast_row(G) + logN
    m = a.value.max(axis=1, keepdims=True)
    shifted = (a - const(tape, np.repeat(m, K, axis=1))).exp() @ ones_K1  # (G, 1)
    floor = EPS_LOG * np.exp(np.minimum(-m, 700.0))
    ll = (shifted + const(tape, floor)).log().sum() + float(m.sum())
    return -ll


def responsibilities(logits, mu, problem: GMMProblem) -> np.ndarray:
    """Posterior membership ``gamma_gk``, computed in log space; rows sum to 1."""
    logpi = np.log(softmax(logits))
    a = logpi[None, :] + problem.log_densities(mu)
    m = a.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        bad = int(np.argwhere(~np.isfinite(m[:, 0]))[0][0])
        raise FloatingPointError(f"all components underflow at sample {bad}")
    w = np.exp(a - m)
    return w / w.sum(axis=1, keepdims=True)
