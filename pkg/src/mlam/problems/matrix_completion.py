"""Synthetic low-rank matrix completion with a regularized factorization loss."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ..autodiff import Tape, Var, const

INIT_STD = 0.1


@dataclass(frozen=True, eq=False)
class MatrixCompletionProblem:
    R: np.ndarray  # ground truth, evaluation only
    mask: np.ndarray
    R_S: np.ndarray
    p: int
    lam: float
    seed: int
    rank: int
    obs_rate: float

    variables = ("U", "V")

    @property
    def shape(self) -> tuple[int, int]:
        return self.R.shape

    def variable_shapes(self) -> dict[str, tuple[int, int]]:
        z, q = self.R.shape
        return {"U": (z, self.p), "V": (q, self.p)}

    def init_variables(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {k: rng.normal(0.0, INIT_STD, size=s) for k, s in self.variable_shapes().items()}

    def global_loss(self, tape: Tape, variables: Mapping[str, Var]) -> Var:
        return mc_global_loss(variables["U"], variables["V"], self)

    def metric(self, variables: Mapping[str, np.ndarray]) -> float:
        return rmse(variables["U"], variables["V"], self)

    def objective(self, U: np.ndarray, V: np.ndarray) -> float:
        """Plain numpy value of the regularized loss."""
        resid = (self.R_S - U @ V.T)[self.mask]
        return 0.5 * float(resid @ resid) + 0.5 * self.lam * float(np.sum(U * U) + np.sum(V * V))

    def to_json(self) -> dict:
        return {
            "kind": "matrix-completion",
            "seed": self.seed,
            "rank": self.rank,
            "obs_rate": self.obs_rate,
            "p": self.p,
            "lam": self.lam,
            "R": self.R.tolist(),
            "mask": self.mask.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "MatrixCompletionProblem":
        R = np.array(d["R"], dtype=np.float64)
        mask = np.array(d["mask"], dtype=bool)
        return cls(R, mask, np.where(mask, R, 0.0), d["p"], d["lam"], d["seed"], d["rank"], d["obs_rate"])


def generate_problem(
    z: int, q: int, rank: int, obs_rate: float, p: int | None = None, lam: float = 0.1, seed: int = 0
) -> MatrixCompletionProblem:
    if not 1 <= rank <= min(z, q):
        raise ValueError(f"rank must be in [1, {min(z, q)}], got {rank}")
    if not 0 < obs_rate <= 1:
        raise ValueError(f"obs_rate must be in (0, 1], got {obs_rate}")
    p = rank if p is None else p
    if p < 1:
        raise ValueError("p must be >= 1")
    n_obs = int(round(obs_rate * z * q))
    if n_obs == 0:
        raise ValueError(f"obs_rate {obs_rate} leaves no observed entries in a {z}x{q} matrix")
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(z, rank))
    B = rng.normal(size=(q, rank))
    R = A @ B.T
    idx = rng.choice(z * q, size=n_obs, replace=False)
    mask = np.zeros(z * q, dtype=bool)
    mask[idx] = True
    mask = mask.reshape(z, q)
    return MatrixCompletionProblem(R, mask, np.where(mask, R, 0.0), p, lam, seed, rank, obs_rate)


def mc_global_loss(U: Var, V: Var, problem: MatrixCompletionProblem) -> Var:
    """0.5 * ||P_mask(R - U V^T)||_F^2 + lam/2 * (||U||^2 + ||V||^2) as a tape node."""
    shapes = problem.variable_shapes()
    if U.shape != shapes["U"] or V.shape != shapes["V"]:
        raise ValueError(f"factor shapes {U.shape}, {V.shape} do not match {shapes['U']}, {shapes['V']}")
    tape = U.tape
    resid = (const(tape, problem.R_S) - U @ V.T).masked_select(problem.mask)
    fit = resid.square().sum() * 0.5
    reg = (U.square().sum() + V.square().sum()) * (0.5 * problem.lam)
    return fit + reg


def rmse(U: np.ndarray, V: np.ndarray, problem: MatrixCompletionProblem) -> float:
    """Relative Frobenius error ||R - U V^T|| / ||R|| against the hidden ground truth."""
    U = np.asarray(U)
    V = np.asarray(V)
    shapes = problem.variable_shapes()
    if U.shape != shapes["U"] or V.shape != shapes["V"]:
        raise ValueError(f"factor shapes {U.shape}, {V.shape} do not match problem")
    denom = np.linalg.norm(problem.R)
    if denom == 0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm(problem.R - U @ V.T) / denom)


def save_problems(path, problems) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in problems]))


def load_problems(path) -> list[MatrixCompletionProblem]:
    return [MatrixCompletionProblem.from_json(d) for d in json.loads(Path(path).read_text())]
