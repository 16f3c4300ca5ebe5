"""Self-contained (mu_w, lambda)-CMA-ES minimizer.

Standard Hansen-style configuration: log-rank recombination weights over the
best mu of lambda candidates, cumulative step-size adaptation, rank-one plus
rank-mu covariance update, eigendecomposition refreshed every generation
(dimensions here stay small). The core is a minimizer; callers maximizing
negate at the boundary.

The update consumes fitnesses only through their ranking (stable sort, ties
broken by candidate index), so any strictly increasing transform of one
generation's fitnesses leaves the resulting state identical. All sampling
comes from the state's own generator: one standard-normal block per ask, so
evaluation parallelism cannot reorder draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import seeded_rng

SIGMA_FLOOR = 1e-12  # optimization stops once the step size collapses below this


class DegenerateCovarianceError(RuntimeError):
    """Covariance eigendecomposition produced non-finite or non-positive values."""


def default_lambda(dim: int) -> int:
    """Default population size 4 + floor(3 ln dim)."""
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    return 4 + int(3 * math.log(dim))


@dataclass
class EvalBudget:
    """Objective-evaluation allowance with exact accounting."""

    max_evaluations: int
    evaluations_used: int = 0

    def __post_init__(self):
        if self.max_evaluations < 1:
            raise ValueError("max_evaluations must be positive")
        if not 0 <= self.evaluations_used <= self.max_evaluations:
            raise ValueError("evaluations_used out of range")

    @property
    def remaining(self) -> int:
        return self.max_evaluations - self.evaluations_used

    def spend(self, n: int) -> None:
        if n < 0 or n > self.remaining:
            raise ValueError(f"cannot spend {n} of {self.remaining} evaluations")
        self.evaluations_used += n


@dataclass
class CmaState:
    """Full strategy state; mutate only through cma_ask/cma_tell."""

    dim: int
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    path_sigma: np.ndarray
    path_cov: np.ndarray
    lam: int
    mu: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_cov_path: float
    c_rank_one: float
    c_rank_mu: float
    chi_n: float
    generation: int
    rng: np.random.Generator


def cma_init(dim: int, x0: Sequence[float], sigma0: float,
             lambda_override: Optional[int] = None, seed: int = 0) -> CmaState:
    """Fresh state at mean x0 with isotropic covariance sigma0**2 * I."""
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    if sigma0 <= 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (dim,):
        raise ValueError(f"x0 must have shape ({dim},), got {x0.shape}")
    lam = default_lambda(dim) if lambda_override is None else int(lambda_override)
    if lam < 2:
        raise ValueError(f"population size must be >= 2, got {lam}")
    mu = lam // 2
    raw = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / float(np.sum(weights**2))
    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = (1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0)
               + c_sigma)
    c_cov_path = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_rank_one = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_rank_mu = min(1.0 - c_rank_one,
                    2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim**2))
    return CmaState(
        dim=dim, mean=x0.copy(), sigma=float(sigma0), cov=np.eye(dim),
        path_sigma=np.zeros(dim), path_cov=np.zeros(dim),
        lam=lam, mu=mu, weights=weights, mu_eff=mu_eff,
        c_sigma=c_sigma, d_sigma=d_sigma, c_cov_path=c_cov_path,
        c_rank_one=c_rank_one, c_rank_mu=c_rank_mu, chi_n=chi_n,
        generation=0, rng=seeded_rng(seed, "cma"),
    )


def _eigendecompose(state: CmaState) -> Tuple[np.ndarray, np.ndarray]:
    """(eigvecs B, scale D = sqrt(eigvals)); raises if the covariance degenerated."""
    if not np.all(np.isfinite(state.cov)):
        raise DegenerateCovarianceError("degenerate covariance: non-finite entries")
    vals, vecs = np.linalg.eigh(state.cov)
    if not np.all(np.isfinite(vals)) or vals.min() <= 0.0:
        raise DegenerateCovarianceError(
            f"degenerate covariance: eigenvalue {vals.min():.3e}"
        )
    return vecs, np.sqrt(vals)


def cma_ask(state: CmaState) -> np.ndarray:
    """Sample lambda candidates x_i = mean + sigma * B D z_i, shape (lam, dim)."""
    B, D = _eigendecompose(state)
    z = state.rng.standard_normal((state.lam, state.dim))
    y = z @ (B * D).T  # rows: B @ (D * z_i)
    return state.mean + state.sigma * y


def cma_tell(state: CmaState, candidates: np.ndarray,
             fitnesses: Sequence[float]) -> CmaState:
    """Update mean, step size, paths and covariance from one evaluated generation.

    Minimization convention. Mutates and returns `state`.
    """
    candidates = np.asarray(candidates, dtype=float)
    fitnesses = np.asarray(fitnesses, dtype=float)
    if candidates.shape != (state.lam, state.dim):
        raise ValueError(
            f"expected {(state.lam, state.dim)} candidates, got {candidates.shape}"
        )
    if fitnesses.shape != (state.lam,):
        raise ValueError(f"expected {state.lam} fitnesses, got {fitnesses.shape}")
    if not np.all(np.isfinite(fitnesses)):
        raise ValueError("fitnesses must be finite")

    B, D = _eigendecompose(state)
    order = np.argsort(fitnesses, kind="stable")
    sel = candidates[order[: state.mu]]
    y_sel = (sel - state.mean) / state.sigma  # (mu, dim)
    y_w = state.weights @ y_sel

    state.mean = state.mean + state.sigma * y_w

    # cumulative step-size adaptation; C^{-1/2} = B diag(1/D) B^T
    cov_inv_sqrt_yw = B @ ((B.T @ y_w) / D)
    cs, dim = state.c_sigma, state.dim
    state.path_sigma = ((1.0 - cs) * state.path_sigma
                        + math.sqrt(cs * (2.0 - cs) * state.mu_eff) * cov_inv_sqrt_yw)
    state.generation += 1
    norm_ps = float(np.linalg.norm(state.path_sigma))
    decay = math.sqrt(1.0 - (1.0 - cs) ** (2 * state.generation))
    h_sigma = 1.0 if norm_ps / decay < (1.4 + 2.0 / (dim + 1.0)) * state.chi_n else 0.0

    cc = state.c_cov_path
    state.path_cov = ((1.0 - cc) * state.path_cov
                      + h_sigma * math.sqrt(cc * (2.0 - cc) * state.mu_eff) * y_w)

    c1, cmu = state.c_rank_one, state.c_rank_mu
    rank_one = np.outer(state.path_cov, state.path_cov)
    rank_mu = (y_sel.T * state.weights) @ y_sel
    state.cov = ((1.0 - c1 - cmu) * state.cov
                 + c1 * (rank_one + (1.0 - h_sigma) * cc * (2.0 - cc) * state.cov)
                 + cmu * rank_mu)
    state.cov = 0.5 * (state.cov + state.cov.T)

    state.sigma = state.sigma * math.exp(
        (cs / state.d_sigma) * (norm_ps / state.chi_n - 1.0)
    )
    return state


Evaluator = Callable[[np.ndarray], Sequence[float]]


def _serial_evaluator(objective: Callable[[np.ndarray], float]) -> Evaluator:
    def run(batch: np.ndarray) -> List[float]:
        return [float(objective(x)) for x in batch]
    return run


def cma_optimize(objective: Callable[[np.ndarray], float], x0: Sequence[float],
                 sigma0: float, budget: EvalBudget, seed: int = 0,
                 lambda_override: Optional[int] = None,
                 evaluator: Optional[Evaluator] = None,
                 ) -> Tuple[np.ndarray, float, List[dict]]:
    """Ask/tell loop within an evaluation budget.

    `evaluator`, when given, maps a (k, dim) candidate block to k fitnesses and
    may evaluate them in parallel; results are consumed by candidate index so
    the outcome is identical to serial evaluation. Returns the best evaluated
    point, its fitness, and a per-generation trace. Leftover budget smaller
    than one population is spent on extra candidates that update only the
    best-so-far. Never exceeds the budget; stops early once sigma collapses.
    """
    x0 = np.asarray(x0, dtype=float)
    state = cma_init(x0.size, x0, sigma0, lambda_override, seed)
    if budget.remaining < state.lam:
        raise ValueError(
            f"budget {budget.remaining} is below one population ({state.lam})"
        )
    if evaluator is None:
        evaluator = _serial_evaluator(objective)

    best_x = x0.copy()
    best_f = math.inf
    trace: List[dict] = []
    while budget.remaining >= state.lam and state.sigma >= SIGMA_FLOOR:
        candidates = cma_ask(state)
        # reserve before evaluating: a crashing objective never undercounts
        # queries already sent to a metered classifier
        budget.spend(state.lam)
        fitnesses = np.asarray(evaluator(candidates), dtype=float)
        gen_best = int(np.argmin(fitnesses, axis=0))
        if fitnesses[gen_best] < best_f:
            best_f = float(fitnesses[gen_best])
            best_x = candidates[gen_best].copy()
        cma_tell(state, candidates, fitnesses)
        trace.append({
            "generation": state.generation,
            "evaluations_used": budget.evaluations_used,
            "best_f": best_f,
            "sigma": state.sigma,
            "mean_norm": float(np.linalg.norm(state.mean)),
        })
    if budget.remaining > 0 and state.sigma >= SIGMA_FLOOR:
        extra = cma_ask(state)[: budget.remaining]
        budget.spend(len(extra))
        fitnesses = np.asarray(evaluator(extra), dtype=float)
        gen_best = int(np.argmin(fitnesses, axis=0))
        if fitnesses[gen_best] < best_f:
            best_f = float(fitnesses[gen_best])
            best_x = extra[gen_best].copy()
        trace.append({
            "generation": state.generation,
            "evaluations_used": budget.evaluations_used,
            "best_f": best_f,
            "sigma": state.sigma,
            "mean_norm": float(np.linalg.norm(state.mean)),
        })
    return best_x, best_f, trace
