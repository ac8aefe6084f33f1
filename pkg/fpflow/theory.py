"""One-step linear flow matching for the Ornstein-Uhlenbeck process.

The velocity model is affine, f(x) = Theta1 x + theta0, the drift is b(x) = B1 x + b0 and the
samples come from N(mu0, Sigma0). The composed target is b - gamma * grad log rho0, so the
residual map is x -> R x + r with R = Theta1 - B1 - gamma Sigma0^-1 and r = theta0 - b0 + gamma Sigma0^-1 mu0.
Everything here is small dense numpy linear algebra.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from fpflow.errors import InputError, StepSizeError

logger = logging.getLogger(__name__)

Params = tuple[np.ndarray, np.ndarray]  # (theta0, Theta1)


@dataclass(frozen=True)
class OneStepProblem:
    B1: np.ndarray
    b0: np.ndarray
    mu0: np.ndarray
    cov0: np.ndarray
    gamma: float

    def __post_init__(self) -> None:
        d = self.mu0.shape[0]
        if self.B1.shape != (d, d) or self.b0.shape != (d,) or self.cov0.shape != (d, d):
            raise InputError("problem shapes do not agree", code="dimension_mismatch")
        if not np.allclose(self.cov0, self.cov0.T, atol=1e-12):
            raise InputError("Sigma0 must be symmetric", code="singular_covariance")
        if self.sigma0 <= 0.0:
            raise InputError("Sigma0 must be positive definite", code="singular_covariance")

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]

    @property
    def sigma0(self) -> float:
        """Smallest eigenvalue of Sigma0."""
        return float(np.linalg.eigvalsh(self.cov0)[0])

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.cov0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.multivariate_normal(self.mu0, self.cov0, size=n)


def _residual_map(problem: OneStepProblem, theta: Params) -> tuple[np.ndarray, np.ndarray]:
    theta0, Theta1 = theta
    d = problem.dim
    if theta0.shape != (d,) or Theta1.shape != (d, d):
        raise InputError("parameter shapes do not match the problem", code="dimension_mismatch")
    prec = problem.precision
    R = Theta1 - problem.B1 - problem.gamma * prec
    r = theta0 - problem.b0 + problem.gamma * prec @ problem.mu0
    return R, r


def population_loss(problem: OneStepProblem, theta: Params) -> float:
    """Closed form via Gaussian moments: tr(R Sigma0 R^T) + |R mu0 + r|^2."""
    R, r = _residual_map(problem, theta)
    shift = R @ problem.mu0 + r
    return float(np.trace(R @ problem.cov0 @ R.T) + shift @ shift)


def empirical_loss(problem: OneStepProblem, theta: Params, samples: np.ndarray) -> float:
    R, r = _residual_map(problem, theta)
    res = samples @ R.T + r
    return float((res * res).sum(-1).mean())


def empirical_grad(problem: OneStepProblem, theta: Params, samples: np.ndarray) -> Params:
    R, r = _residual_map(problem, theta)
    res = samples @ R.T + r
    n = samples.shape[0]
    return 2.0 * res.mean(0), 2.0 * res.T @ samples / n


def optimal_params(problem: OneStepProblem) -> Params:
    prec = problem.precision
    return problem.b0 - problem.gamma * prec @ problem.mu0, problem.B1 + problem.gamma * prec


def lambda0(sigma0: float, mu_sq: float) -> float:
    a = 1.0 + sigma0 + mu_sq
    return 0.5 * (a - math.sqrt(max(a * a - 4.0 * sigma0, 0.0)))


def moment_block(mean: np.ndarray, second: np.ndarray) -> np.ndarray:
    """2 [[1, m^T], [m, E x x^T]]: the Hessian of the loss in one row (r_i, R_i)."""
    d = mean.shape[0]
    block = np.empty((d + 1, d + 1))
    block[0, 0] = 1.0
    block[0, 1:] = mean
    block[1:, 0] = mean
    block[1:, 1:] = second
    return 2.0 * block


@dataclass(frozen=True)
class HessianReport:
    population: np.ndarray
    population_min_eig: float
    population_norm: float
    empirical: Optional[np.ndarray] = None
    empirical_min_eig: Optional[float] = None
    empirical_norm: Optional[float] = None


def hessians(problem: OneStepProblem, samples: Optional[np.ndarray] = None) -> HessianReport:
    mu = problem.mu0
    pop = moment_block(mu, problem.cov0 + np.outer(mu, mu))
    pop_eigs = np.linalg.eigvalsh(pop)
    if samples is None:
        return HessianReport(pop, float(pop_eigs[0]), float(pop_eigs[-1]))
    emp = moment_block(samples.mean(0), samples.T @ samples / samples.shape[0])
    emp_eigs = np.linalg.eigvalsh(emp)
    return HessianReport(pop, float(pop_eigs[0]), float(pop_eigs[-1]), emp, float(emp_eigs[0]), float(emp_eigs[-1]))


def eta_max(problem: OneStepProblem) -> float:
    mu_sq = float(problem.mu0 @ problem.mu0)
    cov_norm = float(np.linalg.norm(problem.cov0, 2))
    return (4.0 / 3.0) / (8.0 * (1.0 + mu_sq) + 4.0 * cov_norm + lambda0(problem.sigma0, mu_sq))


def param_distance(a: Params, b: Params) -> float:
    return float(math.sqrt(np.sum((a[0] - b[0]) ** 2) + np.sum((a[1] - b[1]) ** 2)))


@dataclass
class GDRun:
    eta: float
    theta0: np.ndarray  # (K+1, d)
    Theta1: np.ndarray  # (K+1, d, d)
    loss: np.ndarray  # (K+1,)
    distance: np.ndarray  # (K+1,) distance to the closed-form minimizer

    @property
    def final(self) -> Params:
        return self.theta0[-1], self.Theta1[-1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"k": np.arange(self.loss.shape[0]), "empirical_loss": self.loss, "distance": self.distance})


def gd_run(
    problem: OneStepProblem,
    samples: np.ndarray,
    eta: float,
    n_iter: int,
    theta_init: Optional[Params] = None,
) -> GDRun:
    """Plain gradient descent on the empirical loss; the sample set is fixed for the whole run."""
    d = problem.dim
    theta = (np.zeros(d), np.zeros((d, d))) if theta_init is None else (theta_init[0].copy(), theta_init[1].copy())
    star = optimal_params(problem)
    th0 = np.empty((n_iter + 1, d))
    Th1 = np.empty((n_iter + 1, d, d))
    losses = np.empty(n_iter + 1)
    dist = np.empty(n_iter + 1)
    for k in range(n_iter + 1):
        th0[k], Th1[k] = theta
        losses[k] = empirical_loss(problem, theta, samples)
        dist[k] = param_distance(theta, star)
        if losses[k] > 10.0 * max(losses[0], 1e-24) or not math.isfinite(losses[k]):
            raise StepSizeError(f"loss grew from {losses[0]:.3e} to {losses[k]:.3e} at step {k}")
        if k == n_iter:
            break
        g0, g1 = empirical_grad(problem, theta, samples)
        theta = (theta[0] - eta * g0, theta[1] - eta * g1)
    return GDRun(eta=eta, theta0=th0, Theta1=Th1, loss=losses, distance=dist)


def fit_rate(losses: np.ndarray, floor: float = 1e-20) -> float:
    """Least-squares slope of log loss against the iteration index, over losses above `floor`."""
    k = np.flatnonzero(np.asarray(losses) > floor)
    if k.size < 2:
        return float("-inf")
    slope, _ = np.polyfit(k.astype(float), np.log(np.asarray(losses)[k]), 1)
    return float(slope)


def random_problem(
    rng: np.random.Generator,
    dim: int,
    gamma: float = 0.5,
    B1: Optional[np.ndarray] = None,
    eig_range: tuple[float, float] = (0.2, 2.0),
    mean_scale: float = 1.0,
) -> OneStepProblem:
    """Random Gaussian start with eigenvalues of Sigma0 in `eig_range`; drift random unless given."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = rng.uniform(*eig_range, size=dim)
    cov = (q * eigs) @ q.T
    cov = 0.5 * (cov + cov.T)
    return OneStepProblem(
        B1=rng.standard_normal((dim, dim)) if B1 is None else np.asarray(B1, dtype=float),
        b0=rng.standard_normal(dim),
        mu0=mean_scale * rng.standard_normal(dim) / math.sqrt(dim),
        cov0=cov,
        gamma=gamma,
    )


@dataclass(frozen=True)
class TheorySummary:
    dim: int
    samples: int
    iterations: int
    eta: float
    eta_max: float
    lambda0: float
    lambda0_empirical: float
    fitted_rate: float
    theoretical_rate: float
    final_loss: float
    final_distance: float
    population_min_eig: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def summarize(problem: OneStepProblem, samples: np.ndarray, run: GDRun) -> TheorySummary:
    mu_sq = float(problem.mu0 @ problem.mu0)
    lam = lambda0(problem.sigma0, mu_sq)
    report = hessians(problem, samples)
    return TheorySummary(
        dim=problem.dim,
        samples=samples.shape[0],
        iterations=run.loss.shape[0] - 1,
        eta=run.eta,
        eta_max=eta_max(problem),
        lambda0=lam,
        lambda0_empirical=0.5 * float(report.empirical_min_eig),
        fitted_rate=fit_rate(run.loss),
        theoretical_rate=math.log(max(1.0 - 2.0 * run.eta * lam, np.finfo(float).tiny)),
        final_loss=float(run.loss[-1]),
        final_distance=float(run.distance[-1]),
        population_min_eig=report.population_min_eig,
    )
