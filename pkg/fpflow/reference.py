from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.linalg import expm

from fpflow.errors import AccuracyError, FlowDivergenceError, InputError, UnsupportedError
from fpflow.jets import DTYPE, FieldJet, as_batch, controlled_trace
from fpflow.problems import diffusive_mask, drift, mobility, noise_scale, stationary_energy
from fpflow.runtime.seeding import substream
from fpflow.settings import ProblemSpec

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class GaussianRef:
    """N(mean, cov) with closed-form log-density, score and Hessian."""

    def __init__(self, mean, cov) -> None:
        self.mean = torch.as_tensor(mean, dtype=DTYPE).reshape(-1)
        self.cov = torch.as_tensor(cov, dtype=DTYPE)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise InputError("covariance shape does not match mean", code="dimension_mismatch")
        if not torch.allclose(self.cov, self.cov.T, rtol=0.0, atol=1e-12):
            raise InputError("covariance must be symmetric", code="singular_covariance")
        chol, info = torch.linalg.cholesky_ex(self.cov)
        if int(info) != 0:
            raise InputError("covariance is not positive definite", code="singular_covariance")
        self.chol = chol
        self.precision = torch.cholesky_inverse(chol)
        self.logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()

    @classmethod
    def isotropic(cls, dim: int, var: float, mean: float = 0.0) -> "GaussianRef":
        return cls(torch.full((dim,), float(mean), dtype=DTYPE), float(var) * torch.eye(dim, dtype=DTYPE))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density(self, x) -> torch.Tensor:
        xb, single = as_batch(x)
        z = xb - self.mean
        quad = ((z @ self.precision) * z).sum(-1)
        out = -0.5 * (self.dim * math.log(2.0 * math.pi) + self.logdet + quad)
        return out[0] if single else out

    def density(self, x) -> torch.Tensor:
        return torch.exp(self.log_density(x))

    def score(self, x) -> torch.Tensor:
        xb, single = as_batch(x)
        out = -(xb - self.mean) @ self.precision
        return out[0] if single else out

    def hessian(self) -> torch.Tensor:
        return -self.precision

    def sample(self, rng: np.random.Generator, n: int) -> torch.Tensor:
        z = torch.from_numpy(rng.standard_normal(size=(n, self.dim)))
        return self.mean + z @ self.chol.T


def gaussian_kl(p: GaussianRef, q: GaussianRef) -> float:
    """KL(p || q) for Gaussians."""
    diff = q.mean - p.mean
    val = (
        torch.trace(q.precision @ p.cov)
        + diff @ q.precision @ diff
        - p.dim
        + q.logdet
        - p.logdet
    )
    return float(0.5 * val)


def gaussian_entropy(p: GaussianRef) -> float:
    return float(0.5 * (p.dim * (1.0 + math.log(2.0 * math.pi)) + p.logdet))


# ---- Ornstein-Uhlenbeck -----------------------------------------------------


def ou_covariance(t: float, delta: float, eps: float) -> float:
    decay = math.exp(-2.0 * t)
    return decay * delta + eps * (1.0 - decay)


def ou_true_field(t: float, x, delta: float, eps: float, c: float) -> torch.Tensor:
    xb, single = as_batch(x)
    a = -mobility(ProblemSpec(kind="langevin", dim=xb.shape[-1], c=c, eps=eps))
    out = xb @ a.T + eps * xb / ou_covariance(t, delta, eps)
    return out[0] if single else out


# ---- underdamped Langevin, quadratic potential --------------------------------


def _uld_system(gamma: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    mat = np.array([[0.0, 2.0, 0.0], [-1.0, -gamma, 1.0], [0.0, -2.0, -2.0 * gamma]])
    force = np.array([0.0, 0.0, 2.0 * gamma / beta])
    return mat, force


def uld_covariance_rk4(sigma0: Sequence[float], gamma: float, beta: float, dt: float, n_steps: int) -> np.ndarray:
    """Classic RK4 for the (Sxx, Sxv, Svv) covariance ODE; returns (n_steps + 1, 3)."""
    if gamma <= 0.0 or beta <= 0.0:
        raise InputError("gamma and beta must be positive", code="bad_uld_parameters")
    mat, force = _uld_system(gamma, beta)

    def rhs(y: np.ndarray) -> np.ndarray:
        return mat @ y + force

    out = np.empty((n_steps + 1, 3))
    y = np.asarray(sigma0, dtype=float).copy()
    out[0] = y
    for j in range(n_steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[j + 1] = y
    return out


def uld_covariance_exact(sigma0: Sequence[float], gamma: float, beta: float, t: float) -> np.ndarray:
    mat, force = _uld_system(gamma, beta)
    aug = np.zeros((4, 4))
    aug[:3, :3] = mat
    aug[:3, 3] = force
    y0 = np.append(np.asarray(sigma0, dtype=float), 1.0)
    return (expm(aug * t) @ y0)[:3]


def uld_state_covariance(entries: Sequence[float], d: int) -> torch.Tensor:
    """Full (x, v) covariance for d independent position/velocity pairs."""
    sxx, sxv, svv = (float(e) for e in entries)
    block = torch.tensor([[sxx, sxv], [sxv, svv]], dtype=DTYPE)
    return torch.kron(block, torch.eye(d, dtype=DTYPE))


# ---- linear composed fields ---------------------------------------------------


class LinearBaseline:
    """Time-dependent linear field f(t, y) = A(t) y + a(t) acting on the trailing out_dim coordinates."""

    def __init__(
        self,
        matrix_fn: Callable[[float], torch.Tensor],
        offset_fn: Optional[Callable[[float], torch.Tensor]] = None,
        name: str = "linear",
    ) -> None:
        self.matrix_fn = matrix_fn
        self.offset_fn = offset_fn
        self.name = name

    @classmethod
    def constant(cls, matrix, offset=None, name: str = "linear") -> "LinearBaseline":
        a = torch.as_tensor(matrix, dtype=DTYPE)
        b = None if offset is None else torch.as_tensor(offset, dtype=DTYPE)
        return cls(lambda t: a, None if b is None else (lambda t: b), name=name)

    def __call__(self, t: float, y: torch.Tensor) -> torch.Tensor:
        out = y @ self.matrix_fn(t).T
        if self.offset_fn is not None:
            out = out + self.offset_fn(t)
        return out

    def jet(self, t: float, y: torch.Tensor, order: int = 1) -> FieldJet:
        a = self.matrix_fn(t)
        batch = y.shape[0]
        m, n = a.shape
        jac = a.expand(batch, m, n).clone()
        jet = FieldJet(
            value=self(t, y),
            jacobian=jac,
            divergence=controlled_trace(jac),
            grad_div=torch.zeros(batch, n, dtype=DTYPE),
        )
        if order >= 2:
            jet.comp_hessians = torch.zeros(batch, m, n, n, dtype=DTYPE)
            jet.hess_div = torch.zeros(batch, n, n, dtype=DTYPE)
        return jet


class OUReference:
    """Closed-form Gaussian path of the quadratic Langevin problem started from N(0, delta I)."""

    def __init__(self, spec: ProblemSpec, delta: float = 1.0) -> None:
        if spec.kind != "langevin" or spec.potential != "quadratic":
            raise UnsupportedError("OU reference needs quadratic langevin", code="no_reference")
        self.spec = spec
        self.delta = delta
        self.drift_matrix = -mobility(spec)

    def variance(self, t: float) -> float:
        return ou_covariance(t, self.delta, self.spec.eps)

    def at(self, t: float) -> GaussianRef:
        return GaussianRef.isotropic(self.spec.dim, self.variance(t))

    def velocity(self, t: float, y: torch.Tensor) -> torch.Tensor:
        return ou_true_field(t, y, self.delta, self.spec.eps, self.spec.c)

    def baseline(self) -> LinearBaseline:
        eye = torch.eye(self.spec.dim, dtype=DTYPE)
        return LinearBaseline(lambda t: self.drift_matrix + self.spec.eps / self.variance(t) * eye, name="analytic:ou")


class ULDGaussianReference:
    """Gaussian path of quadratic underdamped Langevin; covariance from the exact linear ODE solution."""

    def __init__(self, spec: ProblemSpec, sigma0: Sequence[float] = (2.0, 0.0, 2.0)) -> None:
        if spec.kind != "uld" or spec.potential != "quadratic":
            raise UnsupportedError("ULD reference needs quadratic uld", code="no_reference")
        self.spec = spec
        self.sigma0 = tuple(float(v) for v in sigma0)

    def entries(self, t: float) -> np.ndarray:
        return uld_covariance_exact(self.sigma0, self.spec.gamma, self.spec.beta, t)

    def at(self, t: float) -> GaussianRef:
        return GaussianRef(torch.zeros(self.spec.state_dim, dtype=DTYPE), uld_state_covariance(self.entries(t), self.spec.dim))

    def _matrix(self, t: float) -> torch.Tensor:
        d = self.spec.dim
        eye = torch.eye(d, dtype=DTYPE)
        base = torch.cat([-eye, -self.spec.gamma * eye], dim=1)
        return base + self.spec.noise * self.at(t).precision[d:, :]

    def velocity(self, t: float, y: torch.Tensor) -> torch.Tensor:
        yb, single = as_batch(y)
        out = yb @ self._matrix(t).T
        return out[0] if single else out

    def baseline(self) -> LinearBaseline:
        return LinearBaseline(self._matrix, name="analytic:uld")


def gaussian_reference(spec: ProblemSpec, init_var: float):
    if spec.kind == "langevin" and spec.potential == "quadratic":
        return OUReference(spec, delta=init_var)
    if spec.kind == "uld" and spec.potential == "quadratic":
        return ULDGaussianReference(spec, sigma0=(init_var, 0.0, init_var))
    raise UnsupportedError(f"no closed-form reference for {spec.kind}/{spec.potential}", code="no_reference")


def stationary_gaussian(spec: ProblemSpec) -> GaussianRef:
    if spec.kind == "langevin" and spec.potential == "quadratic":
        return GaussianRef.isotropic(spec.dim, spec.eps)
    if spec.kind == "uld" and spec.potential == "quadratic":
        return GaussianRef.isotropic(spec.state_dim, 1.0 / spec.beta)
    raise UnsupportedError("stationary density is not Gaussian", code="no_reference")


# ---- stochastic reference -----------------------------------------------------


@dataclass
class Ensemble:
    times: np.ndarray
    steps: np.ndarray
    x: torch.Tensor  # (records, paths, dim)


EM_NOISE_CHUNK = 64


def _path_noise(streams: list[np.random.Generator], n_draws: int, dim: int) -> torch.Tensor:
    """(n_draws, paths, dim) normals; path i reads only its own stream."""
    return torch.from_numpy(np.stack([rng.standard_normal((n_draws, dim)) for rng in streams], axis=1))


def euler_maruyama(
    spec: ProblemSpec,
    x0,
    dt: float,
    n_steps: int,
    seed: int,
    record_every: int = 1,
    t0: float = 0.0,
) -> Ensemble:
    """Each path draws from substream(seed, "em-paths", i), so a path does not depend on the batch it runs in."""
    x, _ = as_batch(x0)
    x = x.clone()
    mask = diffusive_mask(spec)
    scale = noise_scale(spec, dt)
    record_every = max(1, int(record_every))
    streams = [substream(seed, "em-paths", i) for i in range(x.shape[0])]
    times, steps, frames = [t0], [0], [x.clone()]
    noise = None
    for j in range(n_steps):
        if j % EM_NOISE_CHUNK == 0:
            noise = _path_noise(streams, min(EM_NOISE_CHUNK, n_steps - j), x.shape[1])
        x = x + dt * drift(spec, x) + scale * mask * noise[j % EM_NOISE_CHUNK]
        bad = ~torch.isfinite(x).all(-1) | (x.abs() > DIVERGENCE_LIMIT).any(-1)
        if bool(bad.any()):
            raise FlowDivergenceError("euler-maruyama path diverged", step=j + 1, particle=int(bad.nonzero()[0, 0]))
        if (j + 1) % record_every == 0 or j + 1 == n_steps:
            times.append(t0 + (j + 1) * dt)
            steps.append(j + 1)
            frames.append(x.clone())
    return Ensemble(times=np.asarray(times), steps=np.asarray(steps), x=torch.stack(frames))


# ---- partition functions ------------------------------------------------------


def _midpoint_sum(log_integrand: Callable[[np.ndarray], np.ndarray], dim: int, box: float, resolution: int) -> tuple[float, float]:
    h = 2.0 * box / resolution
    axis = -box + h * (np.arange(resolution) + 0.5)
    grid = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    vals = np.exp(log_integrand(grid))
    on_edge = np.zeros(grid.shape[0], dtype=bool)
    for k in range(dim):
        on_edge |= (grid[:, k] == axis[0]) | (grid[:, k] == axis[-1])
    edge_ratio = float(vals[on_edge].max() / max(vals.max(), np.finfo(float).tiny))
    return float(vals.sum() * h**dim), edge_ratio


def riemann_partition(
    energy: Callable[[np.ndarray], np.ndarray],
    eps: float,
    dim: int,
    box: float = 4.0,
    resolution: int = 64,
    rtol: float = 1e-4,
    max_resolution: int = 1024,
) -> float:
    """Midpoint-rule estimate of the integral of exp(-energy/eps) over a box, refined by doubling."""
    if dim > 3:
        raise UnsupportedError("quadrature limited to dim <= 3", code="quadrature_dim")
    max_points = 2**24

    def log_integrand(pts: np.ndarray) -> np.ndarray:
        return -energy(pts) / eps

    while True:
        _, edge = _midpoint_sum(log_integrand, dim, box, min(resolution, 64))
        if edge <= 1e-8:
            break
        box *= 1.5
        if box > 1e3:
            raise AccuracyError("integrand does not decay inside the quadrature box")
        logger.debug("extending quadrature box to %.3f", box)
    res = resolution
    prev, _ = _midpoint_sum(log_integrand, dim, box, res)
    while res * 2 <= max_resolution and (res * 2) ** dim <= max_points:
        res *= 2
        cur, _ = _midpoint_sum(log_integrand, dim, box, res)
        if abs(cur - prev) <= rtol * abs(cur):
            return cur
        prev = cur
    raise AccuracyError(f"riemann sum not converged at resolution {res}")


def partition_reference(spec: ProblemSpec) -> float:
    """Normalizing constant of the stationary density (closed form when quadratic, quadrature otherwise)."""
    if spec.kind == "langevin" and spec.potential == "quadratic":
        return (2.0 * math.pi * spec.eps) ** (spec.dim / 2.0)
    if spec.kind == "uld" and spec.potential == "quadratic":
        return (2.0 * math.pi / spec.beta) ** spec.dim
    if spec.kind not in ("langevin", "uld"):
        raise UnsupportedError(f"{spec.kind} has no stationary density", code="no_stationary_density")

    def energy(pts: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return stationary_energy(spec, torch.from_numpy(pts)).numpy()

    return riemann_partition(energy, 1.0, spec.state_dim)


