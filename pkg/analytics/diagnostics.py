from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy.spatial.distance import cdist

from fpflow.errors import InputError, UnsupportedError
from fpflow.flow import ScoreFlowState, TimeGrid, Trajectory
from fpflow.problems import stationary_energy, stationary_log_density_grad
from fpflow.reference import GaussianRef, gaussian_kl, stationary_gaussian
from fpflow.runtime.seeding import substream
from fpflow.settings import ProblemSpec


@dataclass
class EnergyTrace:
    times: np.ndarray
    free_energy: np.ndarray
    dissipation: np.ndarray
    reference_energy: Optional[np.ndarray] = None
    reference_dissipation: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.times, "free_energy": self.free_energy, "dissipation": self.dissipation})
        if self.reference_energy is not None:
            frame["reference_energy"] = self.reference_energy
            frame["reference_dissipation"] = self.reference_dissipation
        return frame


@dataclass(frozen=True)
class ErrorMetrics:
    err_f: float
    err_rho: float
    err_s: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"err_f": self.err_f, "err_rho": self.err_rho, "err_s": self.err_s}])


def _dissipation_weight(spec: ProblemSpec) -> tuple[float, int]:
    if spec.kind == "langevin":
        return spec.eps, 0
    if spec.kind == "uld":
        return spec.gamma / spec.beta, spec.dim
    raise UnsupportedError(f"{spec.kind} has no closed-form stationary density", code="no_stationary_density")


def free_energy(state: ScoreFlowState, spec: ProblemSpec) -> float:
    """
    Monte-Carlo free energy of the particle cloud.

    Langevin: mean of l + V(x)/eps. Underdamped Langevin: mean of l + beta*H(x, v).
    With exact log-densities of samples drawn from the stationary density the
    estimate equals -log Z, since the relative entropy term vanishes.
    """
    if state.l is None:
        raise InputError("snapshot carries no log-density", code="missing_log_density")
    with torch.no_grad():
        return float((state.l + stationary_energy(spec, state.x)).mean())


def dissipation(state: ScoreFlowState, spec: ProblemSpec) -> float:
    """
    Monte-Carlo dissipation estimate of the free energy.

    Langevin: -eps * mean |s - grad log pi|^2. Underdamped Langevin uses only the
    velocity block of the score difference, weighted by gamma/beta. The value is
    a negative quadratic form and therefore never positive.
    """
    weight, start = _dissipation_weight(spec)
    with torch.no_grad():
        diff = (state.s - stationary_log_density_grad(spec, state.x))[:, start:]
        return float(-weight * (diff * diff).sum(-1).mean())


def estimate_Z(terminal_free_energy: float) -> float:
    """Z ~ exp(-D(rho_T)); only meaningful once rho_T is close to the stationary density."""
    return math.exp(-terminal_free_energy)


def gaussian_energy_reference(rho: GaussianRef, spec: ProblemSpec) -> tuple[float, float]:
    """
    Exact free energy and dissipation when both rho and the stationary density are Gaussian.

    Returns (KL(rho || pi) - log Z, -w * E|P (score_rho - score_pi)|^2), where P keeps
    the velocity block for underdamped Langevin and w is the matching noise weight.
    """
    pi = stationary_gaussian(spec)
    log_z = 0.5 * float(pi.logdet) + 0.5 * pi.dim * math.log(2.0 * math.pi)
    energy = gaussian_kl(rho, pi) - log_z
    weight, start = _dissipation_weight(spec)
    mat = pi.precision - rho.precision
    shift = rho.precision @ rho.mean - pi.precision @ pi.mean
    proj_mat = mat[start:]
    mean_diff = proj_mat @ rho.mean + shift[start:]
    second = torch.trace(proj_mat @ rho.cov @ proj_mat.T) + mean_diff @ mean_diff
    return energy, float(-weight * second)


def energy_trace(traj: Trajectory, spec: ProblemSpec, reference=None, steps: Optional[Sequence[int]] = None) -> EnergyTrace:
    """
    Free energy and dissipation along a recorded rollout.

    Parameters:
    - `traj`: rollout with l and s recorded at every grid point;
    - `spec`: Langevin or underdamped Langevin problem;
    - `reference`: optional Gaussian path exposing `at(t)`; adds the exact curves;
    - `steps`: subset of grid indices, all by default.
    """
    steps = list(range(traj.n_records)) if steps is None else list(steps)
    energies, dissipations, ref_e, ref_d = [], [], [], []
    for j in steps:
        snap = traj.snapshot(j)
        energies.append(free_energy(snap, spec))
        dissipations.append(dissipation(snap, spec))
        if reference is not None:
            e, d = gaussian_energy_reference(reference.at(float(traj.times[j])), spec)
            ref_e.append(e)
            ref_d.append(d)
    return EnergyTrace(
        times=np.asarray(traj.times)[steps],
        free_energy=np.asarray(energies),
        dissipation=np.asarray(dissipations),
        reference_energy=np.asarray(ref_e) if reference is not None else None,
        reference_dissipation=np.asarray(ref_d) if reference is not None else None,
    )


def error_metrics(fields: Sequence, traj: Trajectory, reference, grid: TimeGrid, spec: ProblemSpec) -> ErrorMetrics:
    """
    Trajectory-averaged absolute errors against a closed-form reference.

    - `err_f`: |f_theta - f_ref| on the controlled coordinates, averaged over j = 0..K;
    - `err_rho`: |L - rho_ref|, averaged over j = 1..K;
    - `err_s`: |s - score_ref|, averaged over j = 1..K.

    The density and score match the reference exactly at t = 0, so those two start at j = 1.
    """
    if reference is None:
        raise UnsupportedError("no closed-form reference for this problem", code="no_reference")
    off = spec.control_offset
    n_records = traj.n_records
    f_err, rho_err, s_err = [], [], []
    with torch.no_grad():
        for j in range(n_records):
            t = float(traj.times[j])
            x = traj.x[j]
            if j < traj.velocity.shape[0]:
                f = traj.velocity[j][:, off:]
            else:
                f = fields[min(j // grid.n_steps, grid.n_stages - 1)](t, x)
            f_err.append(float(torch.linalg.norm(f - reference.velocity(t, x), dim=-1).mean()))
            if j == 0:
                continue
            ref = reference.at(t)
            rho_err.append(float((traj.L[j] - ref.density(x)).abs().mean()))
            s_err.append(float(torch.linalg.norm(traj.s[j] - ref.score(x), dim=-1).mean()))
    return ErrorMetrics(
        err_f=float(np.mean(f_err)),
        err_rho=float(np.mean(rho_err)) if rho_err else 0.0,
        err_s=float(np.mean(s_err)) if s_err else 0.0,
    )


def _as_array(samples) -> np.ndarray:
    if isinstance(samples, torch.Tensor):
        samples = samples.detach().numpy()
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def energy_distance(a, b, max_samples: Optional[int] = None, seed: int = 0) -> float:
    """
    Energy distance 2E|a - b| - E|a - a'| - E|b - b'| between two ensembles.

    Uses full pairwise Euclidean distances (V-statistic), so identical ensembles give
    exactly 0. Ensembles larger than `max_samples` are subsampled with a seeded stream.
    """
    xa, xb = _as_array(a), _as_array(b)
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        raise InputError("empty ensemble", code="empty_ensemble")
    if xa.shape[1] != xb.shape[1]:
        raise InputError("ensembles differ in dimension", code="dimension_mismatch")
    if max_samples is not None:
        rng = substream(seed, "energy-distance")
        if xa.shape[0] > max_samples:
            xa = xa[rng.choice(xa.shape[0], max_samples, replace=False)]
        if xb.shape[0] > max_samples:
            xb = xb[rng.choice(xb.shape[0], max_samples, replace=False)]
    return float(2.0 * cdist(xa, xb).mean() - cdist(xa, xa).mean() - cdist(xb, xb).mean())


def permutation_threshold(a, b, q: float = 0.99, n_permutations: int = 200, seed: int = 0) -> float:
    """q-quantile of the energy distance under random relabelling of the pooled ensembles."""
    xa, xb = _as_array(a), _as_array(b)
    pooled = np.concatenate([xa, xb], axis=0)
    dist = cdist(pooled, pooled)
    n_a = xa.shape[0]
    rng = substream(seed, "permutation")
    stats = np.empty(n_permutations)
    for k in range(n_permutations):
        perm = rng.permutation(pooled.shape[0])
        ia, ib = perm[:n_a], perm[n_a:]
        stats[k] = 2.0 * dist[np.ix_(ia, ib)].mean() - dist[np.ix_(ia, ia)].mean() - dist[np.ix_(ib, ib)].mean()
    return float(np.quantile(stats, q))
