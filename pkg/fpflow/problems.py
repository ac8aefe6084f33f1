from __future__ import annotations

import math
from typing import Optional

import torch

from fpflow.errors import InputError, UnsupportedError
from fpflow.jets import DTYPE, FieldJet, as_batch, controlled_trace
from fpflow.settings import KINDS, POTENTIALS, ProblemSpec


def check_spec(spec: ProblemSpec) -> ProblemSpec:
    if spec.kind not in KINDS:
        raise InputError(f"unknown kind {spec.kind!r}", code="unknown_problem_kind")
    if spec.dim < 1:
        raise InputError("dim must be positive", code="bad_dimension")
    if spec.kind in ("langevin", "uld") and spec.potential not in POTENTIALS:
        raise InputError(f"unknown potential {spec.potential!r}", code="unknown_potential")
    if spec.kind == "langevin" and spec.c != 0.0 and spec.dim % 2:
        raise InputError("skew drift needs an even dimension", code="odd_skew_dimension")
    if spec.kind in ("lorenz", "atan_lorenz") and spec.dim != 3:
        raise InputError("lorenz systems are three dimensional", code="bad_dimension")
    if spec.noise <= 0.0:
        raise InputError("diffusion constant must be positive", code="bad_diffusion")
    if spec.atan_variant not in ("verbatim", "symmetric"):
        raise InputError(f"unknown atan variant {spec.atan_variant!r}", code="bad_atan_variant")
    return spec


def skew_matrix(n: int) -> torch.Tensor:
    if n % 2:
        raise InputError("skew matrix needs an even dimension", code="odd_skew_dimension")
    half = n // 2
    eye = torch.eye(half, dtype=DTYPE)
    out = torch.zeros(n, n, dtype=DTYPE)
    out[:half, half:] = eye
    out[half:, :half] = -eye
    return out


def mobility(spec: ProblemSpec) -> torch.Tensor:
    """I + c J_d for the Langevin drift -(I + c J_d) grad V."""
    eye = torch.eye(spec.dim, dtype=DTYPE)
    if spec.c == 0.0:
        return eye
    return eye + spec.c * skew_matrix(spec.dim)


def _check_width(y: torch.Tensor, width: int) -> None:
    if y.shape[-1] != width:
        raise InputError(f"expected dimension {width}, got {y.shape[-1]}", code="dimension_mismatch")


def _require_potential(spec: ProblemSpec) -> None:
    if spec.kind not in ("langevin", "uld"):
        raise InputError(f"{spec.kind} has no potential", code="kind_mismatch")


# ---- potentials -------------------------------------------------------------


def _centers(d: int) -> torch.Tensor:
    return torch.ones(d, dtype=DTYPE)


def _potential_value(spec: ProblemSpec, x: torch.Tensor) -> torch.Tensor:
    if spec.potential == "quadratic":
        return 0.5 * (x * x).sum(-1)
    c = _centers(x.shape[-1])
    return 0.25 * ((x - c) ** 2).sum(-1) * ((x + c) ** 2).sum(-1)


def _potential_grad(spec: ProblemSpec, x: torch.Tensor) -> torch.Tensor:
    if spec.potential == "quadratic":
        return x.clone()
    c = _centers(x.shape[-1])
    sq = (x * x).sum(-1, keepdim=True) + (c * c).sum()
    return x * sq - 2.0 * c * (x @ c).unsqueeze(-1)


def _potential_hessian(spec: ProblemSpec, x: torch.Tensor) -> torch.Tensor:
    batch, d = x.shape
    eye = torch.eye(d, dtype=DTYPE)
    if spec.potential == "quadratic":
        return eye.expand(batch, d, d).clone()
    c = _centers(d)
    sq = (x * x).sum(-1) + (c * c).sum()
    return sq[:, None, None] * eye + 2.0 * x[:, :, None] * x[:, None, :] - 2.0 * torch.outer(c, c)


def _potential_third(spec: ProblemSpec, x: torch.Tensor) -> torch.Tensor:
    batch, d = x.shape
    if spec.potential == "quadratic":
        return torch.zeros(batch, d, d, d, dtype=DTYPE)
    eye = torch.eye(d, dtype=DTYPE)
    # T_ijk = 2 (delta_ij x_k + delta_ik x_j + delta_jk x_i)
    return 2.0 * (
        eye[None, :, :, None] * x[:, None, None, :]
        + eye[None, :, None, :] * x[:, None, :, None]
        + eye[None, None, :, :] * x[:, :, None, None]
    )


def _laplacian_grad(spec: ProblemSpec, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient and Hessian of the Laplacian of V."""
    batch, d = x.shape
    if spec.potential == "quadratic":
        return torch.zeros(batch, d, dtype=DTYPE), torch.zeros(batch, d, d, dtype=DTYPE)
    k = 2.0 * d + 4.0
    eye = torch.eye(d, dtype=DTYPE)
    return k * x, (k * eye).expand(batch, d, d).clone()


def potential(spec: ProblemSpec, x) -> torch.Tensor:
    _require_potential(spec)
    xb, single = as_batch(x)
    _check_width(xb, spec.dim)
    out = _potential_value(spec, xb)
    return out[0] if single else out


def grad_potential(spec: ProblemSpec, x) -> torch.Tensor:
    _require_potential(spec)
    xb, single = as_batch(x)
    _check_width(xb, spec.dim)
    out = _potential_grad(spec, xb)
    return out[0] if single else out


def hamiltonian(spec: ProblemSpec, x, v) -> torch.Tensor:
    if spec.kind != "uld":
        raise InputError("hamiltonian is defined for uld", code="kind_mismatch")
    xb, single = as_batch(x)
    vb, _ = as_batch(v)
    _check_width(xb, spec.dim)
    _check_width(vb, spec.dim)
    out = 0.5 * (vb * vb).sum(-1) + _potential_value(spec, xb)
    return out[0] if single else out


# ---- drifts -----------------------------------------------------------------


def _lorenz_inner(spec: ProblemSpec, y: torch.Tensor, verbatim_middle: bool) -> tuple[torch.Tensor, ...]:
    """Quadratic Lorenz right-hand side g with its gradients and constant Hessians."""
    batch = y.shape[0]
    x, w, z = y[:, 0], y[:, 1], y[:, 2]
    sig, rho, bet, s = spec.sigma_l, spec.rho_l, spec.beta_l, spec.s
    zeros = torch.zeros_like(x)
    ones = torch.ones_like(x)
    hess = torch.zeros(3, 3, 3, dtype=DTYPE)
    g0 = sig * (w - x)
    grad0 = torch.stack([-sig * ones, sig * ones, zeros], dim=-1)
    if verbatim_middle:
        k = 50.0 * s
        g1 = x * (rho - k * z) - k * w
        grad1 = torch.stack([rho - k * z, -k * ones, -k * x], dim=-1)
        hess[1, 0, 2] = hess[1, 2, 0] = -k
    else:
        g1 = x * (rho - z / s) - w
        grad1 = torch.stack([rho - z / s, -ones, -x / s], dim=-1)
        hess[1, 0, 2] = hess[1, 2, 0] = -1.0 / s
    g2 = x * w / s - bet * z
    grad2 = torch.stack([w / s, x / s, -bet * ones], dim=-1)
    hess[2, 0, 1] = hess[2, 1, 0] = 1.0 / s
    g = torch.stack([g0, g1, g2], dim=-1)
    grads = torch.stack([grad0, grad1, grad2], dim=1)
    return g, grads, hess.expand(batch, 3, 3, 3)


def _composed_rows(
    g: torch.Tensor,
    grads: torch.Tensor,
    hess: torch.Tensor,
    outer: Optional[tuple[torch.Tensor, ...]],
    order: int,
) -> FieldJet:
    """Jet of rows f_i = phi_i(g_i) for quadratic g; outer gives (phi, phi', phi'', phi''') per row."""
    batch, n = g.shape
    if outer is None:
        value = g
        a1 = torch.ones_like(g)
        a2 = torch.zeros_like(g)
        a3 = torch.zeros_like(g)
    else:
        value, a1, a2, a3 = outer
    jac = a1[:, :, None] * grads
    comp = a2[:, :, None, None] * grads[:, :, :, None] * grads[:, :, None, :] + a1[:, :, None, None] * hess
    idx = torch.arange(n)
    grad_div = comp[:, idx, idx, :].sum(1)
    jet = FieldJet(value=value, jacobian=jac, divergence=controlled_trace(jac), grad_div=grad_div)
    if order >= 2:
        gi = grads[:, idx, idx]  # d g_i / d y_i
        h_ii = hess[:, idx, idx, :]  # row i of Hess g_i
        hess_div = (
            torch.einsum("bi,bi,biq,bir->bqr", a3, gi, grads, grads)
            + torch.einsum("bi,bir,biq->bqr", a2, h_ii, grads)
            + torch.einsum("bi,bi,biqr->bqr", a2, gi, hess)
            + torch.einsum("bi,bir,biq->bqr", a2, grads, h_ii)
        )
        jet.comp_hessians = comp
        jet.hess_div = hess_div
    return jet


def _atan_outer(g: torch.Tensor, scale: float, divisors: torch.Tensor) -> tuple[torch.Tensor, ...]:
    u = g / divisors
    q = 1.0 + u * u
    d1 = 1.0 / q
    d2 = -2.0 * u / q**2
    d3 = (6.0 * u * u - 2.0) / q**3
    return scale * torch.atan(u), scale * d1 / divisors, scale * d2 / divisors**2, scale * d3 / divisors**3


def controlled_drift_jet(spec: ProblemSpec, y: torch.Tensor, order: int = 1) -> FieldJet:
    """Analytic jet of the drift acting on the controlled coordinates (velocities for uld / van_der_pol)."""
    batch = y.shape[0]
    d = spec.dim
    if spec.kind == "langevin":
        m = mobility(spec)
        grad_v = _potential_grad(spec, y)
        jac = -torch.einsum("ij,bjk->bik", m, _potential_hessian(spec, y))
        grad_lap, hess_lap = _laplacian_grad(spec, y)
        jet = FieldJet(value=-grad_v @ m.T, jacobian=jac, divergence=controlled_trace(jac), grad_div=-grad_lap)
        if order >= 2:
            jet.comp_hessians = -torch.einsum("il,bljk->bijk", m, _potential_third(spec, y))
            jet.hess_div = -hess_lap
        return jet
    if spec.kind == "uld":
        x, v = y[:, :d], y[:, d:]
        eye = torch.eye(d, dtype=DTYPE)
        jac = torch.cat([-_potential_hessian(spec, x), (-spec.gamma * eye).expand(batch, d, d)], dim=-1)
        jet = FieldJet(
            value=-spec.gamma * v - _potential_grad(spec, x),
            jacobian=jac,
            divergence=controlled_trace(jac),
            grad_div=torch.zeros(batch, 2 * d, dtype=DTYPE),
        )
        if order >= 2:
            comp = torch.zeros(batch, d, 2 * d, 2 * d, dtype=DTYPE)
            comp[:, :, :d, :d] = -_potential_third(spec, x)
            jet.comp_hessians = comp
            jet.hess_div = torch.zeros(batch, 2 * d, 2 * d, dtype=DTYPE)
        return jet
    if spec.kind == "van_der_pol":
        mu = spec.mu_vdp
        x, v = y[:, :d], y[:, d:]
        jac = torch.cat([torch.diag_embed(-2.0 * mu * x * v), torch.diag_embed(mu * (1.0 - x * x))], dim=-1)
        jet = FieldJet(
            value=mu * (1.0 - x * x) * v,
            jacobian=jac,
            divergence=controlled_trace(jac),
            grad_div=torch.cat([-2.0 * mu * x, torch.zeros_like(v)], dim=-1),
        )
        if order >= 2:
            comp = torch.zeros(batch, d, 2 * d, 2 * d, dtype=DTYPE)
            idx = torch.arange(d)
            comp[:, idx, idx, idx] = -2.0 * mu * v
            comp[:, idx, idx, d + idx] = -2.0 * mu * x
            comp[:, idx, d + idx, idx] = -2.0 * mu * x
            hess_div = torch.zeros(batch, 2 * d, 2 * d, dtype=DTYPE)
            hess_div[:, idx, idx] = -2.0 * mu
            jet.comp_hessians = comp
            jet.hess_div = hess_div
        return jet
    if spec.kind == "lorenz":
        g, grads, hess = _lorenz_inner(spec, y, verbatim_middle=False)
        return _composed_rows(g, grads, hess, None, order)
    if spec.kind == "atan_lorenz":
        verbatim = spec.atan_variant == "verbatim"
        g, grads, hess = _lorenz_inner(spec, y, verbatim_middle=verbatim)
        k = 50.0 * spec.s
        divisors = torch.tensor([k, 1.0 if verbatim else k, k], dtype=DTYPE)
        return _composed_rows(g, grads, hess, _atan_outer(g, k, divisors), order)
    raise InputError(f"unknown kind {spec.kind!r}", code="unknown_problem_kind")


def drift(spec: ProblemSpec, y) -> torch.Tensor:
    yb, single = as_batch(y)
    _check_width(yb, spec.state_dim)
    ctrl = controlled_drift_jet(spec, yb, order=1).value
    out = torch.cat([yb[:, spec.dim :], ctrl], dim=-1) if spec.second_order else ctrl
    return out[0] if single else out


def stationary_log_density_grad(spec: ProblemSpec, y) -> torch.Tensor:
    yb, single = as_batch(y)
    _check_width(yb, spec.state_dim)
    if spec.kind == "langevin":
        out = -_potential_grad(spec, yb) / spec.eps
    elif spec.kind == "uld":
        d = spec.dim
        out = -spec.beta * torch.cat([_potential_grad(spec, yb[:, :d]), yb[:, d:]], dim=-1)
    else:
        raise UnsupportedError(f"{spec.kind} has no closed-form stationary density", code="no_stationary_density")
    return out[0] if single else out


def stationary_energy(spec: ProblemSpec, y: torch.Tensor) -> torch.Tensor:
    """-log of the unnormalized stationary density: V/eps (langevin) or beta*H (uld)."""
    if spec.kind == "langevin":
        return _potential_value(spec, y) / spec.eps
    if spec.kind == "uld":
        d = spec.dim
        return spec.beta * (0.5 * (y[:, d:] ** 2).sum(-1) + _potential_value(spec, y[:, :d]))
    raise UnsupportedError(f"{spec.kind} has no closed-form stationary density", code="no_stationary_density")


def diffusive_mask(spec: ProblemSpec) -> torch.Tensor:
    mask = torch.ones(spec.state_dim, dtype=DTYPE)
    if spec.second_order:
        mask[: spec.dim] = 0.0
    return mask


def noise_scale(spec: ProblemSpec, dt: float) -> float:
    return math.sqrt(2.0 * spec.noise * dt)


class ProblemDrift:
    """Controlled drift of a problem, usable as the baseline of a VelocityField."""

    def __init__(self, spec: ProblemSpec) -> None:
        self.spec = check_spec(spec)
        self.name = f"problem:{spec.kind}"

    @property
    def in_dim(self) -> int:
        return self.spec.state_dim

    @property
    def out_dim(self) -> int:
        return self.spec.control_dim

    def __call__(self, t: float, y: torch.Tensor) -> torch.Tensor:
        return controlled_drift_jet(self.spec, y, order=1).value

    def jet(self, t: float, y: torch.Tensor, order: int = 1) -> FieldJet:
        return controlled_drift_jet(self.spec, y, order=order)
