from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

DTYPE = torch.float64


@dataclass
class FieldJet:
    """Batched spatial derivatives of a velocity field at (t, y).

    Shapes for a batch of B points, field output m, input n:
    value (B, m), jacobian (B, m, n), divergence (B,), grad_div (B, n),
    comp_hessians (B, m, n, n), hess_div (B, n, n).

    When m < n the field drives the trailing m coordinates (velocities of a
    second-order system) and ``divergence`` is sum_i d f_i / d y_{n-m+i}.
    """

    value: torch.Tensor
    jacobian: torch.Tensor
    divergence: torch.Tensor
    grad_div: torch.Tensor
    comp_hessians: Optional[torch.Tensor] = None
    hess_div: Optional[torch.Tensor] = None

    @property
    def order(self) -> int:
        return 2 if self.comp_hessians is not None else 1

    def __add__(self, other: "FieldJet") -> "FieldJet":
        comp = hess = None
        if self.comp_hessians is not None and other.comp_hessians is not None:
            comp = self.comp_hessians + other.comp_hessians
            hess = self.hess_div + other.hess_div
        return FieldJet(
            value=self.value + other.value,
            jacobian=self.jacobian + other.jacobian,
            divergence=self.divergence + other.divergence,
            grad_div=self.grad_div + other.grad_div,
            comp_hessians=comp,
            hess_div=hess,
        )

    def lifted(self, y: torch.Tensor) -> "FieldJet":
        """Jet of the full (x, v) -> (v, f_v) velocity; identity when the field drives every coordinate."""
        batch, m, n = self.jacobian.shape
        if m == n:
            return self
        d = n - m
        if d != m:
            raise ValueError("lift_requires_equal_position_and_velocity_dims")
        top = torch.zeros(batch, d, n, dtype=self.jacobian.dtype, device=self.jacobian.device)
        top[:, :, d:] = torch.eye(d, dtype=self.jacobian.dtype, device=self.jacobian.device)
        comp = None
        if self.comp_hessians is not None:
            zeros = torch.zeros(batch, d, n, n, dtype=self.comp_hessians.dtype, device=self.comp_hessians.device)
            comp = torch.cat([zeros, self.comp_hessians], dim=1)
        return FieldJet(
            value=torch.cat([y[:, d:], self.value], dim=1),
            jacobian=torch.cat([top, self.jacobian], dim=1),
            divergence=self.divergence,
            grad_div=self.grad_div,
            comp_hessians=comp,
            hess_div=self.hess_div,
        )


def zero_jet(batch: int, m: int, n: int, order: int, like: Optional[torch.Tensor] = None) -> FieldJet:
    kw = {"dtype": DTYPE if like is None else like.dtype}
    if like is not None:
        kw["device"] = like.device
    comp = hess = None
    if order >= 2:
        comp = torch.zeros(batch, m, n, n, **kw)
        hess = torch.zeros(batch, n, n, **kw)
    return FieldJet(
        value=torch.zeros(batch, m, **kw),
        jacobian=torch.zeros(batch, m, n, **kw),
        divergence=torch.zeros(batch, **kw),
        grad_div=torch.zeros(batch, n, **kw),
        comp_hessians=comp,
        hess_div=hess,
    )


def controlled_trace(jacobian: torch.Tensor) -> torch.Tensor:
    m, n = jacobian.shape[-2:]
    return jacobian[..., :, n - m :].diagonal(dim1=-2, dim2=-1).sum(-1)


def as_batch(y) -> tuple[torch.Tensor, bool]:
    y = torch.as_tensor(y, dtype=DTYPE)
    if y.ndim == 1:
        return y.unsqueeze(0), True
    return y, False
