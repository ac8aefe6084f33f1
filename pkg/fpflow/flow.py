from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch

from fpflow.errors import FlowDivergenceError, InputError
from fpflow.jets import DTYPE, FieldJet
from fpflow.reference import DIVERGENCE_LIMIT, GaussianRef

SCHEMES = ("euler", "symplectic")


@dataclass
class ScoreFlowState:
    """Batch of particles with density value L, log-density l, score s and optional log-density Hessian H."""

    x: torch.Tensor
    L: torch.Tensor
    l: torch.Tensor
    s: torch.Tensor
    H: Optional[torch.Tensor] = None
    t: float = 0.0

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def detach(self) -> "ScoreFlowState":
        return ScoreFlowState(
            x=self.x.detach(),
            L=self.L.detach(),
            l=self.l.detach(),
            s=self.s.detach(),
            H=None if self.H is None else self.H.detach(),
            t=self.t,
        )

    def select(self, idx) -> "ScoreFlowState":
        return ScoreFlowState(
            x=self.x[idx],
            L=self.L[idx],
            l=self.l[idx],
            s=self.s[idx],
            H=None if self.H is None else self.H[idx],
            t=self.t,
        )


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_steps: int
    n_stages: int = 1
    t0: float = 0.0

    @property
    def horizon(self) -> float:
        return self.n_stages * self.n_steps * self.dt

    @property
    def total_steps(self) -> int:
        return self.n_stages * self.n_steps

    @property
    def stage_length(self) -> float:
        return self.n_steps * self.dt

    def time(self, j: int) -> float:
        return self.t0 + j * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.total_steps + 1)

    def stage_grid(self, m: int) -> "TimeGrid":
        """Single-stage grid for stage m (zero-based)."""
        return TimeGrid(self.dt, self.n_steps, 1, self.time(m * self.n_steps))

    def nearest_steps(self, times: Sequence[float]) -> list[int]:
        steps = []
        for t in times:
            j = int(round((float(t) - self.t0) / self.dt))
            j = min(max(j, 0), self.total_steps)
            if j not in steps:
                steps.append(j)
        return steps


@dataclass
class Trajectory:
    times: np.ndarray
    x: torch.Tensor  # (K+1, B, n)
    L: torch.Tensor  # (K+1, B)
    l: torch.Tensor
    s: torch.Tensor
    velocity: torch.Tensor  # (K, B, n) full velocity at pre-step points
    H: Optional[torch.Tensor] = None

    @property
    def n_records(self) -> int:
        return self.x.shape[0]

    def snapshot(self, j: int) -> ScoreFlowState:
        return ScoreFlowState(
            x=self.x[j],
            L=self.L[j],
            l=self.l[j],
            s=self.s[j],
            H=None if self.H is None else self.H[j],
            t=float(self.times[j]),
        )

    def final(self) -> ScoreFlowState:
        return self.snapshot(self.n_records - 1)


def initial_scores(rho0: GaussianRef, samples: torch.Tensor) -> tuple[torch.Tensor, ...]:
    if samples.shape[-1] != rho0.dim:
        raise InputError("samples do not match the initial density dimension", code="dimension_mismatch")
    l = rho0.log_density(samples)
    hess = rho0.hessian().expand(samples.shape[0], rho0.dim, rho0.dim).clone()
    return torch.exp(l), l, rho0.score(samples), hess


def initial_state(rho0: GaussianRef, samples: torch.Tensor, with_hessian: bool = False, t0: float = 0.0) -> ScoreFlowState:
    L, l, s, H = initial_scores(rho0, samples)
    return ScoreFlowState(x=samples.to(DTYPE), L=L, l=l, s=s, H=H if with_hessian else None, t=t0)


def check_state(state: ScoreFlowState, step: int) -> None:
    with torch.no_grad():
        x = state.x.detach()
        finite = torch.isfinite(x).all(-1) & torch.isfinite(state.l.detach()) & torch.isfinite(state.s.detach()).all(-1)
        bad = ~finite | (x.abs() > DIVERGENCE_LIMIT).any(-1)
        if bool(bad.any()):
            particle = int(bad.nonzero()[0, 0])
            raise FlowDivergenceError("score flow diverged", step=step, particle=particle)


def step_hessian(state: ScoreFlowState, jet: FieldJet, dt: float) -> torch.Tensor:
    if state.H is None or jet.comp_hessians is None:
        raise InputError("hessian propagation needs H and an order-2 jet", code="hessian_unavailable")
    H, J = state.H, jet.jacobian
    rate = torch.einsum("bi,bijk->bjk", state.s, jet.comp_hessians) + jet.hess_div + H @ J + J.transpose(1, 2) @ H
    out = H - dt * rate
    return 0.5 * (out + out.transpose(1, 2))


def advance(state: ScoreFlowState, jet: FieldJet, dt: float, scheme: str = "euler", t_next: Optional[float] = None) -> ScoreFlowState:
    """One forward-Euler step of the score flow; all derivatives come from the pre-step jet."""
    if scheme not in SCHEMES:
        raise InputError(f"unknown scheme {scheme!r}", code="bad_scheme")
    f = jet.value
    if scheme == "symplectic":
        d = state.dim // 2
        v_next = state.x[:, d:] + dt * f[:, d:]
        x_next = torch.cat([state.x[:, :d] + dt * v_next, v_next], dim=1)
    else:
        x_next = state.x + dt * f
    div = jet.divergence
    s_next = state.s - dt * (torch.einsum("bij,bi->bj", jet.jacobian, state.s) + jet.grad_div)
    H_next = step_hessian(state, jet, dt) if state.H is not None else None
    return ScoreFlowState(
        x=x_next,
        L=state.L - dt * div * state.L,
        l=state.l - dt * div,
        s=s_next,
        H=H_next,
        t=state.t + dt if t_next is None else t_next,
    )


def _jet_order(state: ScoreFlowState) -> int:
    return 2 if state.H is not None else 1


def step_euler(state: ScoreFlowState, field, dt: float, step_index: int = 0) -> ScoreFlowState:
    jet = field.full_jet(state.t, state.x, _jet_order(state))
    out = advance(state, jet, dt, "euler")
    check_state(out, step_index + 1)
    return out


def step_uld(state: ScoreFlowState, field_v, dt: float, scheme: str = "euler", step_index: int = 0) -> ScoreFlowState:
    if not field_v.second_order or state.dim != 2 * field_v.out_dim:
        raise InputError("step_uld needs a velocity field over (x, v)", code="dimension_mismatch")
    jet = field_v.full_jet(state.t, state.x, _jet_order(state))
    out = advance(state, jet, dt, scheme)
    check_state(out, step_index + 1)
    return out


def rollout(
    initial: ScoreFlowState,
    fields: Sequence,
    grid: TimeGrid,
    scheme: str = "euler",
) -> Trajectory:
    """Advance every particle through all stages; fields[m] drives stage m. Runs without autograd."""
    if initial.size == 0:
        raise InputError("empty particle batch", code="empty_batch")
    if len(fields) != grid.n_stages:
        raise InputError(f"{len(fields)} fields for {grid.n_stages} stages", code="stage_count_mismatch")
    state = replace(initial, t=grid.t0)
    xs, Ls, ls, ss, Hs, vel = [state.x], [state.L], [state.l], [state.s], [state.H], []
    with torch.no_grad():
        for k in range(grid.total_steps):
            field = fields[k // grid.n_steps]
            jet = field.full_jet(state.t, state.x, _jet_order(state))
            vel.append(jet.value)
            state = advance(state, jet, grid.dt, scheme, t_next=grid.time(k + 1))
            check_state(state, k + 1)
            xs.append(state.x)
            Ls.append(state.L)
            ls.append(state.l)
            ss.append(state.s)
            Hs.append(state.H)
    n = initial.dim
    return Trajectory(
        times=grid.times(),
        x=torch.stack(xs),
        L=torch.stack(Ls),
        l=torch.stack(ls),
        s=torch.stack(ss),
        velocity=torch.stack(vel) if vel else torch.zeros(0, initial.size, n, dtype=DTYPE),
        H=None if initial.H is None else torch.stack(Hs),
    )


def propagate(initial: ScoreFlowState, fields: Sequence, grid: TimeGrid, scheme: str = "euler") -> ScoreFlowState:
    """Like rollout but keeps only the terminal state."""
    if len(fields) != grid.n_stages:
        raise InputError(f"{len(fields)} fields for {grid.n_stages} stages", code="stage_count_mismatch")
    state = replace(initial, t=grid.t0)
    with torch.no_grad():
        for k in range(grid.total_steps):
            field = fields[k // grid.n_steps]
            jet = field.full_jet(state.t, state.x, _jet_order(state))
            state = advance(state, jet, grid.dt, scheme, t_next=grid.time(k + 1))
            check_state(state, k + 1)
    return state


def trajectory_frame(traj: Trajectory, steps: Optional[Sequence[int]] = None, max_particles: Optional[int] = None) -> pd.DataFrame:
    """Long-format export: particle, step, t, x_0.., l, s_0.."""
    steps = list(range(traj.n_records)) if steps is None else list(steps)
    n_particles = traj.x.shape[1] if max_particles is None else min(max_particles, traj.x.shape[1])
    dim = traj.x.shape[2]
    frames = []
    for j in steps:
        block = {
            "particle": np.arange(n_particles),
            "step": np.full(n_particles, j),
            "t": np.full(n_particles, traj.times[j]),
        }
        x = traj.x[j, :n_particles].numpy()
        s = traj.s[j, :n_particles].numpy()
        for k in range(dim):
            block[f"x_{k}"] = x[:, k]
        block["l"] = traj.l[j, :n_particles].numpy()
        for k in range(dim):
            block[f"s_{k}"] = s[:, k]
        frames.append(pd.DataFrame(block))
    return pd.concat(frames, ignore_index=True)
