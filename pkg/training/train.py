from __future__ import annotations

import argparse
import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
from tqdm import tqdm

from fpflow.errors import FlowDivergenceError, InputError, TrainingDivergenceError
from fpflow.flow import ScoreFlowState, TimeGrid, advance, check_state, initial_state, propagate
from fpflow.problems import controlled_drift_jet
from fpflow.reference import GaussianRef
from fpflow.runtime.logger import JsonlLogger, log_event
from fpflow.runtime.models import LossRecord, StageSummary
from fpflow.runtime.seeding import substream
from fpflow.settings import ProblemSpec, TrainPlan
from training.model import VelocityField

logger = logging.getLogger(__name__)

StageHook = Callable[[int, VelocityField], None]


@dataclass
class OptimizerState:
    optimizer: torch.optim.Adam

    @classmethod
    def for_params(
        cls,
        params: Sequence[torch.Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> "OptimizerState":
        return cls(optimizer=torch.optim.Adam(list(params), lr=lr, betas=tuple(betas), eps=eps))

    @property
    def params(self) -> list[torch.Tensor]:
        return self.optimizer.param_groups[0]["params"]

    @property
    def step(self) -> int:
        state = self.optimizer.state.get(self.params[0], {})
        return int(state["step"]) if "step" in state else 0


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: OptimizerState,
    lr: Optional[float] = None,
) -> Sequence[torch.Tensor]:
    """Apply externally computed gradients through the wrapped Adam, in place."""
    if len(params) != len(grads) or len(params) != len(state.params):
        raise InputError("params, grads and optimizer state differ in length", code="shape_mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InputError("gradient shape does not match parameter", code="shape_mismatch")
        if p.grad is not g:
            p.grad = g.detach().clone()
    if lr is not None:
        for group in state.optimizer.param_groups:
            group["lr"] = lr
    state.optimizer.step()
    return params


@dataclass
class LossResult:
    loss: torch.Tensor
    final: ScoreFlowState
    step_terms: list[float]


def matching_residual(spec: ProblemSpec, velocity: torch.Tensor, state: ScoreFlowState) -> torch.Tensor:
    """f - b + noise * s on the controlled coordinates."""
    off = spec.control_offset
    b = controlled_drift_jet(spec, state.x, order=1).value
    return velocity[:, off:] - b + spec.noise * state.s[:, off:]


def flow_matching_loss(
    fields: Sequence[VelocityField],
    spec: ProblemSpec,
    batch: ScoreFlowState,
    grid: TimeGrid,
    scheme: str = "euler",
    train_stages: Optional[Sequence[int]] = None,
) -> LossResult:
    """Sum over pre-step grid points of mean |f - b + noise * s|^2 * dt, differentiable in the field parameters."""
    if len(fields) != grid.n_stages:
        raise InputError(f"{len(fields)} fields for {grid.n_stages} stages", code="stage_count_mismatch")
    stages = set(range(grid.n_stages)) if train_stages is None else set(train_stages)
    state = ScoreFlowState(batch.x, batch.L, batch.l, batch.s, None, grid.t0)
    total = torch.zeros((), dtype=batch.x.dtype)
    terms: list[float] = []
    for k in range(grid.total_steps):
        m = k // grid.n_steps
        jet = fields[m].full_jet(state.t, state.x, 1)
        if m in stages:
            term = (matching_residual(spec, jet.value, state) ** 2).sum(-1).mean() * grid.dt
            total = total + term
            terms.append(float(term.detach()))
        state = advance(state, jet, grid.dt, scheme, t_next=grid.time(k + 1))
        check_state(state, k + 1)
    return LossResult(loss=total, final=state.detach(), step_terms=terms)


def loss_gradient(
    fields: Sequence[VelocityField],
    spec: ProblemSpec,
    batch: ScoreFlowState,
    grid: TimeGrid,
    stage: int = -1,
    scheme: str = "euler",
) -> tuple[float, list[torch.Tensor]]:
    """Exact gradient of the discrete loss w.r.t. fields[stage] by reverse accumulation through the unrolled flow."""
    stage = stage % len(fields)
    params = list(fields[stage].parameters())
    result = flow_matching_loss(fields, spec, batch, grid, scheme, train_stages=[stage])
    if not result.loss.requires_grad:
        return float(result.loss), [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(result.loss, params, allow_unused=True)
    return float(result.loss.detach()), [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class TrainResult:
    fields: list[VelocityField]
    history: list[LossRecord] = field(default_factory=list)
    summaries: list[StageSummary] = field(default_factory=list)


def _fresh_start(plan: TrainPlan, rho0: GaussianRef, grid: TimeGrid, m: int, it: int) -> ScoreFlowState:
    draw = it if plan.resample else 0
    x0 = rho0.sample(substream(plan.seed, "sampling", m, draw), plan.n_x)
    return initial_state(rho0, x0, t0=grid.t0)


def _prefix_grid(grid: TimeGrid, m: int) -> TimeGrid:
    return TimeGrid(grid.dt, grid.n_steps, m, grid.t0)


def _prefix_pool(plan: TrainPlan, rho0: GaussianRef, frozen: Sequence[VelocityField], grid: TimeGrid, m: int) -> ScoreFlowState:
    size = plan.n_x * max(1, plan.cache_batches)
    x0 = rho0.sample(substream(plan.seed, "prefix-pool", m), size)
    return propagate(initial_state(rho0, x0, t0=grid.t0), frozen, _prefix_grid(grid, m), plan.scheme)


def _stage_start(
    plan: TrainPlan,
    rho0: GaussianRef,
    frozen: Sequence[VelocityField],
    grid: TimeGrid,
    m: int,
    it: int,
    pool: Optional[ScoreFlowState],
) -> ScoreFlowState:
    if pool is not None:
        idx = substream(plan.seed, "pool-draw", m, it).choice(pool.size, size=plan.n_x, replace=False)
        return pool.select(torch.from_numpy(idx))
    start = _fresh_start(plan, rho0, grid, m, it)
    if m == 0:
        return start
    return propagate(start, frozen, _prefix_grid(grid, m), plan.scheme)


def _train_stage(
    spec: ProblemSpec,
    plan: TrainPlan,
    rho0: GaussianRef,
    fields: list[VelocityField],
    grid: TimeGrid,
    m: int,
    n_iter: int,
    history: list[LossRecord],
    run_log: Optional[JsonlLogger],
) -> StageSummary:
    field_m = fields[m]
    frozen = fields[:m]
    params = list(field_m.parameters())
    opt = OptimizerState.for_params(params, plan.lr, plan.adam_betas, plan.adam_eps)
    stage_grid = grid.stage_grid(m)
    pool = None
    if plan.prefix_cache and m > 0:
        pool = _prefix_pool(plan, rho0, frozen, grid, m)
    losses: list[float] = []
    log_event(run_log, "stage_start", stage=m + 1, iterations=n_iter)
    for it in tqdm(range(n_iter), desc=f"stage {m + 1}", disable=not plan.progress):
        started = time.perf_counter()
        try:
            start = _stage_start(plan, rho0, frozen, grid, m, it, pool)
            result = flow_matching_loss([field_m], spec, start, stage_grid, plan.scheme)
        except FlowDivergenceError as exc:
            raise exc.tag(stage=m + 1, iteration=it)
        loss_value = float(result.loss.detach())
        if not math.isfinite(loss_value):
            raise TrainingDivergenceError("non-finite loss", stage=m + 1, iteration=it)
        opt.optimizer.zero_grad(set_to_none=True)
        result.loss.backward()
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in params]
        adam_step(params, grads, opt)
        wall_ms = int((time.perf_counter() - started) * 1000)
        history.append(LossRecord(iteration=it, stage=m + 1, loss=loss_value, wall_ms=wall_ms))
        losses.append(loss_value)
        if plan.log_every and (it % plan.log_every == 0 or it == n_iter - 1):
            logger.info("stage=%d iter=%d loss=%.4e", m + 1, it, loss_value)
            log_event(run_log, "iteration", stage=m + 1, iteration=it, loss=loss_value, wall_ms=wall_ms)
    summary = StageSummary(
        stage=m + 1,
        iterations=n_iter,
        final_loss=losses[-1] if losses else float("nan"),
        min_loss=min(losses) if losses else float("nan"),
        lr=plan.lr,
        seed=plan.seed,
    )
    log_event(run_log, "stage_end", **summary.as_dict())
    return summary


def _plan_grid(plan: TrainPlan) -> TimeGrid:
    return TimeGrid(plan.dt, plan.n_steps, plan.n_stages)


def train_single_stage(
    spec: ProblemSpec,
    plan: TrainPlan,
    field: VelocityField,
    rho0: GaussianRef,
    run_log: Optional[JsonlLogger] = None,
    on_stage_end: Optional[StageHook] = None,
) -> TrainResult:
    if plan.n_stages != 1:
        raise InputError("single-stage training needs n_stages = 1", code="stage_count_mismatch")
    result = TrainResult(fields=[field])
    summary = _train_stage(spec, plan, rho0, result.fields, _plan_grid(plan), 0, plan.n_iter0, result.history, run_log)
    result.summaries.append(summary)
    if on_stage_end is not None:
        on_stage_end(1, field)
    return result


def train_multi_stage(
    spec: ProblemSpec,
    plan: TrainPlan,
    field: VelocityField,
    rho0: GaussianRef,
    run_log: Optional[JsonlLogger] = None,
    on_stage_start: Optional[StageHook] = None,
    on_stage_end: Optional[StageHook] = None,
) -> TrainResult:
    """Warm-started stages; stage m re-simulates frozen stages 1..m-1 from fresh samples every iteration."""
    if plan.n_stages == 1:
        return train_single_stage(spec, plan, field, rho0, run_log, on_stage_end)
    grid = _plan_grid(plan)
    result = TrainResult(fields=[field])
    for m in range(plan.n_stages):
        if m > 0:
            result.fields.append(copy.deepcopy(result.fields[m - 1]))
        if on_stage_start is not None:
            on_stage_start(m + 1, result.fields[m])
        n_iter = plan.n_iter0 if m == 0 else plan.n_iter
        summary = _train_stage(spec, plan, rho0, result.fields, grid, m, n_iter, result.history, run_log)
        result.summaries.append(summary)
        if on_stage_end is not None:
            on_stage_end(m + 1, result.fields[m])
    return result


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Train score-flow velocity fields for one experiment (no diagnostics)")
    parser.add_argument("experiment")
    parser.add_argument("--config", default="")
    parser.add_argument("--output-dir", default="")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--iters", type=int, default=None, help="override n_iter0 and n_iter")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    from training.pipeline import load_raw_config, loss_frame, train_experiment, validate
    from fpflow.runtime.env_loader import env_log_level, load_env_defaults
    from fpflow.runtime.logger import configure_logging, write_frame

    load_env_defaults()
    configure_logging(env_log_level())
    args = parse_args(argv)
    raw = load_raw_config(args.config, args.experiment)
    if args.output_dir:
        raw["output_dir"] = args.output_dir
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.iters is not None:
        raw["n_iter0"] = raw["n_iter"] = str(args.iters)
    cfg = validate(raw)
    out = cfg.output_path()
    result = train_experiment(cfg, JsonlLogger(str(out / "train.jsonl")), checkpoint_dir=out / "checkpoints")
    write_frame(out / "loss.csv", loss_frame(result, cfg.record_wall_time))
    for s in result.summaries:
        print(f"Stage {s.stage} final_loss={s.final_loss:.4e} min_loss={s.min_loss:.4e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
