from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from analytics.diagnostics import (
    energy_distance,
    energy_trace,
    error_metrics,
    estimate_Z,
    free_energy,
    permutation_threshold,
)
from fpflow import __version__
from fpflow import theory
from fpflow.errors import ConfigError, FpflowError, InputError
from fpflow.flow import TimeGrid, initial_state, rollout, trajectory_frame
from fpflow.problems import check_spec, mobility
from fpflow.reference import GaussianRef, euler_maruyama, gaussian_reference, partition_reference
from fpflow.runtime.env_loader import env_config_overrides, env_log_level, load_env_defaults
from fpflow.runtime.logger import JsonlLogger, configure_logging, log_event, write_frame, write_snapshot
from fpflow.runtime.paths import resolve_path
from fpflow.runtime.seeding import substream
from fpflow.settings import EXPERIMENT_DEFAULTS, EXPERIMENTS, POTENTIALS, ProblemSpec, TrainPlan
from training.model import INIT_SCHEMES, VelocityField, build_field, load_checkpoint, save_checkpoint
from training.train import TrainResult, train_multi_stage

logger = logging.getLogger(__name__)

FIELD_SOURCES = ("trained", "checkpoint", "analytic")
STATIONARY_KINDS = ("langevin", "uld")
CHAOTIC_KINDS = ("lorenz", "atan_lorenz", "van_der_pol")
ATAN_VARIANTS = ("verbatim", "symmetric")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    output_dir: str = ""
    eval_only: bool = False
    checkpoint_dir: str = ""
    field_source: str = "trained"
    # time grid
    T: float = 1.0
    n_stages: int = 1
    n_steps: int = 100
    dt: float = 0.01
    # training
    n_x: int = 500
    lr: float = 0.01
    n_iter0: int = 500
    n_iter: int = 500
    width: int = 100
    init_scheme: str = "scaled-uniform"
    uld_scheme: str = "euler"
    prefix_cache: bool = False
    cache_batches: int = 4
    log_every: int = 50
    progress: bool = False
    # problem
    kind: str = "langevin"
    dim: int = 2
    eps: float = 0.5
    c: float = 0.5
    gamma: float = 1.0
    beta: float = 1.0
    s: float = 0.2
    mu_vdp: float = 2.0
    potential: str = "quadratic"
    atan_variant: str = "verbatim"
    init_mean: float = 0.0
    init_var: float = 1.0
    # outputs
    snapshot_times: tuple[float, ...] = ()
    export_particles: int = 500
    em_paths: int = 1000
    record_hessian: bool = False
    record_wall_time: bool = False
    threads: int = 0
    # theory_ou
    theory_dim: int = 3
    theory_samples: int = 10000
    theory_iters: int = 5000

    def problem_spec(self) -> ProblemSpec:
        return ProblemSpec(
            kind=self.kind,
            dim=self.dim,
            eps=self.eps,
            potential=self.potential,
            c=self.c,
            gamma=self.gamma,
            beta=self.beta,
            s=self.s,
            mu_vdp=self.mu_vdp,
            atan_variant=self.atan_variant,
        )

    def train_plan(self) -> TrainPlan:
        return TrainPlan(
            n_x=self.n_x,
            n_steps=self.n_steps,
            dt=self.dt,
            n_stages=self.n_stages,
            lr=self.lr,
            n_iter0=self.n_iter0,
            n_iter=self.n_iter,
            seed=self.seed,
            scheme=self.uld_scheme,
            prefix_cache=self.prefix_cache,
            cache_batches=self.cache_batches,
            log_every=self.log_every,
            progress=self.progress,
        )

    def grid(self) -> TimeGrid:
        return TimeGrid(self.dt, self.n_steps, self.n_stages)

    def rho0(self) -> GaussianRef:
        return GaussianRef.isotropic(self.problem_spec().state_dim, self.init_var, self.init_mean)

    def output_path(self) -> Path:
        return resolve_path(self.output_dir or str(Path("runs") / self.experiment))

    def as_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["snapshot_times"] = list(self.snapshot_times)
        return out


# ---- config parsing -----------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
CONFIG_KEYS = tuple(_FIELD_TYPES)


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    return tuple(float(p) for p in parts)


def _convert(key: str, text: str) -> Any:
    kind = _FIELD_TYPES[key]
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        return _parse_bool(text)
    if kind.startswith("tuple"):
        return _parse_floats(text)
    return text.strip()


def load_raw_config(path: str, experiment: str = "") -> dict[str, str]:
    """Flat key/value view of an INI config: the [experiment] section, then the section named after the experiment."""
    if not path:
        return {"experiment": experiment} if experiment else {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    read = parser.read(resolve_path(path), encoding="utf-8")
    if not read:
        raise ConfigError([("config", f"cannot read {path}")])
    raw: dict[str, str] = {}
    if parser.has_section("experiment"):
        raw.update(parser.items("experiment"))
    name = experiment or raw.get("experiment", "")
    if name and parser.has_section(name):
        raw.update(parser.items(name))
    if experiment:
        raw["experiment"] = experiment
    return raw


def _defaults_for(name: str, violations: list[tuple[str, str]]) -> dict[str, Any]:
    row = EXPERIMENT_DEFAULTS[name]
    values: dict[str, Any] = dict(row.problem)
    values.update(
        T=row.T,
        n_stages=row.n_stages,
        n_x=row.n_x,
        n_iter0=row.n_iter0,
        n_iter=row.n_iter,
        init_mean=row.init.mean,
        init_var=row.init.var,
        uld_scheme=row.scheme,
        snapshot_times=row.snapshot_times,
    )
    values.update(row.extra)
    for key, (variable, text) in env_config_overrides().items():
        try:
            values[key] = _convert(key, text)
        except ValueError as exc:
            violations.append((variable, str(exc)))
    return values


def _check_time_grid(values: dict[str, Any], given_steps: bool, violations: list[tuple[str, str]]) -> None:
    T, n_stages, dt = values["T"], values["n_stages"], values["dt"]
    if T <= 0.0 or dt <= 0.0 or n_stages <= 0:
        violations.append(("T/n_stages/dt", f"need T > 0, dt > 0, n_stages > 0 (got T={T}, dt={dt}, n_stages={n_stages})"))
        return
    if not given_steps:
        values["n_steps"] = max(1, int(round(T / (dt * n_stages))))
    n_steps = values["n_steps"]
    if n_steps <= 0 or not math.isclose(dt * n_steps * n_stages, T, rel_tol=1e-9, abs_tol=1e-12):
        violations.append(
            ("T/n_stages/n_steps/dt", f"dt * n_steps * n_stages must equal T (T={T}, n_stages={n_stages}, n_steps={n_steps}, dt={dt})")
        )


def validate(raw: Mapping[str, str]) -> ExperimentConfig:
    """Fill table defaults for the named experiment and reject every inconsistent key at once."""
    name = str(raw.get("experiment", "")).strip()
    if name not in EXPERIMENTS:
        raise ConfigError([("experiment", f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}")])
    violations: list[tuple[str, str]] = []
    values = _defaults_for(name, violations)
    values["experiment"] = name
    for key, text in raw.items():
        if key == "experiment":
            continue
        if key not in _FIELD_TYPES:
            violations.append((key, "unknown key"))
            continue
        try:
            values[key] = _convert(key, str(text))
        except ValueError as exc:
            violations.append((key, str(exc)))
    defaults = ExperimentConfig(experiment=name)
    for key in ("T", "n_stages", "dt"):
        values.setdefault(key, getattr(defaults, key))
    _check_time_grid(values, "n_steps" in values, violations)

    positive = ("n_x", "width", "cache_batches", "em_paths", "theory_dim", "theory_samples", "dim")
    for key in positive:
        if key in values and values[key] <= 0:
            violations.append((key, f"must be positive, got {values[key]}"))
    for key in ("n_iter0", "n_iter", "export_particles", "threads", "theory_iters", "log_every", "seed"):
        if key in values and values[key] < 0:
            violations.append((key, f"must be non-negative, got {values[key]}"))
    for key in ("lr", "init_var", "beta"):
        if key in values and values[key] <= 0.0:
            violations.append((key, f"must be positive, got {values[key]}"))
    for key in ("eps", "gamma"):
        if key in values and values[key] < 0.0:
            violations.append((key, f"must be non-negative, got {values[key]}"))

    choices = {
        "field_source": FIELD_SOURCES,
        "init_scheme": INIT_SCHEMES,
        "uld_scheme": ("euler", "symplectic"),
        "potential": POTENTIALS,
        "atan_variant": ATAN_VARIANTS,
    }
    for key, allowed in choices.items():
        if key in values and values[key] not in allowed:
            violations.append((key, f"expected one of {', '.join(allowed)}, got {values[key]!r}"))

    if values.get("eval_only") and values.get("field_source", "trained") == "trained":
        values["field_source"] = "checkpoint"
    if values.get("field_source") == "checkpoint" and not values.get("checkpoint_dir"):
        violations.append(("checkpoint_dir", "required when loading fields from checkpoints"))

    if violations:
        raise ConfigError(violations)
    cfg = ExperimentConfig(**values)
    spec = cfg.problem_spec()
    try:
        check_spec(spec)
    except FpflowError as exc:
        violations.append(("problem", str(exc)))
    if cfg.uld_scheme == "symplectic" and not spec.second_order:
        violations.append(("uld_scheme", f"symplectic stepping needs a second-order problem, not {spec.kind}"))
    if cfg.field_source == "analytic" and not _has_reference(cfg):
        violations.append(("field_source", "analytic fields exist only for quadratic langevin/uld started at zero mean"))
    if violations:
        raise ConfigError(violations)
    return cfg


# ---- running ------------------------------------------------------------------


def _has_reference(cfg: ExperimentConfig) -> bool:
    return cfg.kind in STATIONARY_KINDS and cfg.potential == "quadratic" and cfg.init_mean == 0.0


def _reference(cfg: ExperimentConfig):
    if not _has_reference(cfg):
        return None
    return gaussian_reference(cfg.problem_spec(), cfg.init_var)


def _build_untrained(cfg: ExperimentConfig, spec: ProblemSpec) -> VelocityField:
    return build_field(spec.state_dim, spec.control_dim, width=cfg.width, seed=cfg.seed, scheme=cfg.init_scheme)


def _stage_checkpoint(directory: Path, stage: int) -> Path:
    return directory / f"stage_{stage}.ckpt"


def train_experiment(
    cfg: ExperimentConfig,
    run_log: Optional[JsonlLogger] = None,
    checkpoint_dir: Optional[Path] = None,
) -> TrainResult:
    spec = cfg.problem_spec()

    def on_stage_end(stage: int, field: VelocityField) -> None:
        if checkpoint_dir is None:
            return
        path = save_checkpoint(field, _stage_checkpoint(checkpoint_dir, stage))
        log_event(run_log, "checkpoint", stage=stage, path=str(path))

    field = _build_untrained(cfg, spec)
    result = train_multi_stage(spec, cfg.train_plan(), field, cfg.rho0(), run_log=run_log, on_stage_end=on_stage_end)
    if checkpoint_dir is not None:
        for summary in result.summaries:
            meta = {"experiment": cfg.experiment, "layer_dims": field.layer_dims, **summary.as_dict()}
            meta_path = _stage_checkpoint(checkpoint_dir, summary.stage).with_suffix(".meta.json")
            meta_path.write_text(json.dumps(meta, ensure_ascii=False, indent=2), encoding="utf-8")
    return result


def load_fields(cfg: ExperimentConfig) -> list[VelocityField]:
    """Fields for evaluation without training: stage checkpoints or the closed-form composed field."""
    spec = cfg.problem_spec()
    if cfg.field_source == "analytic":
        ref = _reference(cfg)
        field = build_field(spec.state_dim, spec.control_dim, width=cfg.width, baseline=ref.baseline(), scheme="zero")
        return [field] * cfg.n_stages
    directory = resolve_path(cfg.checkpoint_dir)
    fields = []
    for stage in range(1, cfg.n_stages + 1):
        path = _stage_checkpoint(directory, stage)
        if not path.exists():
            raise InputError(f"missing checkpoint {path}", code="missing_checkpoint")
        field = load_checkpoint(path)
        if field.state_dim != spec.state_dim or field.out_dim != spec.control_dim:
            raise InputError(f"{path} does not match the problem dimensions", code="dimension_mismatch")
        fields.append(field)
    return fields


def loss_frame(result: TrainResult, with_wall_time: bool = False) -> pd.DataFrame:
    rows = []
    for rec in result.history:
        row = {"stage": rec.stage, "iteration": rec.iteration, "loss": rec.loss}
        if with_wall_time:
            row["wall_ms"] = rec.wall_ms
        rows.append(row)
    return pd.DataFrame(rows, columns=["stage", "iteration", "loss"] + (["wall_ms"] if with_wall_time else []))


def _ensemble_frame(times: np.ndarray, steps: Sequence[int], x: torch.Tensor) -> pd.DataFrame:
    frames = []
    n_paths, dim = x.shape[1], x.shape[2]
    for j in steps:
        block = {"path": np.arange(n_paths), "step": np.full(n_paths, j), "t": np.full(n_paths, times[j])}
        arr = x[j].numpy()
        for k in range(dim):
            block[f"x_{k}"] = arr[:, k]
        frames.append(pd.DataFrame(block))
    return pd.concat(frames, ignore_index=True)


class _Artifacts:
    def __init__(self, root: Path, run_log: JsonlLogger) -> None:
        self.root = root
        self.run_log = run_log
        self.written: list[str] = []

    def frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = write_frame(self.root / name, frame)
        self.record(path)
        return path

    def text(self, name: str, body: str) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(body, encoding="utf-8")
        self.record(path)
        return path

    def record(self, path: Path) -> None:
        rel = str(path.relative_to(self.root))
        self.written.append(rel)
        log_event(self.run_log, "artifact", path=rel)


def _write_manifest(out: Path, cfg: ExperimentConfig, started_ms: int, status: str, artifacts: Sequence[str]) -> None:
    manifest = {
        "package": "fpflow",
        "version": __version__,
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config": cfg.as_dict(),
        "status": status,
        "started_ms": started_ms,
        "finished_ms": int(time.time() * 1000),
        "artifacts": list(artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, ensure_ascii=False, indent=2), encoding="utf-8")


def _run_theory(cfg: ExperimentConfig, arts: _Artifacts) -> theory.TheorySummary:
    B1 = -mobility(ProblemSpec(kind="langevin", dim=cfg.theory_dim, c=cfg.c)).numpy()
    problem = theory.random_problem(substream(cfg.seed, "theory"), cfg.theory_dim, gamma=cfg.eps, B1=B1)
    problem = dataclasses.replace(problem, b0=np.zeros(cfg.theory_dim))
    samples = problem.sample(substream(cfg.seed, "theory-samples"), cfg.theory_samples)
    run = theory.gd_run(problem, samples, theory.eta_max(problem), cfg.theory_iters)
    summary = theory.summarize(problem, samples, run)
    arts.frame("theory.csv", run.to_frame())
    arts.text("theory_summary.json", json.dumps(summary.as_dict(), indent=2))
    logger.info(
        "theory lambda0=%.4f fitted_rate=%.4e bound=%.4e distance=%.3e",
        summary.lambda0,
        summary.fitted_rate,
        summary.theoretical_rate,
        summary.final_distance,
    )
    return summary


def _evaluate(cfg: ExperimentConfig, fields: Sequence[VelocityField], arts: _Artifacts) -> dict[str, Any]:
    spec = cfg.problem_spec()
    grid = cfg.grid()
    rho0 = cfg.rho0()
    steps = grid.nearest_steps(cfg.snapshot_times or (0.0, grid.horizon))
    x0 = rho0.sample(substream(cfg.seed, "evaluation"), cfg.n_x)
    traj = rollout(initial_state(rho0, x0, with_hessian=cfg.record_hessian), fields, grid, cfg.uld_scheme)
    arts.frame("trajectory.csv", trajectory_frame(traj, steps, cfg.export_particles))
    for j in steps:
        path = write_snapshot(arts.root / "snapshots" / f"step_{j}.bin", traj.x[j].numpy(), traj.l[j].numpy(), traj.s[j].numpy())
        arts.record(path)
    summary: dict[str, Any] = {}

    reference = _reference(cfg)
    if spec.kind in STATIONARY_KINDS:
        trace = energy_trace(traj, spec, reference)
        arts.frame("energy.csv", trace.to_frame())
        z_hat = estimate_Z(free_energy(traj.final(), spec))
        z_ref = partition_reference(spec)
        rel = abs(z_hat - z_ref) / z_ref
        arts.text("z_estimate.txt", f"z_estimate {z_hat!r}\nz_reference {z_ref!r}\nrelative_error {rel!r}\n")
        summary.update(z_estimate=z_hat, z_reference=z_ref, z_relative_error=rel)
        logger.info("Z estimate=%.6f reference=%.6f rel_error=%.3e", z_hat, z_ref, rel)
    if reference is not None:
        metrics = error_metrics(fields, traj, reference, grid, spec)
        arts.frame("errors.csv", metrics.to_frame())
        summary.update(dataclasses.asdict(metrics))
        logger.info("err_f=%.3e err_rho=%.3e err_s=%.3e", metrics.err_f, metrics.err_rho, metrics.err_s)

    em_x0 = rho0.sample(substream(cfg.seed, "em-init"), cfg.em_paths)
    ensemble = euler_maruyama(spec, em_x0, grid.dt, grid.total_steps, cfg.seed)
    arts.frame("ensemble.csv", _ensemble_frame(ensemble.times, steps, ensemble.x))

    if spec.kind in CHAOTIC_KINDS:
        baseline_seed = int(substream(cfg.seed, "em-baseline").integers(2**31))
        em_b0 = rho0.sample(substream(cfg.seed, "em-baseline-init"), cfg.em_paths)
        other = euler_maruyama(spec, em_b0, grid.dt, grid.total_steps, baseline_seed)
        rows = []
        for j in steps:
            dist = energy_distance(traj.x[j], ensemble.x[j], seed=cfg.seed)
            self_dist = energy_distance(ensemble.x[j], other.x[j], seed=cfg.seed)
            threshold = permutation_threshold(ensemble.x[j], other.x[j], seed=cfg.seed)
            rows.append(
                {"step": j, "t": grid.time(j), "energy_distance": dist, "self_distance": self_dist,
                 "threshold": threshold, "passed": bool(dist <= threshold)}
            )
        arts.frame("energy_distance.csv", pd.DataFrame(rows))
        summary["energy_distance_passed"] = all(r["passed"] for r in rows)
    return summary


def run(cfg: ExperimentConfig) -> Path:
    """Train (or load) the fields, evaluate them, and write every artifact under the output directory."""
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    started_ms = int(time.time() * 1000)
    run_log = JsonlLogger(str(out / "run.jsonl"))
    arts = _Artifacts(out, run_log)
    log_event(run_log, "run_start", experiment=cfg.experiment, seed=cfg.seed, version=__version__)
    _write_manifest(out, cfg, started_ms, "running", arts.written)
    try:
        if cfg.experiment == "theory_ou":
            summary = _run_theory(cfg, arts).as_dict()
        else:
            if cfg.field_source == "trained":
                result = train_experiment(cfg, run_log=run_log, checkpoint_dir=out / "checkpoints")
                arts.frame("loss.csv", loss_frame(result, cfg.record_wall_time))
                fields = result.fields
            else:
                fields = load_fields(cfg)
            summary = _evaluate(cfg, fields, arts)
    except FpflowError as exc:
        log_event(run_log, "error", code=exc.code, message=str(exc))
        _write_manifest(out, cfg, started_ms, "failed", arts.written)
        raise
    log_event(run_log, "run_end", **summary)
    _write_manifest(out, cfg, started_ms, "ok", arts.written)
    return out


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run one score-flow experiment and write its diagnostics")
    parser.add_argument("--config", default="", help="INI file with an [experiment] section")
    parser.add_argument("--experiment", default="", help=f"one of: {', '.join(EXPERIMENTS)}")
    parser.add_argument("--output-dir", default="")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--eval-only", action="store_true")
    parser.add_argument("--checkpoint-dir", default="")
    parser.add_argument("--field-source", default="", choices=("",) + FIELD_SOURCES)
    parser.add_argument("--threads", type=int, default=None)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_env_defaults()
    configure_logging(env_log_level())
    args = parse_args(argv)
    try:
        raw = load_raw_config(args.config, args.experiment)
        overrides = {
            "output_dir": args.output_dir,
            "seed": "" if args.seed is None else str(args.seed),
            "eval_only": "true" if args.eval_only else "",
            "checkpoint_dir": args.checkpoint_dir,
            "field_source": args.field_source,
            "threads": "" if args.threads is None else str(args.threads),
        }
        raw.update({k: v for k, v in overrides.items() if v})
        cfg = validate(raw)
    except ConfigError as exc:
        for key, message in exc.violations:
            print(f"config error: {key}: {message}", file=sys.stderr)
        return 2
    try:
        out = run(cfg)
    except FpflowError as exc:
        logger.error("run failed code=%s %s", exc.code, exc)
        return 1
    print(f"Saved run to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
