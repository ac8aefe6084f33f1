from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Tuple


KINDS = ("langevin", "uld", "lorenz", "atan_lorenz", "van_der_pol")
SECOND_ORDER_KINDS = ("uld", "van_der_pol")
POTENTIALS = ("quadratic", "double_well")


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "langevin"
    # configuration dimension: state dim for first-order kinds, position dim for uld / van_der_pol
    dim: int = 2
    eps: float = 0.5
    potential: str = "quadratic"
    c: float = 0.5
    gamma: float = 1.0
    beta: float = 1.0
    sigma_l: float = 10.0
    rho_l: float = 28.0
    beta_l: float = 8.0 / 3.0
    s: float = 0.2
    mu_vdp: float = 2.0
    atan_variant: str = "verbatim"  # "verbatim" | "symmetric"

    @property
    def second_order(self) -> bool:
        return self.kind in SECOND_ORDER_KINDS

    @property
    def state_dim(self) -> int:
        return 2 * self.dim if self.second_order else self.dim

    @property
    def control_dim(self) -> int:
        return self.dim

    @property
    def control_offset(self) -> int:
        return self.state_dim - self.control_dim

    @property
    def noise(self) -> float:
        """Diffusion constant acting on the controlled coordinates."""
        if self.kind == "uld":
            return self.gamma / self.beta
        return self.eps


@dataclass(frozen=True)
class GaussianInit:
    mean: float = 0.0
    var: float = 1.0


@dataclass(frozen=True)
class TrainPlan:
    n_x: int = 500
    n_steps: int = 100
    dt: float = 0.01
    n_stages: int = 1
    lr: float = 0.01
    n_iter0: int = 500
    n_iter: int = 500
    seed: int = 0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    resample: bool = True
    scheme: str = "euler"  # "euler" | "symplectic" (second-order kinds only)
    prefix_cache: bool = False
    cache_batches: int = 4
    log_every: int = 50
    progress: bool = False

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps * self.n_stages


@dataclass(frozen=True)
class ExperimentDefaults:
    problem: Dict[str, Any]
    T: float
    n_stages: int
    n_x: int
    n_iter0: int
    n_iter: int
    init: GaussianInit = GaussianInit()
    scheme: str = "euler"
    snapshot_times: Tuple[float, ...] = ()
    extra: Dict[str, Any] = field(default_factory=dict)


# Rows of the published hyperparameter table; dt = 0.01 and lr = 0.01 everywhere.
EXPERIMENT_DEFAULTS: Dict[str, ExperimentDefaults] = {
    "langevin_ou": ExperimentDefaults(
        problem={"kind": "langevin", "potential": "quadratic", "dim": 2, "eps": 0.5, "c": 0.5},
        T=1.0, n_stages=1, n_x=500, n_iter0=500, n_iter=500,
        snapshot_times=(0.0, 0.25, 0.5, 0.75, 1.0),
    ),
    "langevin_doublewell": ExperimentDefaults(
        problem={"kind": "langevin", "potential": "double_well", "dim": 2, "eps": 0.5, "c": 0.5},
        T=1.0, n_stages=1, n_x=500, n_iter0=500, n_iter=500,
        snapshot_times=(0.0, 0.25, 0.5, 0.75, 1.0),
    ),
    "uld_gaussian": ExperimentDefaults(
        problem={"kind": "uld", "potential": "quadratic", "dim": 1, "gamma": 1.0, "beta": 1.0},
        T=5.0, n_stages=5, n_x=1000, n_iter0=500, n_iter=200,
        init=GaussianInit(var=2.0), scheme="symplectic",
        snapshot_times=(0.0, 1.0, 2.0, 3.0, 4.0, 5.0),
    ),
    "uld_doublewell": ExperimentDefaults(
        problem={"kind": "uld", "potential": "double_well", "dim": 1, "gamma": 1.0, "beta": 1.0},
        T=5.0, n_stages=25, n_x=1000, n_iter0=500, n_iter=200,
        snapshot_times=(0.0, 0.5, 1.0, 2.0, 3.0, 5.0),
    ),
    "lorenz": ExperimentDefaults(
        problem={"kind": "lorenz", "dim": 3, "eps": 0.1, "s": 0.2},
        T=5.0, n_stages=25, n_x=1000, n_iter0=500, n_iter=200,
        snapshot_times=(0.0, 0.3, 0.6, 1.0, 2.0, 5.0),
    ),
    "atan_lorenz": ExperimentDefaults(
        problem={"kind": "atan_lorenz", "dim": 3, "eps": 0.1, "s": 0.1},
        T=5.0, n_stages=25, n_x=1000, n_iter0=500, n_iter=200,
        snapshot_times=(0.0, 0.5, 0.7, 1.0, 2.0, 5.0),
    ),
    "van_der_pol": ExperimentDefaults(
        problem={"kind": "van_der_pol", "dim": 1, "eps": 0.1, "mu_vdp": 2.0},
        T=2.0, n_stages=10, n_x=1000, n_iter0=500, n_iter=200,
        snapshot_times=(0.0, 0.2, 0.5, 1.0, 2.0),
    ),
    "theory_ou": ExperimentDefaults(
        problem={"kind": "langevin", "potential": "quadratic", "dim": 3, "eps": 0.5, "c": 0.0},
        T=0.01, n_stages=1, n_x=10000, n_iter0=0, n_iter=0,
        extra={"theory_dim": 3, "theory_samples": 10000, "theory_iters": 5000},
    ),
}

EXPERIMENTS = tuple(EXPERIMENT_DEFAULTS)
