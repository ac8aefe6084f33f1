from dataclasses import dataclass
from typing import Any, Dict


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    stage: int
    loss: float
    wall_ms: int


@dataclass(frozen=True)
class StageSummary:
    stage: int
    iterations: int
    final_loss: float
    min_loss: float
    lr: float
    seed: int

    def as_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "iterations": self.iterations,
            "final_loss": self.final_loss,
            "min_loss": self.min_loss,
            "lr": self.lr,
            "seed": self.seed,
        }
