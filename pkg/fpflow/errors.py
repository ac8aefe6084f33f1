from __future__ import annotations

from typing import Iterable, Optional


class FpflowError(Exception):
    code = "fpflow_error"

    def __init__(self, message: str = "", code: Optional[str] = None) -> None:
        if code is not None:
            self.code = code
        super().__init__(message or self.code)


class InputError(FpflowError, ValueError):
    code = "invalid_input"


class UnsupportedError(FpflowError, ValueError):
    code = "unsupported_problem"


class FlowDivergenceError(FpflowError, RuntimeError):
    code = "flow_diverged"

    def __init__(
        self,
        message: str = "",
        step: Optional[int] = None,
        particle: Optional[int] = None,
        stage: Optional[int] = None,
        iteration: Optional[int] = None,
    ) -> None:
        self.step = step
        self.particle = particle
        self.stage = stage
        self.iteration = iteration
        super().__init__(message)

    def tag(self, stage: Optional[int] = None, iteration: Optional[int] = None) -> "FlowDivergenceError":
        if stage is not None:
            self.stage = stage
        if iteration is not None:
            self.iteration = iteration
        return self

    def __str__(self) -> str:
        parts = [super().__str__()]
        for name in ("stage", "iteration", "step", "particle"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{name}={value}")
        return " ".join(parts)


class TrainingDivergenceError(FpflowError, RuntimeError):
    code = "loss_not_finite"

    def __init__(self, message: str = "", stage: Optional[int] = None, iteration: Optional[int] = None) -> None:
        self.stage = stage
        self.iteration = iteration
        super().__init__(message)

    def __str__(self) -> str:
        return f"{super().__str__()} stage={self.stage} iteration={self.iteration}"


class StepSizeError(FpflowError, RuntimeError):
    code = "step_size_too_large"


class AccuracyError(FpflowError, RuntimeError):
    code = "quadrature_not_converged"


class ConfigError(FpflowError, ValueError):
    code = "invalid_config"

    def __init__(self, violations: Iterable[tuple[str, str]]) -> None:
        self.violations = list(violations)
        text = "; ".join(f"{key}: {msg}" for key, msg in self.violations)
        super().__init__(text)
