"""Exception types shared across the toolkit.

Errors that carry structured payloads expose them as attributes so callers
(and the CLI) can emit machine-readable reports without parsing messages.
"""

from __future__ import annotations


class InvalidSpecError(ValueError):
    """An input violates a stated invariant; the message names the invariant."""


class ModelDoesNotFitError(ValueError):
    """Model weights alone meet or exceed the device memory budget."""

    def __init__(self, weight_bytes: int, device_memory: int):
        self.weight_bytes = weight_bytes
        self.device_memory = device_memory
        super().__init__(
            f"model does not fit: weight_bytes={weight_bytes} >= device_memory={device_memory}"
        )


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite; carries the offending step index."""

    def __init__(self, step: int, loss_repr: str = "non-finite"):
        self.step = step
        super().__init__(f"training loss became {loss_repr} at step {step}")


class InfeasibleError(RuntimeError):
    """No assignment satisfies the constraints.

    `report` maps each active constraint name to its bound and the best value
    achievable over all assignments (min for upper bounds, max for lower).
    """

    def __init__(self, report: dict):
        self.report = report
        parts = ", ".join(
            f"{name}: bound={info['bound']}, best_achievable={info['best_achievable']}"
            for name, info in report.items()
        )
        super().__init__(f"no feasible assignment ({parts})")


class EnumerationCapError(RuntimeError):
    """Exhaustive enumeration would exceed the configured assignment cap."""

    def __init__(self, n_assignments: int, cap: int):
        self.n_assignments = n_assignments
        self.cap = cap
        super().__init__(
            f"refusing exhaustive enumeration: {n_assignments} assignments exceeds cap {cap}"
        )


class FusionError(ValueError):
    """Invalid fusion request: shape mismatch or overlapping/stale runs."""


class MemoryBudgetError(RuntimeError):
    """A per-GPU memory component (or the total) exceeds the budget.

    `components` maps component name -> bytes; `over` lists the offending
    component names; `gpu_memory` is the budget.
    """

    def __init__(self, components: dict, over: list, gpu_memory: int):
        self.components = components
        self.over = over
        self.gpu_memory = gpu_memory
        detail = ", ".join(f"{name}={components[name]}" for name in over)
        super().__init__(f"memory budget {gpu_memory} exceeded by: {detail}")


class NoFeasiblePlanError(RuntimeError):
    """No parallelism candidate fits; carries per-candidate rejection reasons."""

    def __init__(self, rejected: list):
        self.rejected = rejected
        super().__init__(f"no feasible parallelism plan among {len(rejected)} candidates")


class InsufficientSamplesError(RuntimeError):
    """A curriculum batch cannot be filled; carries per-level remaining counts."""

    def __init__(self, batch_index: int, shortfall: int, remaining_per_level: dict):
        self.batch_index = batch_index
        self.shortfall = shortfall
        self.remaining_per_level = remaining_per_level
        super().__init__(
            f"batch {batch_index} short by {shortfall} samples; "
            f"remaining per level: { {str(k): v for k, v in remaining_per_level.items()} }"
        )


class ConfigError(ValueError):
    """Malformed run configuration (unknown key, bad type, missing file)."""
