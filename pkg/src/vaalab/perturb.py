"""Group-wise sharpness-aware perturbation and the curriculum-weighted objective.

The robust objective for a group batch is::

    f(theta) = (1 - lam) * loss(theta) + lam * loss(theta + eps)
    eps      = alpha * grad loss(theta) / ||grad loss(theta)||

``eps`` is held constant when differentiating (first-order SAM convention),
so the perturbed gradient costs one extra backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmodel
from .errors import PreconditionError

MODES = ("interp", "prob")
SHAPES = ("linear", "step")


@dataclass(frozen=True)
class PerturbConfig:
    alpha: float = 0.05
    grad_norm_tol: float = 1e-12

    def __post_init__(self):
        if not self.alpha > 0:
            raise PreconditionError("alpha must be positive")
        if not self.grad_norm_tol > 0:
            raise PreconditionError("grad_norm_tol must be positive")


@dataclass(frozen=True)
class CurriculumState:
    mode: str = "prob"
    shape: str = "linear"
    total_steps: int = 1
    current_step: int = 0
    step_fraction: float = 0.5  # switch point of the "step" shape

    def __post_init__(self):
        if self.mode not in MODES:
            raise PreconditionError(f"unknown curriculum mode {self.mode!r}")
        if self.shape not in SHAPES:
            raise PreconditionError(f"unknown curriculum shape {self.shape!r}")
        if self.total_steps < 1:
            raise PreconditionError("total_steps must be positive")
        if not 0 <= self.current_step <= self.total_steps:
            raise PreconditionError("current_step must lie in [0, total_steps]")
        if not 0.0 <= self.step_fraction <= 1.0:
            raise PreconditionError("step_fraction must lie in [0, 1]")

    def at(self, step: int) -> "CurriculumState":
        return CurriculumState(self.mode, self.shape, self.total_steps, step, self.step_fraction)


def lambda_value(state: CurriculumState) -> float:
    if state.shape == "linear":
        return state.current_step / state.total_steps
    return 1.0 if state.current_step >= state.step_fraction * state.total_steps else 0.0


def sam_epsilon(gradient, cfg: PerturbConfig) -> np.ndarray:
    g = np.asarray(gradient, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm < cfg.grad_norm_tol:
        return np.zeros_like(g)
    return g * (cfg.alpha / norm)


@dataclass(frozen=True)
class SurrogateResult:
    value: float
    gradient: np.ndarray
    backward_passes: int
    plain_loss: float
    perturbed: bool


def surrogate_value_and_grad(spec, params, batch, cfg: PerturbConfig, lam: float,
                             mode: str = "prob", rng=None) -> SurrogateResult:
    """Value and gradient of the curriculum objective on one batch.

    ``mode="interp"`` mixes plain and perturbed losses with weight ``lam``;
    ``mode="prob"`` evaluates the perturbed loss with probability ``lam`` and
    the plain loss otherwise (one uniform draw from ``rng`` per call).
    """
    if not 0.0 <= lam <= 1.0:
        raise PreconditionError(f"lambda must lie in [0, 1], got {lam}")
    if mode not in MODES:
        raise PreconditionError(f"unknown mode {mode!r}")

    loss, g = diffmodel.loss_and_grad(spec, params, batch)

    if mode == "prob":
        if rng is None:
            raise PreconditionError("mode='prob' needs a random generator")
        perturb = rng.random() < lam
    else:
        perturb = lam > 0.0
    if not perturb:
        return SurrogateResult(loss, g, 1, loss, False)

    eps = sam_epsilon(g, cfg)
    loss_p, g_p = diffmodel.loss_and_grad(spec, params + eps, batch)
    if mode == "prob":
        return SurrogateResult(loss_p, g_p, 2, loss, True)
    value = (1.0 - lam) * loss + lam * loss_p
    return SurrogateResult(value, (1.0 - lam) * g + lam * g_p, 2, loss, True)
