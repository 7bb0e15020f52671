"""Adversarial group sampler on the probability simplex.

Weights are kept in log space; the sampling distribution is their softmax,
optionally mixed with a uniform exploration floor::

    q = (1 - m * q_floor) * softmax(log_weights) + q_floor

Updates are the exponentiated-gradient (negative-entropy mirror ascent) step
``q_i <- q_i * exp(eta * f_i) / Z``. The bandit variant only observes the
drawn arm and importance-weights its value by the probability it was drawn
with.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, NumericError, PreconditionError

DEFAULT_ETA_Q = 0.1
DEFAULT_Q_FLOOR = 1e-3


@dataclass(frozen=True)
class SamplerState:
    log_weights: tuple
    eta_q: float = DEFAULT_ETA_Q
    q_floor: float = DEFAULT_Q_FLOOR
    step_count: int = 0

    def __post_init__(self):
        lw = tuple(float(v) for v in self.log_weights)
        m = len(lw)
        if m < 1:
            raise PreconditionError("sampler needs at least one group")
        if not all(np.isfinite(lw)):
            raise NumericError("log_weights must be finite")
        if self.eta_q < 0:
            raise PreconditionError("eta_q must be non-negative")
        if not 0.0 <= self.q_floor < 1.0 / m:
            raise PreconditionError(f"q_floor must lie in [0, 1/{m})")
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def uniform(cls, m: int, eta_q: float = DEFAULT_ETA_Q, q_floor: float = DEFAULT_Q_FLOOR):
        return cls((0.0,) * m, eta_q=eta_q, q_floor=q_floor)

    @property
    def m(self) -> int:
        return len(self.log_weights)


@dataclass(frozen=True)
class RewardObservation:
    group_index: int
    raw_objective: float
    sampling_prob: float


def _softmax(lw) -> np.ndarray:
    z = np.asarray(lw, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def current_q(state: SamplerState) -> np.ndarray:
    p = _softmax(state.log_weights)
    if state.q_floor > 0.0:
        p = (1.0 - state.m * state.q_floor) * p + state.q_floor
    return p / p.sum()


def draw_index(q, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from ``q`` using exactly one uniform variate."""
    q = np.asarray(q)
    u = rng.random()
    i = min(int(np.searchsorted(np.cumsum(q), u, side="right")), q.size - 1)
    # round-off at the top of the CDF must not land on a zero-mass arm
    while q[i] == 0.0:
        i -= 1
    return i


def sample_group(state: SamplerState, rng: np.random.Generator) -> tuple[int, float]:
    """Draw a group index from ``current_q``; returns ``(index, q_index)``."""
    q = current_q(state)
    i = draw_index(q, rng)
    return i, float(q[i])


def _renormalized(lw: np.ndarray) -> tuple:
    return tuple(lw - lw.max())


def exp3_update(state: SamplerState, obs: RewardObservation) -> SamplerState:
    """Bandit step: the drawn arm's log-weight grows by ``eta * f / q_i``."""
    if not obs.sampling_prob > 0.0:
        raise PreconditionError("sampling_prob must be positive to importance-weight a reward")
    if obs.sampling_prob < state.q_floor * (1.0 - 1e-9):
        raise PreconditionError("sampling_prob is below the exploration floor; it cannot come from current_q")
    if not 0 <= obs.group_index < state.m:
        raise PreconditionError(f"group_index {obs.group_index} out of range")
    if not np.isfinite(obs.raw_objective):
        raise NumericError("reward objective is not finite")
    reward = obs.raw_objective / obs.sampling_prob
    lw = np.array(state.log_weights)
    lw[obs.group_index] += state.eta_q * reward
    return replace(state, log_weights=_renormalized(lw), step_count=state.step_count + 1)


def mirror_ascent_full(state: SamplerState, f_vector) -> SamplerState:
    """Full-information step: every log-weight grows by ``eta * f_i``."""
    f = np.asarray(f_vector, dtype=np.float64)
    if f.shape != (state.m,):
        raise PreconditionError(f"f_vector must have length {state.m}")
    if not np.isfinite(f).all():
        raise NumericError("f_vector has non-finite entries")
    lw = np.array(state.log_weights) + state.eta_q * f
    return replace(state, log_weights=_renormalized(lw), step_count=state.step_count + 1)


def kl_divergence(q, p) -> float:
    """KL(q || p) with the convention 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise DomainError("q and p must be 1-d vectors of equal length")
    if (q < 0).any() or (p < 0).any():
        raise DomainError("probabilities must be non-negative")
    support = q > 0
    if (p[support] <= 0).any():
        raise DomainError("p must be positive wherever q is positive")
    val = float(np.sum(q[support] * np.log(q[support] / p[support])))
    return max(val, 0.0)
