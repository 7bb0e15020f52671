"""Training loops: group-DRO with an EXP3 sampler, ERM, and fixed-sampler baselines.

All loops use plain gradient descent and draw batches uniformly with
replacement. Randomness comes from three independent streams spawned from
the run seed (group draws, batch draws, perturbation coin flips), so
switching the sampler on or off never shifts the batch sequence.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffmodel, perturb, simplex
from .diffmodel import Batch, ModelSpec
from .errors import ConfigError, NumericError

METHODS = ("vaa", "erm", "vuln-only", "invuln-only", "importance")
REWARD_SOURCES = ("surrogate", "plain-loss")
VULNERABLE = "vulnerable"
INVULNERABLE = "invulnerable"


@dataclass(frozen=True)
class TrainerConfig:
    method: str = "vaa"
    eta_theta: float = 1e-4
    eta_q: float = simplex.DEFAULT_ETA_Q
    total_steps: int = 1250
    batch_size: int = 8
    perturb: perturb.PerturbConfig = field(default_factory=perturb.PerturbConfig)
    curriculum_mode: str = "prob"
    curriculum_shape: str = "linear"
    curriculum_step_fraction: float = 0.5
    seed: int = 0
    reward_source: str = "surrogate"
    q_floor: float = simplex.DEFAULT_Q_FLOOR

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.reward_source not in REWARD_SOURCES:
            raise ConfigError(f"unknown reward_source {self.reward_source!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.eta_theta > 0:
            raise ConfigError("eta_theta must be positive")
        if self.eta_q < 0:
            raise ConfigError("eta_q must be non-negative")
        if isinstance(self.perturb, dict):
            object.__setattr__(self, "perturb", perturb.PerturbConfig(**self.perturb))
        self.curriculum()  # validates mode/shape/fraction

    def curriculum(self, step: int = 0) -> perturb.CurriculumState:
        return perturb.CurriculumState(
            self.curriculum_mode,
            self.curriculum_shape,
            self.total_steps,
            step,
            self.curriculum_step_fraction,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    groups: tuple
    group_names: tuple

    def __post_init__(self):
        groups = tuple(self.groups)
        names = tuple(self.group_names)
        if len(groups) != len(names):
            raise ConfigError("one name per group required")
        if not groups:
            raise ConfigError("dataset has no groups")
        for name, g in zip(names, groups):
            if len(g) == 0:
                raise ConfigError(f"group {name!r} is empty")
        all_ids = np.concatenate([g.example_ids for g in groups])
        if np.unique(all_ids).size != all_ids.size:
            raise ConfigError("groups are not disjoint by example_id")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "group_names", names)

    @property
    def m(self) -> int:
        return len(self.groups)

    def index_of(self, name: str) -> int:
        try:
            return self.group_names.index(name)
        except ValueError:
            raise ConfigError(f"dataset has no group named {name!r}") from None

    def flatten(self) -> Batch:
        out = self.groups[0]
        for g in self.groups[1:]:
            out = out.concat(g)
        return out


class RunMetrics:
    """Append-only per-step log plus an end-of-run summary."""

    def __init__(self):
        self.records: list[dict] = []
        self.summary: dict = {}

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def total_backward_passes(self) -> int:
        return sum(r["backward_passes"] for r in self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def rng_streams(seed: int):
    sampler, batches, coins = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(sampler),
        np.random.default_rng(batches),
        np.random.default_rng(coins),
    )


def _check_finite(result, step):
    if not np.isfinite(result.value):
        raise NumericError(f"non-finite objective at step {step}", step=step)


def _group_summary(spec, params, names, groups, metrics):
    per_group = {}
    for name, g in zip(names, groups):
        losses = diffmodel.per_example_loss(spec, params, g)
        acc = float(np.mean(diffmodel.predict_many(spec, params, g.features) == g.labels))
        per_group[name] = {"train_loss": float(losses.mean()), "train_accuracy": acc, "size": len(g)}
    metrics.summary.update(
        per_group=per_group,
        total_backward_passes=metrics.total_backward_passes,
        steps=len(metrics),
    )


def _grouped_loop(spec, params, data: GroupedDataset, cfg: TrainerConfig, fixed_q=None):
    """Shared loop for the adaptive (fixed_q None) and fixed samplers."""
    params = diffmodel.check_params(spec, params).copy()
    sampler_rng, batch_rng, coin_rng = rng_streams(cfg.seed)
    state = simplex.SamplerState.uniform(data.m, eta_q=cfg.eta_q, q_floor=cfg.q_floor)
    sizes = [len(g) for g in data.groups]
    metrics = RunMetrics()

    for t in range(1, cfg.total_steps + 1):
        q = simplex.current_q(state) if fixed_q is None else fixed_q
        i = simplex.draw_index(q, sampler_rng)
        q_i = float(q[i])
        batch = data.groups[i].take(batch_rng.integers(0, sizes[i], size=cfg.batch_size))
        lam = perturb.lambda_value(cfg.curriculum(t - 1))
        try:
            res = perturb.surrogate_value_and_grad(
                spec, params, batch, cfg.perturb, lam, cfg.curriculum_mode, coin_rng
            )
        except NumericError as exc:
            raise NumericError(f"step {t}: {exc}", example_id=exc.example_id, step=t) from None
        _check_finite(res, t)
        objective = res.value if cfg.reward_source == "surrogate" else res.plain_loss
        reward = objective / q_i
        if fixed_q is None:
            state = simplex.exp3_update(state, simplex.RewardObservation(i, objective, q_i))
        params -= cfg.eta_theta * res.gradient
        metrics.append(
            {
                "step": t,
                "group": i,
                "q": [float(v) for v in q],
                "loss": res.plain_loss,
                "objective": res.value,
                "lambda": lam,
                "reward": reward,
                "grad_norm": float(np.linalg.norm(res.gradient)),
                "backward_passes": res.backward_passes,
            }
        )
    if not np.isfinite(params).all():
        raise NumericError("parameters became non-finite", step=cfg.total_steps)
    _group_summary(spec, params, data.group_names, data.groups, metrics)
    metrics.summary["method"] = cfg.method
    if fixed_q is None:
        metrics.summary["final_q"] = [float(v) for v in simplex.current_q(state)]
    return params, metrics


def vaa_train(spec: ModelSpec, init_params, data: GroupedDataset, cfg: TrainerConfig):
    """Group-DRO training against an EXP3 group sampler.

    Each step draws a group from the sampler, a batch from that group, takes
    the curriculum objective and its gradient, rewards the sampler with the
    importance-weighted objective, and descends on the parameters.
    """
    if cfg.method != "vaa":
        raise ConfigError(f"vaa_train called with method {cfg.method!r}")
    return _grouped_loop(spec, init_params, data, cfg)


def fixed_distribution(data: GroupedDataset, method: str) -> np.ndarray:
    q = np.zeros(data.m)
    if method == "vuln-only":
        q[data.index_of(VULNERABLE)] = 1.0
    elif method == "invuln-only":
        q[data.index_of(INVULNERABLE)] = 1.0
    elif method == "importance":
        inv = 1.0 / np.array([len(g) for g in data.groups], dtype=np.float64)
        q = inv / inv.sum()
    else:
        raise ConfigError(f"{method!r} is not a fixed-sampler method")
    return q


def heuristic_train(spec: ModelSpec, init_params, data: GroupedDataset, cfg: TrainerConfig):
    """Same loop as :func:`vaa_train` with a fixed, non-adaptive sampler."""
    q = fixed_distribution(data, cfg.method)
    return _grouped_loop(spec, init_params, data, cfg, fixed_q=q)


def erm_train(spec: ModelSpec, init_params, data, cfg: TrainerConfig):
    """Plain mini-batch gradient descent on the union of all groups."""
    if cfg.method != "erm":
        raise ConfigError(f"erm_train called with method {cfg.method!r}")
    flat = data.flatten() if isinstance(data, GroupedDataset) else data
    if len(flat) == 0:
        raise ConfigError("training set is empty")
    params = diffmodel.check_params(spec, init_params).copy()
    _, batch_rng, _ = rng_streams(cfg.seed)
    n = len(flat)
    metrics = RunMetrics()
    for t in range(1, cfg.total_steps + 1):
        batch = flat.take(batch_rng.integers(0, n, size=cfg.batch_size))
        try:
            loss, g = diffmodel.loss_and_grad(spec, params, batch)
        except NumericError as exc:
            raise NumericError(f"step {t}: {exc}", example_id=exc.example_id, step=t) from None
        params -= cfg.eta_theta * g
        metrics.append(
            {
                "step": t,
                "group": None,
                "q": None,
                "loss": loss,
                "objective": loss,
                "lambda": 0.0,
                "reward": None,
                "grad_norm": float(np.linalg.norm(g)),
                "backward_passes": 1,
            }
        )
    if not np.isfinite(params).all():
        raise NumericError("parameters became non-finite", step=cfg.total_steps)
    if isinstance(data, GroupedDataset):
        _group_summary(spec, params, data.group_names, data.groups, metrics)
    else:
        _group_summary(spec, params, ("all",), (flat,), metrics)
    metrics.summary["method"] = "erm"
    return params, metrics


def train(spec: ModelSpec, init_params, data: GroupedDataset, cfg: TrainerConfig):
    """Dispatch on ``cfg.method``."""
    if cfg.method == "vaa":
        return vaa_train(spec, init_params, data, cfg)
    if cfg.method == "erm":
        return erm_train(spec, init_params, data, cfg)
    return heuristic_train(spec, init_params, data, cfg)


def evaluate(spec: ModelSpec, params, testset, safety_subset=None) -> dict:
    """Accuracy, harm analog, and per-group mean loss.

    ``testset`` is a :class:`Batch` (reported as one group named ``"all"``) or
    a :class:`GroupedDataset`. The harm analog is the misprediction rate on the
    safety-flagged examples of ``safety_subset``; it is ``None`` when there are
    none.
    """
    if isinstance(testset, GroupedDataset):
        names, groups = testset.group_names, testset.groups
        flat = testset.flatten()
    else:
        names, groups, flat = ("all",), (testset,), testset
    if len(flat) == 0:
        raise ConfigError("test set is empty")
    preds = diffmodel.predict_many(spec, params, flat.features)
    out = {
        "accuracy": float(np.mean(preds == flat.labels)),
        "per_group_loss": {
            name: float(diffmodel.per_example_loss(spec, params, g).mean())
            for name, g in zip(names, groups)
        },
        "harm_analog": None,
    }
    if safety_subset is not None and len(safety_subset):
        flagged = safety_subset.take(np.flatnonzero(safety_subset.safety_flags))
        if len(flagged):
            p = diffmodel.predict_many(spec, params, flagged.features)
            out["harm_analog"] = float(np.mean(p != flagged.labels))
    return out
