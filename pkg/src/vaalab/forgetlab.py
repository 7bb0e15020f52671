"""Forgetting analysis: simulated harmful fine-tuning and vulnerability grouping."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffmodel, perturb
from .diffmodel import Batch, ModelSpec
from .errors import ConfigError, DomainError, NumericError, PreconditionError
from .trainer import INVULNERABLE, VULNERABLE, GroupedDataset, TrainerConfig, rng_streams


@dataclass(frozen=True, eq=False)
class ForgettingRecord:
    """Binary harmful-score traces; column 0 is measured before fine-tuning."""

    example_ids: np.ndarray
    hs_trace: np.ndarray
    eval_steps: tuple

    def __post_init__(self):
        ids = np.asarray(self.example_ids, dtype=np.int64)
        hs = np.asarray(self.hs_trace, dtype=np.uint8)
        if hs.ndim != 2 or hs.shape[0] != ids.size:
            raise PreconditionError("hs_trace must have one row per example")
        if hs.shape[1] != len(self.eval_steps):
            raise PreconditionError("one eval step per trace column")
        if hs.size and hs.max() > 1:
            raise PreconditionError("harmful scores are binary")
        object.__setattr__(self, "example_ids", ids)
        object.__setattr__(self, "hs_trace", hs)
        object.__setattr__(self, "eval_steps", tuple(int(s) for s in self.eval_steps))

    @property
    def T(self) -> int:
        return self.hs_trace.shape[1] - 1

    def forgot_nums(self) -> np.ndarray:
        hs0 = self.hs_trace[:, :1]
        return (self.hs_trace[:, 1:] > hs0).sum(axis=1)

    def forgotten_ids(self) -> set:
        return set(self.example_ids[self.forgot_nums() > 0].tolist())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["example_id"] + [f"hs_{t}" for t in range(self.T + 1)] + ["forgot_num"])
        for eid, row, fn in zip(self.example_ids, self.hs_trace, self.forgot_nums()):
            w.writerow([int(eid), *(int(v) for v in row), int(fn)])
        return buf.getvalue()

    def summary(self) -> dict:
        fn = self.forgot_nums()
        return {
            "num_examples": int(fn.size),
            "T": self.T,
            "eval_steps": list(self.eval_steps),
            "num_forgotten": int((fn > 0).sum()),
            "forgetting_rate": float((fn > 0).mean()) if fn.size else 0.0,
            "mean_forgot_num": float(fn.mean()) if fn.size else 0.0,
            "initially_harmful": int(self.hs_trace[:, 0].sum()),
        }


def harmful_scores(spec: ModelSpec, params, alignment: Batch) -> np.ndarray:
    """1 where the model's prediction differs from the example's safe label."""
    return (diffmodel.predict_many(spec, params, alignment.features) != alignment.labels).astype(np.uint8)


def simulate_hft(spec: ModelSpec, aligned_params, finetune_data: Batch, alignment_data: Batch,
                 hft_cfg: TrainerConfig, eval_every: int | None = None, total_steps: int | None = None):
    """Fine-tune with plain ERM steps and trace harmful scores on the alignment set.

    Scores are recorded before the first update and after every
    ``eval_every`` steps (default: one pass over ``finetune_data``).
    ``total_steps`` overrides ``hft_cfg.total_steps`` and may be 0.
    Returns ``(record, final_params)``.
    """
    steps = hft_cfg.total_steps if total_steps is None else int(total_steps)
    if steps < 0:
        raise PreconditionError("total_steps must be non-negative")
    if eval_every is None:
        eval_every = max(1, len(finetune_data) // hft_cfg.batch_size)
    if eval_every < 1:
        raise PreconditionError("eval_every must be positive")
    if len(finetune_data) == 0:
        raise ConfigError("fine-tuning set is empty")
    params = diffmodel.check_params(spec, aligned_params).copy()
    _, batch_rng, _ = rng_streams(hft_cfg.seed)
    n = len(finetune_data)
    cols = [harmful_scores(spec, params, alignment_data)]
    eval_steps = [0]
    for t in range(1, steps + 1):
        batch = finetune_data.take(batch_rng.integers(0, n, size=hft_cfg.batch_size))
        try:
            _, g = diffmodel.loss_and_grad(spec, params, batch)
        except NumericError as exc:
            raise NumericError(f"step {t}: {exc}", example_id=exc.example_id, step=t) from None
        params -= hft_cfg.eta_theta * g
        if t % eval_every == 0:
            cols.append(harmful_scores(spec, params, alignment_data))
            eval_steps.append(t)
    record = ForgettingRecord(alignment_data.example_ids, np.stack(cols, axis=1), tuple(eval_steps))
    return record, params


def forgot_num(record: ForgettingRecord, example_id: int) -> int:
    """Number of evaluation points where the score exceeds its initial value."""
    hits = np.flatnonzero(record.example_ids == example_id)
    if hits.size == 0:
        raise KeyError(f"unknown example_id {example_id}")
    row = record.hs_trace[hits[0]]
    return int((row[1:] > row[0]).sum())


@dataclass(frozen=True)
class GroupPartition:
    vulnerable_ids: frozenset
    invulnerable_ids: frozenset
    forgot_nums: dict
    source: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "vulnerable": sorted(int(i) for i in self.vulnerable_ids),
            "invulnerable": sorted(int(i) for i in self.invulnerable_ids),
            "forgot_nums": {str(k): int(v) for k, v in sorted(self.forgot_nums.items())},
            "source": self.source,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroupPartition":
        doc = json.loads(text)
        missing = {"vulnerable", "invulnerable", "forgot_nums"} - set(doc)
        if missing:
            raise ConfigError(f"partition file is missing {sorted(missing)}")
        v, inv = frozenset(doc["vulnerable"]), frozenset(doc["invulnerable"])
        if v & inv:
            raise ConfigError("partition groups overlap")
        return cls(v, inv, {int(k): int(c) for k, c in doc["forgot_nums"].items()}, doc.get("source", {}))


def partition(record: ForgettingRecord, source: dict | None = None) -> GroupPartition:
    """Vulnerable iff the example was forgotten at least once."""
    fn = record.forgot_nums()
    ids = record.example_ids.tolist()
    nums = {int(i): int(c) for i, c in zip(ids, fn)}
    vul = frozenset(i for i, c in nums.items() if c > 0)
    return GroupPartition(vul, frozenset(nums) - vul, nums, dict(source or {}))


def grouped_dataset(alignment: Batch, part: GroupPartition) -> GroupedDataset:
    """Split the alignment set along a partition; both groups must be non-empty."""
    if not part.vulnerable_ids or not part.invulnerable_ids:
        raise ConfigError(
            "partition has an empty group "
            f"(vulnerable={len(part.vulnerable_ids)}, invulnerable={len(part.invulnerable_ids)})"
        )
    return GroupedDataset(
        (alignment.select_ids(part.vulnerable_ids), alignment.select_ids(part.invulnerable_ids)),
        (VULNERABLE, INVULNERABLE),
    )


def swap_noise(part: GroupPartition, fraction: float, rng) -> GroupPartition:
    """Exchange ``round(fraction * smaller group)`` random ids between the groups."""
    v = sorted(part.vulnerable_ids)
    inv = sorted(part.invulnerable_ids)
    k = int(round(fraction * min(len(v), len(inv))))
    if k == 0:
        return part
    out_v = set(rng.choice(v, size=k, replace=False).tolist())
    out_inv = set(rng.choice(inv, size=k, replace=False).tolist())
    new_v = (set(v) - out_v) | out_inv
    new_inv = (set(inv) - out_inv) | out_v
    src = dict(part.source, swap_fraction=fraction, swapped=k)
    return GroupPartition(frozenset(new_v), frozenset(new_inv), dict(part.forgot_nums), src)


@dataclass(frozen=True)
class ForgetSets:
    sets: tuple
    N: int


def _intersection(sets) -> set:
    out = set(sets[0])
    for s in sets[1:]:
        out &= set(s)
    return out


def common_forgot(fs: ForgetSets) -> float:
    if fs.N <= 0:
        raise DomainError("N must be positive")
    if not fs.sets:
        raise DomainError("need at least one forgetting set")
    return len(_intersection(fs.sets)) / fs.N


def common_forgot_ratio(fs: ForgetSets):
    """Shared-forgetting fraction relative to the smallest set; None if any set is empty."""
    if not fs.sets:
        raise DomainError("need at least one forgetting set")
    smallest = min(len(s) for s in fs.sets)
    if smallest == 0:
        return None
    return len(_intersection(fs.sets)) / smallest


def random_overlap_ratio(sizes, N: int) -> float:
    """Expected common_forgot_ratio of two independent uniform random sets."""
    a, b = sizes
    if min(a, b) == 0:
        return 0.0
    return (a * b / N) / min(a, b)


def random_unit_directions(n: int, dim: int, rng) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def landscape_probe(spec: ModelSpec, params, data_by_group: dict, magnitudes,
                    directions_per_magnitude: int = 32, mode: str = "random", rng=None,
                    loss_fn=None) -> dict:
    """Mean loss increase of each group under weight perturbations.

    For each group and magnitude ``a`` the curve holds mean and standard
    deviation over unit directions ``d`` of ``loss(theta + a d) - loss(theta)``.
    ``mode="gradient"`` uses the single direction of the group's own loss
    gradient. ``loss_fn(params, batch)`` replaces the model loss (test hook).
    """
    mags = np.asarray(magnitudes, dtype=np.float64)
    if (mags < 0).any() or (np.diff(mags) < 0).any():
        raise PreconditionError("magnitudes must be non-negative and sorted")
    if mode not in ("random", "gradient"):
        raise PreconditionError(f"unknown probe mode {mode!r}")
    if mode == "random" and rng is None:
        raise PreconditionError("random directions need a generator")
    if loss_fn is None:
        loss_fn = lambda p, b: diffmodel.forward_loss(spec, p, b)  # noqa: E731
    theta = np.asarray(params, dtype=np.float64)
    out = {}
    for name, batch in data_by_group.items():
        base = loss_fn(theta, batch)
        if mode == "gradient":
            g = diffmodel.grad(spec, theta, batch)
            dirs = perturb.sam_epsilon(g, perturb.PerturbConfig(alpha=1.0))[None, :]
        curve = []
        for a in mags:
            if mode == "random":
                dirs = random_unit_directions(directions_per_magnitude, theta.size, rng)
            deltas = np.array([loss_fn(theta + a * d, batch) - base for d in dirs])
            curve.append({"magnitude": float(a), "mean_delta": float(deltas.mean()),
                          "std_delta": float(deltas.std())})
        out[name] = curve
    return out


def landscape_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["magnitude", "mean_delta", "std_delta"])
    for row in curve:
        w.writerow([repr(row["magnitude"]), repr(row["mean_delta"]), repr(row["std_delta"])])
    return buf.getvalue()
