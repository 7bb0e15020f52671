"""Synthetic alignment and fine-tuning corpora.

Geometry (axis ``e0`` is the safety axis; its zero level set is the
safe/unsafe boundary)::

    majority cluster   mean = majority_margin * e0 + cluster_offset * e1
    minority cluster   mean = minority_margin * e0 + cluster_offset * e2
    harmful examples   a cluster mean with its e0 coordinate set to 0,
                       labelled UNSAFE; half near each cluster by default
    benign task        two classes at +/- benign_separation * u plus
                       benign_shift * v, with u, v random unit vectors
                       orthogonal to e0, e1, e2 (drawn per task_index)

All points get isotropic Gaussian noise of scale ``noise_sigma``. The
minority sits closer to the boundary and is outnumbered, so uniform
training under-fits it and fine-tuning flips it first.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .diffmodel import Batch
from .errors import ConfigError, FormatError

GENERATOR_VERSION = "vaalab-synth/1"
FORMAT_NAME = "vaalab-corpus"
FORMAT_VERSION = 1

NUM_CLASSES = 4
SAFE_LABEL = 0
UNSAFE_LABEL = 1
BENIGN_LABELS = (2, 3)

# example-id bases keep ids unique across every corpus generated from one config
_ID_ALIGN = {"train": 0, "test": 10_000_000}
_ID_FINETUNE = 20_000_000
_ID_TASK_STRIDE = 1_000_000
_ID_TEST_OFFSET = 500_000

SPLITS = ("train", "test")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    input_dim: int = 16
    n_majority: int = 1800
    n_minority: int = 200
    majority_margin: float = 2.5
    minority_margin: float = 0.6
    noise_sigma: float = 0.3
    poison_rate: float = 0.10
    n_finetune: int = 1000
    cluster_offset: float = 0.5
    harmful_minority_share: float = 0.5
    benign_separation: float = 1.0
    benign_shift: float = 1.0
    task_index: int = 0

    def __post_init__(self):
        if self.input_dim < 5:
            raise ConfigError("input_dim must be >= 5 (three cluster axes plus a benign plane)")
        if self.n_majority < 1 or self.n_minority < 1 or self.n_finetune < 1:
            raise ConfigError("cluster and corpus sizes must be positive")
        if not 0 < self.minority_margin < self.majority_margin:
            raise ConfigError("need 0 < minority_margin < majority_margin")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ConfigError("poison_rate must lie in [0, 1]")
        if not 0.0 <= self.harmful_minority_share <= 1.0:
            raise ConfigError("harmful_minority_share must lie in [0, 1]")
        if self.task_index < 0:
            raise ConfigError("task_index must be non-negative")

    @property
    def n_harmful(self) -> int:
        # round half up; Python's round() would send 0.5 to the even neighbour
        return int(math.floor(self.poison_rate * self.n_finetune + 0.5))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class LabeledCorpus:
    examples: Batch
    clusters: tuple
    metadata: dict

    def __len__(self):
        return len(self.examples)

    def cluster_mask(self, name: str) -> np.ndarray:
        return np.array([c == name for c in self.clusters])

    def by_cluster(self, name: str) -> Batch:
        return self.examples.take(np.flatnonzero(self.cluster_mask(name)))

    def __eq__(self, other):
        if not isinstance(other, LabeledCorpus):
            return NotImplemented
        a, b = self.examples, other.examples
        return (
            self.clusters == other.clusters
            and self.metadata == other.metadata
            and np.array_equal(a.features, b.features)
            and np.array_equal(a.labels, b.labels)
            and np.array_equal(a.example_ids, b.example_ids)
            and np.array_equal(a.safety_flags, b.safety_flags)
        )


def cluster_means(cfg: SynthConfig) -> dict:
    e = np.eye(cfg.input_dim)
    return {
        "majority": cfg.majority_margin * e[0] + cfg.cluster_offset * e[1],
        "minority": cfg.minority_margin * e[0] + cfg.cluster_offset * e[2],
    }


def _rng(cfg: SynthConfig, *stream):
    return np.random.default_rng([cfg.seed, *stream])


def _split_index(split: str) -> int:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    return SPLITS.index(split)


def gen_alignment_task(cfg: SynthConfig, split: str = "train") -> LabeledCorpus:
    """Safety-flagged majority and minority clusters, all labelled SAFE."""
    rng = _rng(cfg, 0, _split_index(split))
    means = cluster_means(cfg)
    d = cfg.input_dim
    parts, clusters = [], []
    for name, n in (("majority", cfg.n_majority), ("minority", cfg.n_minority)):
        parts.append(means[name] + cfg.noise_sigma * rng.standard_normal((n, d)))
        clusters += [name] * n
    X = np.vstack(parts)
    n = X.shape[0]
    ex = Batch(X, np.full(n, SAFE_LABEL), _ID_ALIGN[split] + np.arange(n), np.ones(n, dtype=bool))
    meta = {"kind": "alignment", "split": split, "config": cfg.to_dict()}
    return LabeledCorpus(ex, tuple(clusters), meta)


def benign_plane(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal directions outside the cluster axes, fixed per task."""
    rng = _rng(cfg, 1, cfg.task_index, 99)
    A = rng.standard_normal((cfg.input_dim, 2))
    A[:3] = 0.0
    Q, _ = np.linalg.qr(A)
    return Q[:, 0], Q[:, 1]


def gen_finetune_task(cfg: SynthConfig, split: str = "train") -> LabeledCorpus:
    """Benign two-class task mixed with ``round(p * n)`` harmful examples."""
    rng = _rng(cfg, 1, cfg.task_index, _split_index(split))
    d = cfg.input_dim
    n_harm = cfg.n_harmful
    n_benign = cfg.n_finetune - n_harm
    u, v = benign_plane(cfg)

    yb = rng.integers(0, 2, size=n_benign)
    sign = np.where(yb == 1, 1.0, -1.0)[:, None]
    Xb = sign * cfg.benign_separation * u + cfg.benign_shift * v
    Xb = Xb + cfg.noise_sigma * rng.standard_normal((n_benign, d))

    means = cluster_means(cfg)
    near_minority = rng.random(n_harm) < cfg.harmful_minority_share
    centers = np.where(near_minority[:, None], means["minority"], means["majority"])
    centers = centers.copy()
    centers[:, 0] = 0.0
    Xh = centers + cfg.noise_sigma * rng.standard_normal((n_harm, d))

    X = np.vstack([Xb, Xh]) if n_harm else Xb
    y = np.concatenate([np.asarray(BENIGN_LABELS)[yb], np.full(n_harm, UNSAFE_LABEL)])
    flags = np.concatenate([np.zeros(n_benign, bool), np.ones(n_harm, bool)])
    base = _ID_FINETUNE + cfg.task_index * _ID_TASK_STRIDE + _split_index(split) * _ID_TEST_OFFSET
    ex = Batch(X, y, base + np.arange(len(y)), flags)
    clusters = ["benign"] * n_benign + [
        "harmful-minority" if m else "harmful-majority" for m in near_minority
    ]
    meta = {"kind": "finetune", "split": split, "config": cfg.to_dict()}
    return LabeledCorpus(ex, tuple(clusters), meta)


# -- corpus files ------------------------------------------------------------


def write_corpus(path, corpus: LabeledCorpus) -> None:
    """One header line of JSON, then ``id,flag,label,x0,...`` per example."""
    ex = corpus.examples
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "generator_version": GENERATOR_VERSION,
        "count": len(ex),
        "input_dim": ex.input_dim,
        "metadata": corpus.metadata,
        "clusters": list(corpus.clusters),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(ex)):
        feats = ",".join(repr(float(v)) for v in ex.features[i])
        lines.append(f"{int(ex.example_ids[i])},{int(ex.safety_flags[i])},{int(ex.labels[i])},{feats}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path) -> LabeledCorpus:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not text.endswith("\n"):
        raise FormatError("file is truncated (no final newline)", line=len(lines))
    lines = lines[:-1]
    if not lines:
        raise FormatError("empty file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header: {exc}", line=1) from None
    if header.get("format") != FORMAT_NAME:
        raise FormatError("not a vaalab corpus file", line=1)
    if header.get("version") != FORMAT_VERSION or header.get("generator_version") != GENERATOR_VERSION:
        raise FormatError(
            f"incompatible corpus version {header.get('version')!r}/{header.get('generator_version')!r}; "
            f"this build reads {FORMAT_VERSION}/{GENERATOR_VERSION}",
            line=1,
        )
    count, d = header["count"], header["input_dim"]
    body = lines[1:]
    if len(body) != count:
        raise FormatError(f"expected {count} examples, found {len(body)}", line=len(lines))
    X = np.empty((count, d))
    ids = np.empty(count, dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    flags = np.empty(count, dtype=bool)
    for i, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != 3 + d:
            raise FormatError(f"expected {3 + d} fields, found {len(parts)}", line=i + 2)
        try:
            ids[i] = int(parts[0])
            flag = int(parts[1])
            labels[i] = int(parts[2])
            X[i] = [float(v) for v in parts[3:]]
        except ValueError as exc:
            raise FormatError(str(exc), line=i + 2) from None
        if flag not in (0, 1):
            raise FormatError("safety_flag must be 0 or 1", line=i + 2)
        flags[i] = bool(flag)
    clusters = tuple(header.get("clusters", []))
    if len(clusters) != count:
        raise FormatError("cluster list does not match example count", line=1)
    return LabeledCorpus(Batch(X, labels, ids, flags), clusters, header["metadata"])


def symmetric_pair(seed: int, n: int = 500, input_dim: int = 16, margin: float = 1.0,
                   sigma: float = 1.0) -> tuple[Batch, Batch]:
    """Two groups that are exact mirror images across the ``e1`` coordinate.

    Group a holds SAFE points around ``margin * (e0 + e1)`` and UNSAFE points
    around the negation; group b is group a with ``e1`` flipped. Each group
    prefers a boundary tilted its own way, so over-serving one group raises
    the other's loss.
    """
    if n < 2 or input_dim < 2:
        raise ConfigError("need n >= 2 and input_dim >= 2")
    rng = np.random.default_rng([seed, 2])
    labels = np.where(np.arange(n) % 2 == 0, SAFE_LABEL, UNSAFE_LABEL)
    sign = np.where(labels == SAFE_LABEL, 1.0, -1.0)[:, None]
    e = np.eye(input_dim)
    X = sign * margin * (e[0] + e[1]) + sigma * rng.standard_normal((n, input_dim))
    Xb = X.copy()
    Xb[:, 1] *= -1.0
    flags = np.ones(n, dtype=bool)
    return (Batch(X, labels, np.arange(n), flags), Batch(Xb, labels.copy(), n + np.arange(n), flags))
