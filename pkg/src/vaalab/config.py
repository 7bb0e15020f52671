"""Run configuration: one JSON document covering every pipeline stage.

Unknown keys are rejected at every level. Missing keys take the defaults
below, which are the shipped desk-scale benchmark.
"""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

import numpy as np

from .diffmodel import ModelSpec
from .errors import ConfigError
from .perturb import PerturbConfig
from .synthdata import NUM_CLASSES, SynthConfig
from .trainer import METHODS, TrainerConfig

DEFAULTS = {
    "seed": 0,
    "model": {"kind": "linear-softmax", "input_dim": 16, "num_classes": NUM_CLASSES},
    "synth": {},
    "align": {"method": "erm", "eta_theta": 0.1, "total_steps": 1250, "batch_size": 8},
    "hft": {"method": "erm", "eta_theta": 0.05, "total_steps": 625, "batch_size": 8},
    "vaa": {
        "method": "vaa",
        "eta_theta": 0.1,
        "eta_q": 0.1,
        "total_steps": 1250,
        "batch_size": 8,
        "perturb": {"alpha": 0.05},
        "curriculum_mode": "prob",
        "curriculum_shape": "linear",
        "q_floor": 1e-3,
        "reward_source": "surrogate",
    },
    "analyze": {"proxy_task_index": 0, "poison_rate": 0.10, "eval_every": 25, "hft_steps": None},
    "attack": {"task_index": 1, "poison_rates": [0.0, 0.10, 0.20], "epochs": [1, 3, 5]},
    "landscape": {"magnitudes": [0.0, 0.5, 1.0, 2.0, 4.0], "directions": 32, "mode": "random"},
    "report": {"methods": list(METHODS), "poison_rate": 0.10},
    "paths": {"out": "run", "corpus": None, "partition": None, "checkpoints": None, "metrics": None, "reports": None},
}

_SECTION_KEYS = {
    "analyze": {"proxy_task_index", "poison_rate", "eval_every", "hft_steps"},
    "attack": {"task_index", "poison_rates", "epochs"},
    "landscape": {"magnitudes", "directions", "mode"},
    "report": {"methods", "poison_rate"},
    "paths": {"out", "corpus", "partition", "checkpoints", "metrics", "reports"},
}

# stage tags for derived seeds
STAGE_INIT = 1
STAGE_ALIGN = 2
STAGE_ANALYZE = 3
STAGE_ATTACK = 4
STAGE_LANDSCAPE = 5
STAGE_NOISE = 6


def derive_seed(base: int, *keys: int) -> int:
    """Deterministic 63-bit seed from a base seed and integer keys."""
    words = [int(base) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _trainer_keys():
    return {f.name for f in fields(TrainerConfig)}


class RunConfig:
    """Validated, fully-resolved run configuration."""

    def __init__(self, doc: dict | None = None, seed: int | None = None, out: str | None = None):
        doc = dict(doc or {})
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        for sec in ("model", "synth", "align", "hft", "vaa", *_SECTION_KEYS):
            if sec in doc and not isinstance(doc[sec], dict):
                raise ConfigError(f"section {sec!r} must be an object")
        for sec, keys in _SECTION_KEYS.items():
            bad = set(doc.get(sec, {})) - keys
            if bad:
                raise ConfigError(f"unknown keys in {sec}: {sorted(bad)}")
        for sec in ("align", "hft", "vaa"):
            bad = set(doc.get(sec, {})) - _trainer_keys()
            if bad:
                raise ConfigError(f"unknown keys in {sec}: {sorted(bad)}")

        merged = {}
        for k, v in DEFAULTS.items():
            if k in ("synth", "model", "align", "hft", "vaa"):
                merged[k] = dict(v, **doc.get(k, {}))
            elif isinstance(v, dict):
                merged[k] = _merge(v, doc.get(k, {}), f"{k}.")
            else:
                merged[k] = doc.get(k, v)
        if seed is not None:
            merged["seed"] = int(seed)
        if out is not None:
            merged["paths"]["out"] = str(out)
        self.seed = int(merged["seed"])
        merged["synth"]["seed"] = self.seed

        try:
            self.model = ModelSpec.from_dict(merged["model"])
            self.synth = SynthConfig.from_dict(merged["synth"])
            self.align = self._trainer(merged["align"], STAGE_ALIGN)
            self.hft = self._trainer(merged["hft"], STAGE_ANALYZE)
            self.vaa = self._trainer(merged["vaa"], STAGE_ALIGN)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.model.num_classes != NUM_CLASSES:
            raise ConfigError(f"the synthetic tasks use {NUM_CLASSES} classes")
        if self.model.input_dim != self.synth.input_dim:
            raise ConfigError("model.input_dim must equal synth.input_dim")
        if self.align.method != "erm" or self.hft.method != "erm":
            raise ConfigError("align and hft sections must use method 'erm'; pick other methods per command")

        self.analyze = merged["analyze"]
        self.attack = merged["attack"]
        self.landscape = merged["landscape"]
        self.report = merged["report"]
        self.paths = merged["paths"]
        self._validate_sections()
        merged["model"] = self.model.to_dict()
        merged["synth"] = self.synth.to_dict()
        for sec in ("align", "hft", "vaa"):
            merged[sec] = getattr(self, sec).to_dict()
        self.doc = merged

    def _trainer(self, d: dict, stage: int) -> TrainerConfig:
        d = dict(d)
        if isinstance(d.get("perturb"), dict):
            d["perturb"] = PerturbConfig(**d["perturb"])
        d.setdefault("seed", derive_seed(self.seed, stage))
        return TrainerConfig(**d)

    def _validate_sections(self):
        a = self.analyze
        if a["eval_every"] is not None and int(a["eval_every"]) < 1:
            raise ConfigError("analyze.eval_every must be positive")
        if a["hft_steps"] is not None and int(a["hft_steps"]) < 0:
            raise ConfigError("analyze.hft_steps must be non-negative")
        for p in [a["poison_rate"], self.report["poison_rate"], *self.attack["poison_rates"]]:
            if not 0.0 <= float(p) <= 1.0:
                raise ConfigError(f"poison rate {p} outside [0, 1]")
        if not self.attack["epochs"] or any(int(e) < 1 for e in self.attack["epochs"]):
            raise ConfigError("attack.epochs must be positive integers")
        mags = [float(m) for m in self.landscape["magnitudes"]]
        if any(m < 0 for m in mags) or mags != sorted(mags):
            raise ConfigError("landscape.magnitudes must be non-negative and sorted")
        if self.landscape["mode"] not in ("random", "gradient"):
            raise ConfigError("landscape.mode must be 'random' or 'gradient'")
        bad = set(self.report["methods"]) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown report methods: {sorted(bad)}")

    def trainer_for(self, method: str) -> TrainerConfig:
        """Alignment config for a method: ERM uses ``align``, the rest ``vaa``."""
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        if method == "erm":
            return self.align
        d = self.vaa.to_dict()
        d["method"] = method
        d["perturb"] = self.vaa.perturb
        return TrainerConfig(**d)

    def resolve_paths(self, base=None) -> dict:
        """Absolute paths for every artifact root; unset roots derive from ``out``."""
        base = Path(base or Path.cwd())
        out = (base / self.paths["out"]).resolve()

        def pick(key, default):
            v = self.paths[key]
            return str((base / v).resolve()) if v is not None else str(default)

        resolved = {
            "out": str(out),
            "corpus": pick("corpus", out / "gen"),
            "partition": pick("partition", out / "analyze" / "partition.json"),
            "checkpoints": pick("checkpoints", out),
            "metrics": pick("metrics", out),
            "reports": pick("reports", out),
        }
        self.paths = resolved
        self.doc["paths"] = dict(resolved)
        return resolved

    @property
    def init_seed(self) -> int:
        return derive_seed(self.seed, STAGE_INIT)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path, seed: int | None = None, out: str | None = None) -> "RunConfig":
        if path is None:
            return cls({}, seed=seed, out=out)
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls(doc, seed=seed, out=out)
