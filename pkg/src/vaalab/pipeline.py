"""Pipeline stages shared by the CLI and the benchmark tests.

Everything here is a pure function of a :class:`RunConfig` (plus explicit
overrides); the CLI adds file I/O around it.
"""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from . import diffmodel, forgetlab, synthdata
from .config import STAGE_ATTACK, STAGE_LANDSCAPE, STAGE_NOISE, RunConfig, derive_seed
from .diffmodel import Batch
from .errors import NumericError
from .trainer import GroupedDataset, evaluate, train


def alignment_corpus(cfg: RunConfig, split="train") -> synthdata.LabeledCorpus:
    return synthdata.gen_alignment_task(cfg.synth, split)


def finetune_config(cfg: RunConfig, poison_rate: float, task_index: int) -> synthdata.SynthConfig:
    return replace(cfg.synth, poison_rate=float(poison_rate), task_index=int(task_index))


def finetune_corpus(cfg: RunConfig, poison_rate: float, task_index: int, split="train"):
    return synthdata.gen_finetune_task(finetune_config(cfg, poison_rate, task_index), split)


def cluster_groups(corpus: synthdata.LabeledCorpus) -> GroupedDataset:
    """Ground-truth majority/minority split of an alignment corpus."""
    names = tuple(dict.fromkeys(corpus.clusters))
    return GroupedDataset(tuple(corpus.by_cluster(n) for n in names), names)


def init_params(cfg: RunConfig) -> np.ndarray:
    return diffmodel.init_params(cfg.model, cfg.init_seed)


def align(cfg: RunConfig, method: str, alignment: Batch, part=None, init=None):
    """Train from the shared initialization with the given method."""
    tcfg = cfg.trainer_for(method)
    theta0 = init_params(cfg) if init is None else init
    if method == "erm":
        return train(cfg.model, theta0, alignment, tcfg)
    data = forgetlab.grouped_dataset(alignment, part)
    return train(cfg.model, theta0, data, tcfg)


def analyze(cfg: RunConfig, aligned_params, alignment: Batch, proxy: Batch | None = None,
            hft_steps: int | None = None, task_index: int | None = None,
            poison_rate: float | None = None):
    """Simulated fine-tuning on the proxy task; returns the forgetting record."""
    a = cfg.analyze
    if proxy is None:
        proxy = finetune_corpus(
            cfg,
            a["poison_rate"] if poison_rate is None else poison_rate,
            a["proxy_task_index"] if task_index is None else task_index,
        ).examples
    steps = a["hft_steps"] if hft_steps is None else hft_steps
    record, _ = forgetlab.simulate_hft(
        cfg.model, aligned_params, proxy, alignment, cfg.hft, eval_every=a["eval_every"], total_steps=steps
    )
    return record


def noisy_partition(cfg: RunConfig, part, fraction: float):
    rng = np.random.default_rng(derive_seed(cfg.seed, STAGE_NOISE))
    return forgetlab.swap_noise(part, fraction, rng)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def attack(cfg: RunConfig, params, poison_rate: float, epochs=None, sweep_index: int = 0,
           safety_eval: Batch | None = None):
    """Harmful fine-tuning of an aligned model.

    The batch sequence depends only on the run seed and ``sweep_index``, so
    every aligned model sees the same attack. Returns the final parameters
    and one row per requested epoch with harm analog and fine-tune accuracy.
    """
    epochs = sorted(int(e) for e in (epochs or cfg.attack["epochs"]))
    task = cfg.attack["task_index"]
    train_set = finetune_corpus(cfg, poison_rate, task).examples
    test_set = finetune_corpus(cfg, poison_rate, task, split="test").examples
    benign_test = test_set.take(np.flatnonzero(~test_set.safety_flags))
    if safety_eval is None:
        safety_eval = alignment_corpus(cfg, "test").examples
    hft = replace(cfg.hft, seed=derive_seed(cfg.seed, STAGE_ATTACK, sweep_index))
    per_epoch = steps_per_epoch(len(train_set), hft.batch_size)
    rng = np.random.default_rng(hft.seed)
    theta = np.array(params, dtype=np.float64)
    rows = []
    n = len(train_set)
    done = 0
    for target in epochs:
        for _ in range((target - done) * per_epoch):
            batch = train_set.take(rng.integers(0, n, size=hft.batch_size))
            _, g = diffmodel.loss_and_grad(cfg.model, theta, batch)
            theta -= hft.eta_theta * g
        done = target
        if not np.isfinite(theta).all():
            raise NumericError("attack diverged", step=done * per_epoch)
        ev = evaluate(cfg.model, theta, benign_test, safety_eval)
        rows.append(
            {
                "poison_rate": float(poison_rate),
                "epochs": target,
                "steps": done * per_epoch,
                "harm_analog": ev["harm_analog"],
                "finetune_accuracy": ev["accuracy"],
            }
        )
    return theta, rows


def evaluate_alignment(cfg: RunConfig, params) -> dict:
    """Post-alignment metrics on the held-out alignment split, per cluster."""
    test = alignment_corpus(cfg, "test")
    groups = cluster_groups(test)
    ev = evaluate(cfg.model, params, groups, test.examples)
    ev["worst_group_loss"] = max(ev["per_group_loss"].values())
    return ev


def landscape(cfg: RunConfig, params, alignment: Batch, part) -> dict:
    data = {
        "vulnerable": alignment.select_ids(part.vulnerable_ids),
        "invulnerable": alignment.select_ids(part.invulnerable_ids),
    }
    data = {k: v for k, v in data.items() if len(v)}
    ls = cfg.landscape
    rng = np.random.default_rng(derive_seed(cfg.seed, STAGE_LANDSCAPE))
    return forgetlab.landscape_probe(
        cfg.model, params, data, ls["magnitudes"], ls["directions"], ls["mode"], rng
    )


def method_comparison(cfg: RunConfig, methods, part, alignment: Batch | None = None,
                      poison_rate: float = 0.10) -> dict:
    """Align with each method, evaluate, then attack at ``poison_rate``.

    The alignment init, batch streams and attack stream are shared across
    methods, so differences come from the method alone.
    """
    if alignment is None:
        alignment = alignment_corpus(cfg).examples
    safety_eval = alignment_corpus(cfg, "test").examples
    out = {}
    for method in methods:
        theta, metrics = align(cfg, method, alignment, part)
        ev = evaluate_alignment(cfg, theta)
        _, rows = attack(cfg, theta, poison_rate, sweep_index=0, safety_eval=safety_eval)
        final = rows[-1]
        out[method] = {
            "params": theta,
            "worst_group_loss": ev["worst_group_loss"],
            "per_group_loss": ev["per_group_loss"],
            "aligned_accuracy": ev["accuracy"],
            "harm_analog": final["harm_analog"],
            "finetune_accuracy": final["finetune_accuracy"],
            "backward_passes": metrics.total_backward_passes,
            "attack_rows": rows,
        }
    return out


def standard_analysis(cfg: RunConfig):
    """ERM alignment followed by proxy analysis; returns (erm params, record, partition)."""
    alignment = alignment_corpus(cfg).examples
    theta, _ = align(cfg, "erm", alignment)
    record = analyze(cfg, theta, alignment)
    part = forgetlab.partition(record, source=partition_source(cfg))
    return theta, record, part


def partition_source(cfg: RunConfig, hft_steps=None) -> dict:
    a = cfg.analyze
    steps = a["hft_steps"] if hft_steps is None else hft_steps
    return {
        "seed": cfg.seed,
        "proxy_task_index": a["proxy_task_index"],
        "poison_rate": a["poison_rate"],
        "eval_every": a["eval_every"],
        "hft_steps": cfg.hft.total_steps if steps is None else int(steps),
    }
