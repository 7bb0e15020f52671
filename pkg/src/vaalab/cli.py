"""Command-line driver: ``vaalab <verb> [--config PATH] [--seed N] [--out DIR] [--force]``.

Each verb writes one directory of artifacts plus ``effective_config.json``
(reloadable with ``--config``) and ``stage.json`` (verb-specific options).
Exit codes: 0 ok, 2 config/input error, 3 would clobber, 4 numeric abort.
Errors go to stderr as one line: ``vaalab: E_<KIND>: <text>``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
from pathlib import Path

from . import diffmodel, forgetlab, pipeline, synthdata
from .config import RunConfig
from .errors import ConfigError, FormatError, NumericError
from .trainer import METHODS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CLOBBER = 3
EXIT_NUMERIC = 4

ALIGN_CORPUS = "alignment.corpus"
FINETUNE_CORPUS = "finetune.corpus"
CHECKPOINT = "checkpoint.vaa"


class Clobber(Exception):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _rows_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if r[h] is None else (repr(r[h]) if isinstance(r[h], float) else r[h]) for h in header])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _stage_dir(root, name: str, force: bool) -> Path:
    d = Path(root) / name
    if d.exists() and any(d.iterdir()):
        if not force:
            raise Clobber(f"{d} already exists; pass --force to overwrite")
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo(d: Path, cfg: RunConfig, verb: str, **options) -> None:
    (d / "effective_config.json").write_text(cfg.to_json(), encoding="utf-8")
    _dump_json(d / "stage.json", {"verb": verb, "options": options})


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing input {path} ({hint})")
    return path


def _load_corpora(cfg):
    gen = Path(cfg.paths["corpus"])
    align = synthdata.read_corpus(_need(gen / ALIGN_CORPUS, "run 'vaalab gen' first"))
    proxy = synthdata.read_corpus(_need(gen / FINETUNE_CORPUS, "run 'vaalab gen' first"))
    if align.metadata.get("config") != cfg.synth.to_dict():
        raise ConfigError(f"{gen / ALIGN_CORPUS} was generated from a different synth config; rerun gen")
    return align, proxy


def _load_partition(cfg) -> forgetlab.GroupPartition:
    path = _need(Path(cfg.paths["partition"]), "run 'vaalab analyze' first or set paths.partition")
    try:
        return forgetlab.GroupPartition.from_json(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _load_aligned(cfg, method: str):
    path = _need(Path(cfg.paths["checkpoints"]) / f"align-{method}" / CHECKPOINT,
                 f"run 'vaalab align --method {method}' first")
    spec, params = diffmodel.load_checkpoint(path)
    if spec != cfg.model:
        raise ConfigError(f"{path} holds a {spec.layout_id} model, config wants {cfg.model.layout_id}")
    return params


def _maybe_noisy(cfg, part, noise):
    if noise:
        if not 0.0 <= noise <= 1.0:
            raise ConfigError("--partition-noise must lie in [0, 1]")
        part = pipeline.noisy_partition(cfg, part, noise)
    return part


# -- verbs ------------------------------------------------------------------


def cmd_gen(cfg, args):
    corpus = Path(cfg.paths["corpus"])
    d = _stage_dir(corpus.parent, corpus.name, args.force)
    a = cfg.analyze
    synthdata.write_corpus(d / ALIGN_CORPUS, pipeline.alignment_corpus(cfg))
    synthdata.write_corpus(
        d / FINETUNE_CORPUS, pipeline.finetune_corpus(cfg, a["poison_rate"], a["proxy_task_index"])
    )
    _dump_json(d / "synth_config.json", {"generator_version": synthdata.GENERATOR_VERSION,
                                         "synth": cfg.synth.to_dict()})
    _echo(d, cfg, "gen")
    return d


def cmd_align(cfg, args):
    method = args.method or "erm"
    part = None
    if method != "erm":
        part = _maybe_noisy(cfg, _load_partition(cfg), args.partition_noise)
    align, _ = _load_corpora(cfg)
    d = _stage_dir(cfg.paths["checkpoints"], f"align-{method}", args.force)
    params, metrics = pipeline.align(cfg, method, align.examples, part)
    metrics.summary["evaluation"] = pipeline.evaluate_alignment(cfg, params)
    diffmodel.save_checkpoint(d / CHECKPOINT, cfg.model, params)
    metrics.write(d / "metrics.jsonl")
    metrics.write_summary(d / "summary.json")
    if part is not None:
        (d / "partition.json").write_text(part.to_json(), encoding="utf-8")
    _echo(d, cfg, "align", method=method, partition_noise=args.partition_noise)
    return d


def cmd_analyze(cfg, args):
    align, proxy = _load_corpora(cfg)
    params = _load_aligned(cfg, "erm")
    part_path = Path(cfg.paths["partition"])
    d = _stage_dir(Path(cfg.paths["metrics"]), "analyze", args.force)
    record = pipeline.analyze(cfg, params, align.examples, proxy=proxy.examples, hft_steps=args.hft_steps)
    part = forgetlab.partition(record, source=pipeline.partition_source(cfg, args.hft_steps))
    if not part.vulnerable_ids:
        print("vaalab: warning: no example was forgotten; the vulnerable group is empty", file=sys.stderr)
    (d / "forgetting.csv").write_text(record.to_csv(), encoding="utf-8")
    summary = record.summary()
    clusters = {}
    fn = record.forgot_nums()
    for name in dict.fromkeys(align.clusters):
        mask = align.cluster_mask(name)
        clusters[name] = {"mean_forgot_num": float(fn[mask].mean()), "forgetting_rate": float((fn[mask] > 0).mean())}
    summary["by_cluster"] = clusters
    summary["vulnerable"] = len(part.vulnerable_ids)
    summary["invulnerable"] = len(part.invulnerable_ids)
    _dump_json(d / "forgetting_summary.json", summary)
    part_path.parent.mkdir(parents=True, exist_ok=True)
    part_path.write_text(part.to_json(), encoding="utf-8")
    if part_path.parent != d:
        (d / "partition.json").write_text(part.to_json(), encoding="utf-8")
    _echo(d, cfg, "analyze", hft_steps=args.hft_steps)
    return d


def cmd_attack(cfg, args):
    method = args.method or "erm"
    params = _load_aligned(cfg, method)
    d = _stage_dir(Path(cfg.paths["metrics"]), f"attack-{method}", args.force)
    safety = pipeline.alignment_corpus(cfg, "test").examples
    rows = []
    for i, p in enumerate(cfg.attack["poison_rates"]):
        theta, r = pipeline.attack(cfg, params, p, sweep_index=i, safety_eval=safety)
        sub = d / f"p{float(p):g}"
        sub.mkdir()
        diffmodel.save_checkpoint(sub / CHECKPOINT, cfg.model, theta)
        rows += r
    (d / "metrics.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    _rows_csv(d / "harm.csv", ["poison_rate", "epochs", "steps", "harm_analog", "finetune_accuracy"], rows)
    _echo(d, cfg, "attack", method=method)
    return d


def cmd_eval(cfg, args):
    method = args.method or "erm"
    params = _load_aligned(cfg, method)
    d = _stage_dir(Path(cfg.paths["metrics"]), f"eval-{method}", args.force)
    ev = pipeline.evaluate_alignment(cfg, params)
    _dump_json(d / "eval.json", ev)
    _rows_csv(d / "per_group_loss.csv", ["group", "loss"],
              [{"group": k, "loss": v} for k, v in ev["per_group_loss"].items()])
    _echo(d, cfg, "eval", method=method)
    return d


def cmd_landscape(cfg, args):
    method = args.method or "erm"
    params = _load_aligned(cfg, method)
    part = _load_partition(cfg)
    align, _ = _load_corpora(cfg)
    d = _stage_dir(Path(cfg.paths["metrics"]), f"landscape-{method}", args.force)
    curves = pipeline.landscape(cfg, params, align.examples, part)
    for name, curve in curves.items():
        (d / f"{name}.csv").write_text(forgetlab.landscape_csv(curve), encoding="utf-8")
    _echo(d, cfg, "landscape", method=method)
    return d


def cmd_report(cfg, args):
    part = _maybe_noisy(cfg, _load_partition(cfg), args.partition_noise)
    align, _ = _load_corpora(cfg)
    methods = cfg.report["methods"]
    d = _stage_dir(Path(cfg.paths["reports"]), "report", args.force)
    p_ref = cfg.report["poison_rate"]
    safety = pipeline.alignment_corpus(cfg, "test").examples
    main_rows, sweep_rows = [], []
    for method in methods:
        theta, metrics = pipeline.align(cfg, method, align.examples, part)
        ev = pipeline.evaluate_alignment(cfg, theta)
        ref = None
        for i, p in enumerate(cfg.attack["poison_rates"]):
            _, rows = pipeline.attack(cfg, theta, p, sweep_index=i, safety_eval=safety)
            for r in rows:
                sweep_rows.append(dict(r, method=method))
            if float(p) == float(p_ref):
                ref = rows[-1]
        if ref is None:
            _, rows = pipeline.attack(cfg, theta, p_ref, sweep_index=len(cfg.attack["poison_rates"]),
                                      safety_eval=safety)
            ref = rows[-1]
        main_rows.append(
            {
                "method": method,
                "poison_rate": float(p_ref),
                "harm_analog": ref["harm_analog"],
                "accuracy": ref["finetune_accuracy"],
                "aligned_accuracy": ev["accuracy"],
                "worst_group_loss": ev["worst_group_loss"],
                "backward_passes": metrics.total_backward_passes,
            }
        )
    _rows_csv(d / "methods.csv", list(main_rows[0]), main_rows)
    _rows_csv(d / "sweep.csv", ["method", "poison_rate", "epochs", "steps", "harm_analog", "finetune_accuracy"],
              sweep_rows)
    _echo(d, cfg, "report", partition_noise=args.partition_noise)
    return d


VERBS = {
    "gen": cmd_gen,
    "align": cmd_align,
    "analyze": cmd_analyze,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output root (overrides paths.out)")
    common.add_argument("--force", action="store_true", help="overwrite an existing stage directory")

    ap = argparse.ArgumentParser(prog="vaalab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen", parents=[common], help="write alignment and proxy fine-tune corpora")
    p = sub.add_parser("align", parents=[common], help="align a model (erm or a grouped method)")
    p.add_argument("--method", choices=METHODS, default="erm")
    p.add_argument("--partition-noise", type=float, default=0.0, metavar="F",
                   help="swap this fraction of the smaller group's ids before training")
    p = sub.add_parser("analyze", parents=[common], help="forgetting analysis and vulnerability partition")
    p.add_argument("--hft-steps", type=int, metavar="N", help="override the simulated fine-tuning length")
    for verb, text in (("attack", "harmful fine-tuning sweep over poison rates and epochs"),
                       ("eval", "evaluate an aligned checkpoint"),
                       ("landscape", "loss-landscape probe per group")):
        p = sub.add_parser(verb, parents=[common], help=text)
        p.add_argument("--method", choices=METHODS, default="erm", help="which aligned checkpoint to use")
    p = sub.add_parser("report", parents=[common], help="method comparison tables")
    p.add_argument("--partition-noise", type=float, default=0.0, metavar="F")
    return ap


def _fail(kind: str, code: int, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"vaalab: E_{kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("method", "partition_noise", "hft_steps"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
        cfg.resolve_paths()
        if args.hft_steps is not None and args.hft_steps < 0:
            raise ConfigError("--hft-steps must be non-negative")
        d = VERBS[args.verb](cfg, args)
    except (ConfigError, FormatError) as exc:
        return _fail("CONFIG", EXIT_CONFIG, exc)
    except Clobber as exc:
        return _fail("CLOBBER", EXIT_CLOBBER, exc)
    except NumericError as exc:
        return _fail("NUMERIC", EXIT_NUMERIC, exc)
    print(d)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
