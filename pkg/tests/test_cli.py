import json
import shutil
import subprocess
import sys

import pytest

from vaalab import cli
from vaalab.diffmodel import load_checkpoint

SMALL = {
    "synth": {"n_majority": 360, "n_minority": 40, "n_finetune": 200},
    "align": {"total_steps": 250},
    "hft": {"total_steps": 125},
    "vaa": {"total_steps": 250},
    "attack": {"epochs": [1, 2]},
    "landscape": {"directions": 4},
    "analyze": {"eval_every": 10},
}

PIPELINE = [
    ["gen"],
    ["align"],
    ["analyze"],
    ["align", "--method", "vaa"],
    ["attack", "--method", "vaa"],
    ["eval", "--method", "vaa"],
    ["landscape"],
    ["report"],
]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    return tmp_path


def run(*argv):
    return cli.main(list(argv) + ["--config", "cfg.json"])


def snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_full_pipeline_and_byte_identical_rerun(workdir, capsys):
    for argv in PIPELINE:
        assert run(*argv) == 0, argv
    out = workdir / "run"
    first = snapshot(out)
    for stage in ("gen", "align-erm", "analyze", "align-vaa", "attack-vaa", "eval-vaa", "landscape-erm", "report"):
        echo = json.loads((out / stage / "effective_config.json").read_text())
        assert echo["synth"]["n_majority"] == 360 and echo["paths"]["out"] == str(out)
    assert sorted(p.name for p in (out / "gen").glob("*.corpus")) == ["alignment.corpus", "finetune.corpus"]
    assert len((out / "align-erm" / "metrics.jsonl").read_text().splitlines()) == 250
    assert len(list((out / "attack-vaa").glob("p*/checkpoint.vaa"))) == 3
    methods = (out / "report" / "methods.csv").read_text().splitlines()
    assert methods[0].split(",")[:4] == ["method", "poison_rate", "harm_analog", "accuracy"]
    assert [r.split(",")[0] for r in methods[1:]] == ["vaa", "erm", "vuln-only", "invuln-only", "importance"]
    for g in ("vulnerable", "invulnerable"):
        assert (out / "landscape-erm" / f"{g}.csv").read_text().startswith("magnitude,mean_delta,std_delta\n")
    part = json.loads((out / "analyze" / "partition.json").read_text())
    assert part["vulnerable"]
    spec, _ = load_checkpoint(out / "align-vaa" / "checkpoint.vaa")
    assert spec.layout_id == "linear-softmax/d16/k4"

    for argv in PIPELINE:
        assert run(*argv, "--force") == 0
    assert snapshot(out) == first


def test_clobber_and_config_errors(workdir, capsys):
    assert run("gen") == 0
    assert run("gen") == cli.EXIT_CLOBBER
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("vaalab: E_CLOBBER:")
    (workdir / "bad.json").write_text(json.dumps({"seed": 1, "surprise": True}))
    assert cli.main(["gen", "--config", "bad.json", "--out", "other"]) == cli.EXIT_CONFIG
    assert not (workdir / "other").exists()
    assert capsys.readouterr().err.startswith("vaalab: E_CONFIG:")


def test_grouped_alignment_needs_partition(workdir, capsys):
    assert run("gen") == 0
    assert run("align", "--method", "vaa") == cli.EXIT_CONFIG
    assert "partition" in capsys.readouterr().err
    assert not (workdir / "run" / "align-vaa").exists()


def test_zero_step_analysis_warns(workdir, capsys):
    assert run("gen") == 0 and run("align") == 0
    capsys.readouterr()
    assert run("analyze", "--hft-steps", "0") == 0
    assert "warning" in capsys.readouterr().err
    part = json.loads((workdir / "run" / "analyze" / "partition.json").read_text())
    assert part["vulnerable"] == []
    assert run("align", "--method", "vaa") == cli.EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort(workdir, capsys):
    doc = dict(SMALL, align={"total_steps": 50, "eta_theta": 1e308})
    (workdir / "cfg.json").write_text(json.dumps(doc))
    assert run("gen") == 0
    assert run("align") == cli.EXIT_NUMERIC
    assert capsys.readouterr().err.startswith("vaalab: E_NUMERIC:")


def test_seed_flag_changes_outputs(workdir):
    assert run("gen") == 0
    assert run("gen", "--seed", "5", "--out", "s5") == 0
    a = (workdir / "run" / "gen" / "alignment.corpus").read_bytes()
    b = (workdir / "s5" / "gen" / "alignment.corpus").read_bytes()
    assert a != b


def test_stale_corpus_rejected(workdir, capsys):
    assert run("gen") == 0
    assert cli.main(["align", "--seed", "3"]) == cli.EXIT_CONFIG
    assert "different synth config" in capsys.readouterr().err


def test_console_entry_point(workdir):
    exe = shutil.which("vaalab")
    cmd = [exe] if exe else [sys.executable, "-m", "vaalab.cli"]
    proc = subprocess.run(cmd + ["gen", "--config", "nope.json"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("vaalab: E_CONFIG:")
