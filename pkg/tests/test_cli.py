import json
import os

import numpy as np
import pytest

from nmfrlct import cli
from nmfrlct.model import NumericalError, read_dataset_jsonl

SUBCOMMANDS = ["generate", "gibbs", "vb", "coefficients", "experiment", "select"]
FAST_GIBBS = ["--burn-in", "100", "--thin", "2", "--K", "30"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("NMFRLCT_JOBS", "1")
    monkeypatch.delenv("NMFRLCT_OUTDIR", raising=False)
    return tmp_path


def _unit_truth(path, u=1.0, v=1.0):
    (path / "u.csv").write_text(f"{u}\n")
    (path / "v.csv").write_text(f"{v}\n")
    return ["--M", "1", "--N", "1", "--H", "1", "--H0", "1", "--truth-u", "u.csv", "--truth-v", "v.csv"]


def _artifacts(outdir):
    return {p: open(os.path.join(outdir, p), "rb").read() for p in sorted(os.listdir(outdir))
            if p not in cli.NONDETERMINISTIC}


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_documents_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([cmd, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--manifest", "--M", "--H0"):
        assert flag in text
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        if action.help is None and action.option_strings:
            pytest.fail(f"{cmd} {action.option_strings} has no help text")


def test_unknown_flag_is_error(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["vb", "--bogus", "1"])
    assert exc.value.code == 2


def test_generate_small(workdir):
    flags = _unit_truth(workdir)
    assert cli.main(["generate", *flags, "--n", "3", "--out", "a"]) == 0
    assert len((workdir / "a" / "data.jsonl").read_text().splitlines()) == 3
    assert cli.main(["generate", *flags, "--n", "3", "--out", "b"]) == 0
    assert _artifacts("a") == _artifacts("b")
    man = json.loads((workdir / "a" / "manifest.json").read_text())
    assert man["subcommand"] == "generate" and man["artifacts"] == ["data.jsonl", "truth_U.csv", "truth_V.csv"]
    assert man["seeds"]["data"] == 0 and "started" in man and "finished" in man


def test_generate_moments(workdir):
    flags = _unit_truth(workdir, 2.0, 2.0)
    assert cli.main(["generate", *flags, "--n", "10000", "--seed", "4", "--out", "g"]) == 0
    x = read_dataset_jsonl(workdir / "g" / "data.jsonl").observations
    assert abs(x.mean() - 4.0) < 4 * 0.02


def test_coefficients_reference_values(workdir, capsys):
    assert cli.main(["coefficients", "--phi-u", "0.5", "--phi-v", "0.5"]) == 0
    out = capsys.readouterr().out
    assert "lambda_vb         8" in out and "lambda_upper      9/2" in out
    assert not (workdir / "manifest.json").exists()
    assert cli.main(["coefficients", "--phi-u", "1/4", "--phi-v", "1/4", "--out", "c"]) == 0
    doc = json.loads((workdir / "c" / "coefficients.json").read_text())
    assert doc["lambda_vb"]["exact"] == "6" and doc["lambda_upper"]["exact"] == "4"


def test_output_dir_from_environment(workdir, monkeypatch):
    monkeypatch.setenv("NMFRLCT_OUTDIR", str(workdir / "envout"))
    assert cli.main(["generate", "--n", "2"]) == 0
    assert (workdir / "envout" / "data.jsonl").exists()


def _run_all(workdir):
    """Run every subcommand once; returns {outdir: subcommand}."""
    assert cli.main(["generate", "--n", "60", "--seed", "3", "--out", "gen"]) == 0
    data = ["--data", "gen/data.jsonl"]
    assert cli.main(["gibbs", *data, *FAST_GIBBS, "--seed", "5", "--out", "gib"]) == 0
    assert cli.main(["gibbs", *data, *FAST_GIBBS, "--draws", "summary", "--out", "gsum"]) == 0
    assert cli.main(["vb", *data, "--restarts", "2", "--out", "vbo"]) == 0
    assert cli.main(["coefficients", "--phi-u", "2", "--out", "coef"]) == 0
    assert cli.main(["experiment", "--n", "40", "--n-test", "400", "--D", "3", *FAST_GIBBS, "--out", "exp"]) == 0
    assert cli.main(["select", *data, "--ranks", "0 1 2", "--restarts", "2", "--out", "sel"]) == 0
    return {"gen": "generate", "gib": "gibbs", "gsum": "gibbs", "vbo": "vb", "coef": "coefficients",
            "exp": "experiment", "sel": "select"}


def test_manifest_replay_is_bitwise(workdir):
    runs = _run_all(workdir)
    assert (workdir / "gib" / "draws.jsonl").exists()
    assert (workdir / "gsum" / "posterior_summary.json").exists()
    assert sorted(_artifacts("exp")) == ["replicates.csv", "result.json", "summary.txt",
                                         "truth_U.csv", "truth_V.csv"]
    assert len((workdir / "exp" / "timings.csv").read_text().splitlines()) == 4
    for out, cmd in runs.items():
        assert cli.main([cmd, "--manifest", f"{out}/manifest.json", "--out", f"{out}_again"]) == 0
        assert _artifacts(out) == _artifacts(f"{out}_again"), cmd


def test_manifest_subcommand_mismatch(workdir, capsys):
    assert cli.main(["generate", "--n", "2", "--out", "g"]) == 0
    assert cli.main(["vb", "--manifest", "g/manifest.json"]) == 2
    assert "records 'generate'" in capsys.readouterr().err


def test_config_file_errors_exit_2(workdir, capsys):
    (workdir / "bad.ini").write_text("[gibbs]\nthin = often\n")
    assert cli.main(["gibbs", "--config", "bad.ini", "--data", "x.jsonl"]) == 2
    assert "bad.ini" in capsys.readouterr().err
    assert cli.main(["vb", "--data", "missing.jsonl"]) == 2
    (workdir / "d.jsonl").write_text("[[1,2]]\n[[1]]\n")
    assert cli.main(["vb", "--M", "1", "--N", "2", "--data", "d.jsonl"]) == 2
    assert "d.jsonl:2" in capsys.readouterr().err
    assert cli.main(["gibbs", "--data", "d.jsonl"]) == 2  # default M=N=4 mismatch
    assert cli.main(["gibbs"]) == 2  # no dataset


def test_numerical_failure_exit_3(workdir, monkeypatch, capsys):
    def boom(cfg, out):
        raise NumericalError("replicate 4: degenerate allocation")

    monkeypatch.setitem(cli.COMMANDS, "vb", boom)
    assert cli.main(["vb", "--data", "x.jsonl"]) == 3
    assert "replicate 4" in capsys.readouterr().err


def test_experiment_preset_is_resolved(workdir, monkeypatch):
    seen = {}

    def fake(cfg, out, jobs=None):
        seen.update(cfg=cfg, jobs=jobs)
        return []

    monkeypatch.setattr(cli, "cmd_experiment", fake)
    assert cli.main(["experiment", "--preset", "table1_row1", "--D", "2", "--jobs", "3"]) == 0
    cfg = seen["cfg"]
    assert cfg["prior"]["phi_u"] == "0.25" and cfg["gibbs"]["K"] == 1000 and cfg["experiment"]["D"] == 2
    assert cfg["data"]["n_test"] == 50_000 and seen["jobs"] == 3


def test_select_recovers_true_rank(workdir):
    picks = []
    for trial in range(10):
        out = f"t{trial}"
        assert cli.main(["generate", "--n", "1000", "--seed", str(trial), "--truth-seed", str(trial),
                         "--out", out]) == 0
        assert cli.main(["select", "--data", f"{out}/data.jsonl", "--ranks", "0 1 2",
                         "--vb-seed", str(trial), "--out", out]) == 0
        picks.append(json.loads((workdir / out / "selection.json").read_text())["selected"])
    assert picks.count(1) > 5, picks
