import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from fmdebias import cli, model
from fmdebias.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main

ADULT_DIR = os.environ.get("FMDEBIAS_ADULT_DIR")

SMALL = """\
[run]
seed = 0
workdir = {workdir}

[data]
classes = 3
color_count = 4
feature_dim = 6
n_train = 300
n_test = 120
pairs = 40
bias_ratio = 0.95

[train]
l2 = 5

[unlearn]
k = 30
"""

STRATEGIES = ("external-pairs", "topk-removal", "counterfactual-replacement")


def _setup(tmp_path, text=SMALL, name="run"):
    work = tmp_path / name
    work.mkdir()
    cfg = work / "run.ini"
    cfg.write_text(text.format(workdir=work))
    return work, cfg


def _pipeline(cfg, *extra):
    for cmd in ("gen", "train", "audit", "influence"):
        assert main([cmd, "-c", str(cfg), *extra]) == EXIT_OK
    for strategy in STRATEGIES:
        assert main(["unlearn", "-c", str(cfg), "--set", f"unlearn.strategy={strategy}", *extra]) == EXIT_OK


def test_full_pipeline(tmp_path, capsys):
    work, cfg = _setup(tmp_path)
    _pipeline(cfg)
    out = capsys.readouterr().out
    assert "converged: true" in out
    assert "aligned fraction:" in out
    manifest = json.loads((work / "manifest.json").read_text())
    assert abs(manifest["aligned_fraction"] - 0.95) < 0.05
    assert set(manifest["phases"]) >= {"gen", "train", "audit", "influence", "unlearn-external-pairs"}
    for strategy in STRATEGIES:
        summary = json.loads((work / f"outcome-{strategy}.json").read_text())
        assert summary["bias_after"] < summary["bias_before"]
        assert "seconds" not in summary
        assert (work / f"curve-{strategy}.csv").exists()
    audit = (work / "audit.txt").read_text()
    assert audit.startswith("metric: counterfactual")


def test_reruns_are_byte_identical(tmp_path):
    runs = []
    for name in ("a", "b"):
        work, cfg = _setup(tmp_path, name=name)
        _pipeline(cfg, "--set", "run.workdir=" + str(work))
        runs.append(work)
    a, b = runs
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["checksums"] == mb["checksums"]
    names = ["head.json", "scores.csv", "audit.txt"]
    names += [f"{kind}-{s}.{ext}" for s in STRATEGIES
              for kind, ext in (("outcome", "json"), ("curve", "csv"), ("head", "json"))]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_zero_step_keeps_checkpoint(tmp_path):
    work, cfg = _setup(tmp_path)
    for cmd in ("gen", "train"):
        assert main([cmd, "-c", str(cfg)]) == EXIT_OK
    assert main(["unlearn", "-c", str(cfg), "--set", "unlearn.step_scale=0"]) == EXIT_OK
    before = model.load_head(work / "head.json")
    after = model.load_head(work / "head-external-pairs.json")
    np.testing.assert_array_equal(before.theta, after.theta)


def test_topk_without_scores_fails(tmp_path, capsys):
    work, cfg = _setup(tmp_path)
    for cmd in ("gen", "train"):
        main([cmd, "-c", str(cfg)])
    code = main(["unlearn", "-c", str(cfg), "--set", "unlearn.strategy=topk-removal"])
    assert code == EXIT_INPUT
    assert "scores.csv" in capsys.readouterr().err


def test_unknown_key_is_rejected(tmp_path, capsys):
    work, cfg = _setup(tmp_path, SMALL + "\n[audit]\nlearning_rate = 3\n")
    assert main(["gen", "-c", str(cfg)]) == EXIT_INPUT
    assert "audit.learning_rate" in capsys.readouterr().err
    assert main(["gen", "-c", str(cfg), "--set", "bogus.key=1"]) == EXIT_INPUT


def test_missing_inputs(tmp_path):
    assert main(["gen", "-c", str(tmp_path / "none.ini")]) == EXIT_INPUT
    work, cfg = _setup(tmp_path)
    assert main(["train", "-c", str(cfg)]) == EXIT_INPUT
    assert main(["gen", "-c", str(cfg), "--set", "run.workdir=" + str(tmp_path / "absent")]) == EXIT_INPUT
    assert main(["gen", "-c", str(cfg), "--set", "data.bias_ratio=high"]) == EXIT_INPUT


def test_solver_failure_exit_code(tmp_path, capsys):
    work, cfg = _setup(tmp_path)
    for cmd in ("gen", "train"):
        main([cmd, "-c", str(cfg)])
    code = main(["influence", "-c", str(cfg), "--set", "solve.method=conjugate-gradient",
                 "--set", "solve.cg_max_iters=1", "--set", "solve.cg_tol=1e-14"])
    assert code == EXIT_NUMERICAL
    assert "residual" in capsys.readouterr().err


def test_report_table(tmp_path, capsys):
    work, cfg = _setup(tmp_path)
    _pipeline(cfg)
    paths = [str(work / f"outcome-{s}.json") for s in STRATEGIES]
    assert main(["report", *paths, "-o", str(tmp_path / "table.csv")]) == EXIT_OK
    header = capsys.readouterr().out.splitlines()[-4].split()
    assert header == list(cli.REPORT_COLUMNS)
    with (tmp_path / "table.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["strategy"] for r in rows] == list(STRATEGIES)
    assert all(float(r["time_s"]) >= 0 for r in rows)
    assert main(["report", str(work / "manifest.json")]) == EXIT_INPUT


def test_group_metrics_and_cg(tmp_path):
    work, cfg = _setup(tmp_path)
    for cmd in ("gen", "train"):
        main([cmd, "-c", str(cfg)])
    sets = ["--set", "audit.metrics=counterfactual,demographic-parity,equal-opportunity",
            "--set", "audit.positive=0"]
    assert main(["audit", "-c", str(cfg), *sets]) == EXIT_OK
    reports = json.loads((work / "audit.json").read_text())
    assert [r["metric"] for r in reports] == ["counterfactual", "demographic-parity", "equal-opportunity"]
    assert main(["influence", "-c", str(cfg), *sets, "--set", "influence.metric=demographic-parity",
                 "--set", "solve.method=conjugate-gradient"]) == EXIT_OK


def test_preset_fills_defaults():
    cfg = cli.RunConfig.load(overrides=["run.preset=toy"])
    assert cfg["data"]["classes"] == 2 and cfg["train"]["l2"] == 100.0 and cfg["data"]["pairs"] == 50
    cfg = cli.RunConfig.load(overrides=["run.preset=toy", "train.l2=3"])
    assert cfg["train"]["l2"] == 3.0


def test_csv_source(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["income,hours,sector,gender,label"]
    for _ in range(80):
        g = rng.integers(2)
        hours = rng.normal(40 + 5 * g, 5)
        lines.append(f"{rng.normal():.4f},{hours:.3f},{rng.choice(['a', 'b'])},{'mf'[g]},"
                     f"{'yn'[int(hours + rng.normal(0, 3) > 42)]}")
    (tmp_path / "people.csv").write_text("\n".join(lines) + "\n")
    text = f"""\
[run]
workdir = {{workdir}}

[data]
source = csv
csv_path = {tmp_path / 'people.csv'}
feature_columns = income,hours,sector
attribute_column = gender
label_column = label
standardize = true
pairs = 10

[encodings]
sector = a:0,b:1
gender = m:0,f:1
label = n:0,y:1

[train]
l2 = 1

[unlearn]
k = 10
"""
    work, cfg = _setup(tmp_path, text)
    _pipeline(cfg)
    meta = json.loads((work / "data" / "meta.json").read_text())
    assert meta["provenance"] == "tabular-flip"


@pytest.mark.skipif(not ADULT_DIR, reason="FMDEBIAS_ADULT_DIR not set")
def test_adult_source(tmp_path):
    root = Path(ADULT_DIR)
    text = f"""\
[run]
workdir = {{workdir}}

[data]
source = adult
csv_path = {root / 'adult.data'}
csv_test_path = {root / 'adult.test'}
pairs = 50

[train]
l2 = 1
"""
    work, cfg = _setup(tmp_path, text)
    for cmd in ("gen", "train", "audit"):
        assert main([cmd, "-c", str(cfg)]) == EXIT_OK
    counts = json.loads((work / "manifest.json").read_text())["counts"]
    assert counts["train"] == 30162 and counts["test"] == 15060


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    done = subprocess.run([sys.executable, "-m", "fmdebias", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    assert "unlearn" in done.stdout
