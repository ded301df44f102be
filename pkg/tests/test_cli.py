"""End-to-end CLI runs: reports, determinism, schema, CSV and figure files."""

import json
import math
from pathlib import Path

import jsonschema
import pytest

from dosesens.cli import run

SCHEMA = json.loads((Path(__file__).resolve().parents[1] / "docs" / "report.schema.json").read_text())

DESIGN_CSV = """set_id,dose,outcome,age,wealth
a,0.1,0,34,1.2
a,0.9,1,33,1.1
b,0.2,0,50,2.0
b,0.4,0,51,2.2
b,0.8,1,49,1.9
c,0.0,0,40,1.5
c,0.7,1,41,1.4
d,0.05,0,28,0.9
d,0.6,1,29,1.0
"""

DGP_JSON = {"f": "power:1", "beta": 1.5, "dose_law": "uniform", "effect_mean": 0.0}


@pytest.fixture
def design_file(tmp_path):
    path = tmp_path / "design.csv"
    path.write_text(DESIGN_CSV)
    return path


def load_report(path):
    report = json.loads(Path(path).read_text())
    jsonschema.validate(report, SCHEMA)
    return report


def test_validate_subcommand(design_file, tmp_path):
    out = tmp_path / "report.json"
    tv = tmp_path / "tv.csv"
    code = run(["validate", str(design_file), "--out", str(out), "--tv-gamma", "1.0",
                "--tv-out", str(tv)])
    assert code == 0
    report = load_report(out)
    assert report["results"]["diagnostics"]["num_sets"] == 4
    assert report["input_digest"].startswith("sha256:")
    lines = tv.read_text().splitlines()
    assert lines[0] == "set_id,n,m,tv"
    assert len(lines) == 5
    assert (tmp_path / "tv.png").exists()


def test_validate_reports_are_byte_identical(design_file, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        assert run(["validate", str(design_file), "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sharp_null_seeded_reruns_identical(design_file, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["sharp-null", str(design_file), "--stat", "t", "--gamma", "0", "--method",
            "exact-mc", "--reps", "2000", "--seed", "7"]
    assert run(args + ["--out", str(a)]) == 0
    assert run(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    report = load_report(a)
    assert report["seed"] == 7
    assert report["results"]["method"] == "exact_mc"
    assert 0.0 < report["results"]["p_worst"] <= 1.0


def test_sharp_null_curve_csv_and_figure(design_file, tmp_path):
    out = tmp_path / "r.json"
    curve = tmp_path / "curve.csv"
    code = run(["sharp-null", str(design_file), "--stat", "t", "--curve", "0,0.35,0.7",
                "--method", "normal", "--alpha", "0.3", "--out", str(out),
                "--curve-out", str(curve)])
    assert code == 0
    report = load_report(out)
    lines = curve.read_text().splitlines()
    assert lines[0] == "Gamma,p_worst"
    assert len(lines) == 4
    gammas = [float(l.split(",")[0]) for l in lines[1:]]
    assert gammas == sorted(gammas)
    assert math.isclose(gammas[1], math.exp(0.35))
    assert (tmp_path / "curve.png").exists()
    assert len(report["results"]["curve"]) == 3


def test_sharp_null_adaptive_statistic(design_file, tmp_path):
    out = tmp_path / "r.json"
    code = run(["sharp-null", str(design_file), "--stat", "adaptive:t,threshold:0.5",
                "--gamma", "0.2", "--method", "normal", "--out", str(out)])
    assert code == 0
    report = load_report(out)
    assert len(report["results"]["components"]) == 2


def test_tae_delta_and_ci(design_file, tmp_path):
    out = tmp_path / "r.json"
    code = run(["tae", str(design_file), "--threshold", "0.5", "--gamma", "0.3",
                "--alpha", "0.1", "--delta", "1", "--solver", "enum", "--out", str(out)])
    assert code == 0
    report = load_report(out)
    assert report["results"]["decision"] in ("accept", "reject")
    code = run(["tae", str(design_file), "--threshold", "0.5", "--gamma", "0.3",
                "--alpha", "0.1", "--ci", "--solver", "bnb", "--out", str(out)])
    assert code == 0
    report = load_report(out)
    interval = report["results"]["interval"]
    assert interval is None or interval[0] <= interval[1] <= report["results"]["observed_count"]


def test_tae_requires_delta_or_ci(design_file):
    with pytest.raises(SystemExit):
        run(["tae", str(design_file), "--threshold", "0.5"])


def test_design_sens_subcommand(tmp_path):
    dgp = tmp_path / "dgp.json"
    dgp.write_text(json.dumps(DGP_JSON))
    out = tmp_path / "r.json"
    curve = tmp_path / "phi.csv"
    code = run(["design-sens", "--dgp", str(dgp), "--stat", "t", "--mc-draws", "3000",
                "--tol", "0.05", "--seed", "3", "--out", str(out), "--curve-out", str(curve)])
    assert code == 0
    report = load_report(out)
    assert report["results"]["Gamma_tilde"] > 1.0
    assert curve.read_text().splitlines()[0] == "gamma,phi_hat,se"
    assert (tmp_path / "phi.png").exists()


def test_power_subcommand_grid(tmp_path):
    dgp = tmp_path / "dgp.json"
    dgp.write_text(json.dumps(DGP_JSON))
    out = tmp_path / "r.json"
    curve = tmp_path / "power.csv"
    code = run(["power", "--dgp", str(dgp), "--stat", "t", "--gamma-grid", "0,0.5",
                "--sets", "120", "--reps", "20", "--seed", "2", "--out", str(out),
                "--curve-out", str(curve)])
    assert code == 0
    report = load_report(out)
    assert len(report["results"]["points"]) == 2
    assert curve.read_text().splitlines()[0] == "Gamma,power,se"
    assert (tmp_path / "power.png").exists()


def test_balance_subcommand(design_file, tmp_path):
    out = tmp_path / "r.json"
    table = tmp_path / "balance.csv"
    code = run(["balance", str(design_file), "--reps", "200", "--seed", "1",
                "--out", str(out), "--csv-out", str(table)])
    assert code == 0
    report = load_report(out)
    assert {row["confounder"] for row in report["results"]["covariates"]} == {"age", "wealth"}
    header = table.read_text().splitlines()[0]
    assert header == "confounder,Below,Above,SMD,KS p,Low,High,SMD,KS p"
    assert (tmp_path / "balance.png").exists()


def test_demo_hardness_subcommand(tmp_path):
    out = tmp_path / "r.json"
    prog = tmp_path / "program.txt"
    code = run(["demo-hardness", "--out", str(out), "--emit-program", str(prog)])
    assert code == 0
    report = load_report(out)
    assert report["results"]["counterexample"]["passed"]
    assert report["results"]["program"]["counts"]["p"] == 120
    text = prog.read_text()
    assert text.startswith("signomial v1")
    from dosesens.hardness import parse_signomial

    assert parse_signomial(text).counts()["w"] == 25


def test_cli_error_paths(tmp_path):
    missing = tmp_path / "missing.csv"
    assert run(["validate", str(missing)]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("set_id,dose,outcome\nz,1,0\n")
    assert run(["validate", str(bad)]) == 1


def test_no_figures_flag(design_file, tmp_path):
    tv = tmp_path / "tv.csv"
    assert run(["validate", str(design_file), "--tv-gamma", "0.5", "--tv-out", str(tv),
                "--no-figures", "--out", str(tmp_path / "r.json")]) == 0
    assert tv.exists()
    assert not (tmp_path / "tv.png").exists()


def test_threads_flag_does_not_change_results(design_file, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    base = ["sharp-null", str(design_file), "--stat", "t", "--gamma", "0.4", "--method",
            "exact-mc", "--reps", "1000", "--seed", "9"]
    assert run(base + ["--threads", "1", "--out", str(a)]) == 0
    assert run(base + ["--threads", "8", "--out", str(b)]) == 0
    ra, rb = json.loads(a.read_text()), json.loads(b.read_text())
    assert ra["results"] == rb["results"]


def test_strict_ties_flag(tmp_path):
    path = tmp_path / "tied.csv"
    path.write_text("set_id,dose,outcome\na,0.2,0\na,0.2,1\n")
    assert run(["validate", str(path)]) == 0
    assert run(["validate", str(path), "--strict-ties"]) == 1


def test_validate_bundled_dataset(tmp_path):
    bundled = Path(__file__).resolve().parents[1] / "data" / "synthetic.csv"
    assert run(["validate", str(bundled), "--out", str(tmp_path / "r.json")]) == 0
    report = load_report(tmp_path / "r.json")
    assert report["results"]["diagnostics"]["num_sets"] == 120
