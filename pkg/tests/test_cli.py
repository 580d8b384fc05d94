import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import GOLDEN
from hierform.cli import extra_formula, main, read_model_file
from hierform.tabular import write_csv


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory, mixed_data):
    p = tmp_path_factory.mktemp("data") / "mixed.csv"
    p.write_text(write_csv(mixed_data))
    return str(p)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory, data_csv):
    out = str(tmp_path_factory.mktemp("fit") / "bundle")
    code = main(["fit", "--formula", "y ~ x + (1|g)", "--data", data_csv, "--out", out,
                 "--chains", "2", "--iter", "400", "--seed", "3"])
    assert code == 0
    return out


# --------------------------------------------------------------------------
# parse


def test_parse_prints_ast(capsys):
    code, out, _ = run(capsys, "parse", "--formula", "y ~ x + (1|g)")
    assert code == 0
    d = json.loads(out)
    assert d["response"]["variables"] == ["y"]


def test_parse_bare_rhs_with_resolution(capsys):
    code, out, _ = run(capsys, "parse", "--formula", "(1|g1/g2)", "--resolve")
    assert code == 0
    blocks = json.loads(out)["blocks"]
    assert [b["group"] for b in blocks] == ["g1", "g1:g2"]


def test_parse_nonlinear_with_extras(capsys):
    code, out, _ = run(capsys, "parse", "--formula", "cum ~ ult * (1 - exp(-(dev/theta)^omega))", "--nl",
                       "-e", "ult=1 + (1|AY)", "-e", "omega=1", "-e", "theta=1", "--resolve")
    assert code == 0
    d = json.loads(out)
    assert list(d["nlpars"]) == ["ult", "omega", "theta"]
    assert [b["group"] for b in d["blocks"]] == ["AY"]


def test_parse_syntax_error_exit_code(capsys):
    code, _, err = run(capsys, "parse", "--formula", "y ~")
    assert code == 2 and "syntax error" in err


def test_parse_validation_error_exit_code(capsys):
    code, _, err = run(capsys, "parse", "--formula", "y ~ (1|p|g1/g2)", "--resolve")
    assert code == 3


def test_extra_formula_shorthand():
    assert extra_formula("sigma=x + (1|g)") == "sigma ~ x + (1|g)"
    assert extra_formula("zi ~ child") == "zi ~ child"


def test_model_file(tmp_path):
    p = tmp_path / "loss.model"
    p.write_text("# loss curve\ncum ~ ult * (1 - exp(-(dev/theta)^omega))\nult: 1 + (1|AY)\nomega: 1\ntheta ~ 1\n")
    main_f, extra = read_model_file(str(p))
    assert main_f.startswith("cum ~")
    assert extra == ["ult ~ 1 + (1|AY)", "omega ~ 1", "theta ~ 1"]


# --------------------------------------------------------------------------
# data-driven commands


def test_missing_data_file(capsys, tmp_path):
    code, _, err = run(capsys, "codegen", "--formula", "y ~ 1", "--data", str(tmp_path / "nope.csv"))
    assert code == 1 and "cannot read" in err


def test_unknown_column_exit_code(capsys, data_csv):
    code, _, err = run(capsys, "codegen", "--formula", "y ~ xx", "--data", data_csv)
    assert code == 3 and "did you mean" in err


def test_design_dump(capsys, data_csv, tmp_path):
    code, _, _ = run(capsys, "design-dump", "--formula", "y ~ x + (1|g)", "--data", data_csv, "--out-dir", str(tmp_path / "dd"))
    assert code == 0
    files = sorted(os.listdir(tmp_path / "dd"))
    assert "X_mu.csv" in files and "Z_g.csv" in files
    rows = list(csv.reader(open(tmp_path / "dd" / "Z_g.csv")))
    assert len(rows) == 41 and rows[0] == ["a[Intercept]", "b[Intercept]", "c[Intercept]", "d[Intercept]"]


def test_codegen_matches_snapshot(capsys, tmp_path):
    sim = tmp_path / "mm.csv"
    assert main(["simulate-mm", "--seed", "1", "--out", str(sim)]) == 0
    code, out, _ = run(capsys, "codegen", "--formula", "y ~ 1 + (1|mm(s1, s2))", "--data", str(sim))
    assert code == 0
    with open(os.path.join(GOLDEN, "programs", "mm.stan"), encoding="utf-8") as fh:
        assert out == fh.read()


def test_simulate_mm_is_reproducible(capsys):
    _, a, _ = run(capsys, "simulate-mm", "--seed", "4", "--nstudents", "50")
    _, b, _ = run(capsys, "simulate-mm", "--seed", "4", "--nstudents", "50")
    assert a == b and a.startswith("s1,s2,w1,w2,y\n")


def test_logdensity(capsys, data_csv):
    code, out, _ = run(capsys, "logdensity", "--formula", "y ~ x", "--data", data_csv, "--theta", "0.1,0.2,0.0")
    assert code == 0
    d = json.loads(out)
    assert d["dim"] == 3 and d["names"] == ["b_Intercept", "b_x", "log_sigma"]
    assert np.isfinite(d["log_density"]) and len(d["gradient"]) == 3


def test_logdensity_wrong_length(capsys, data_csv):
    code, _, _ = run(capsys, "logdensity", "--formula", "y ~ x", "--data", data_csv, "--theta", "0.1")
    assert code == 1


# --------------------------------------------------------------------------
# fit bundles


def test_bundle_contents(bundle):
    names = set(os.listdir(bundle))
    assert {"spec.json", "config.json", "draws.csv", "loglik.csv", "meta.json", "summary.txt"} <= names
    cfg = json.load(open(os.path.join(bundle, "config.json")))
    assert cfg["warmup"] == 200 and cfg["seed"] == 3


def test_summary_from_bundle_is_byte_identical(capsys, bundle):
    code, out, _ = run(capsys, "summary", bundle)
    assert code == 0
    with open(os.path.join(bundle, "summary.txt"), encoding="utf-8") as fh:
        assert out == fh.read()


def test_compare_bundle_with_itself(capsys, bundle):
    code, out, _ = run(capsys, "compare", bundle, bundle, "--names", "a,b")
    assert code == 0
    diff_line = [l for l in out.splitlines() if l.startswith("a - b")][0]
    assert diff_line.split()[-2:] == ["0.00", "0.00"]


def test_effects_command(capsys, bundle, tmp_path):
    out = tmp_path / "eff.csv"
    code, _, _ = run(capsys, "effects", bundle, "--focal", "x", "--resolution", "5", "--out", str(out))
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 5 and set(rows[0]) == {"condition", "x", "estimate", "lower95", "upper95"}


def test_effects_unknown_focal(capsys, bundle):
    code, _, err = run(capsys, "effects", bundle, "--focal", "nope")
    assert code == 3


def test_predict_command(capsys, bundle, tmp_path):
    new = tmp_path / "new.csv"
    new.write_text("x,g\n0.0,a\n1.0,zz\n")
    code, out, _ = run(capsys, "predict", bundle, "--newdata", str(new))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["row"] for r in rows] == ["1", "2"]
    assert all(float(r["lower95"]) <= float(r["estimate"]) <= float(r["upper95"]) for r in rows)


def test_same_seed_gives_identical_draws(bundle, data_csv, tmp_path):
    out = str(tmp_path / "again")
    assert main(["fit", "--formula", "y ~ x + (1|g)", "--data", data_csv, "--out", out,
                 "--chains", "2", "--iter", "400", "--seed", "3"]) == 0
    assert open(os.path.join(out, "draws.csv")).read() == open(os.path.join(bundle, "draws.csv")).read()


def test_nonconverged_exit_code(capsys, data_csv, tmp_path):
    code, _, err = run(capsys, "fit", "--formula", "y ~ x + (1|g)", "--data", data_csv, "--out", str(tmp_path / "b"),
                       "--chains", "2", "--iter", "12", "--warmup", "2", "--seed", "1")
    assert code == 5 and "R-hat" in err


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "hierform.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("hierform ")
