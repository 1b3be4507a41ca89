import csv
import json
import math
import time

import numpy as np
import pytest

from clusterhrk.cli import main, read_table
from clusterhrk.config import builtin_config_path
from clusterhrk.core import ClusterDesign
from clusterhrk.dof import dof_for
from clusterhrk.errors import ParseError
from clusterhrk.estimators import lz1_stata, uv1


def write(path, text):
    path.write_text(text)
    return str(path)


def rows_of(text):
    return list(csv.DictReader(text.splitlines()))


@pytest.fixture
def hand_csv(tmp_path):
    return write(tmp_path / "hand.csv", "y,cluster\n1,a\n1,a\n-1,b\n-1,b\n")


def test_estimate_hand(hand_csv, capsys):
    assert main(["estimate", hand_csv, "--methods", "UV1", "--dof", "rv0"]) == 0
    (row,) = rows_of(capsys.readouterr().out)
    assert row["coefficient"] == "const" and row["method"] == "UV1(RV0)"
    assert float(row["std_error"]) == pytest.approx(1.0)


def test_no_methods(hand_csv, capsys):
    assert main(["estimate", hand_csv, "--methods", ""]) == 2
    assert "no methods selected" in capsys.readouterr().err


def test_unknown_method(hand_csv, capsys):
    assert main(["estimate", hand_csv, "--methods", "UV9"]) == 2


def test_partial_failure(tmp_path, capsys):
    p = write(tmp_path / "one.csv", "y,cluster,x\n1,a,0.5\n2,a,1.5\n4,a,-1\n3,a,2\n")
    assert main(["estimate", p, "--methods", "UV2,UV1,STATA"]) == 3
    out = rows_of(capsys.readouterr().out)
    assert {r["error"] for r in out if r["method"] == "UV2(RV1)"} == {"SingularPhi"}
    p = write(tmp_path / "two.csv", "y,cluster\n1,a\n2,a\n4,b\n3,b\n")
    assert main(["estimate", p, "--methods", "UV2,STATA"]) == 0
    out = rows_of(capsys.readouterr().out)
    assert out[0]["error"] == "SingularPhi" and out[1]["error"] == ""


@pytest.mark.parametrize(
    "text",
    [
        "y,cluster\n1,a\nx,a\n",
        "y,cluster\n1,000.5,a\n",
        "y,cluster\n1e,a\n",
        "y,cluster\nnan,a\n",
        "cluster,x\na,1\n",
        "",
    ],
)
def test_parse_errors(tmp_path, text, capsys):
    p = write(tmp_path / "bad.csv", text)
    assert main(["estimate", p]) == 2


def test_scientific_notation(tmp_path):
    p = write(tmp_path / "s.csv", "y,cluster\n1.5e-3,a\n-2E2,b\n")
    _, cols = read_table(p)
    assert cols["y"] == [1.5e-3, -200.0]
    with pytest.raises(ParseError):
        read_table(write(tmp_path / "t.csv", "y,cluster\n1_000,a\n"))


def test_round_trip_bit_for_bit(tmp_path, capsys):
    data = tmp_path / "gen.csv"
    assert main(["generate", "smoke", "--treated", "4", "--replication", "3", "--out", str(tmp_path / "gen")]) == 0
    assert json.loads((tmp_path / "gen.json").read_text())["manifest"]["subcommand"] == "generate"
    assert main(["estimate", str(data), "--methods", "STATA,UV1(RV1),UV1(RV0)", "--coefficients", "d,x"]) == 0
    out = {(r["coefficient"], r["method"]): r for r in rows_of(capsys.readouterr().out)}

    _, cols = read_table(data)
    X = np.column_stack([np.ones(len(cols["y"])), cols["d"], cols["x"]])
    cl = np.array([int(c) for c in cols["cluster"]])
    fit = ClusterDesign(X, cl).fit(np.array(cols["y"]))
    for ell, name in ((1, "d"), (2, "x")):
        v = uv1(fit).V[ell, ell]
        assert out[(name, "UV1(RV0)")]["variance"] == repr(float(v))
        assert out[(name, "UV1(RV0)")]["dof"] == repr(dof_for(fit, "UV1", ell, "RV0").d)
        assert out[(name, "UV1(RV1)")]["dof"] == repr(dof_for(fit, "UV1", ell, "RV1").d)
        assert out[(name, "STATA")]["variance"] == repr(float(lz1_stata(fit).V[ell, ell]))
        assert out[(name, "STATA")]["estimate"] == repr(float(fit.beta_hat[ell]))


def test_simulate_smoke(tmp_path):
    t0 = time.perf_counter()
    assert main(["simulate", str(builtin_config_path("smoke")), "--out", str(tmp_path / "smoke")]) == 0
    assert time.perf_counter() - t0 < 10
    doc = json.loads((tmp_path / "smoke.json").read_text())
    assert doc["manifest"]["subcommand"] == "simulate"
    assert doc["manifest"]["seed"] == 0
    assert doc["config"]["n"] == 280
    rows = rows_of((tmp_path / "smoke.csv").read_text())
    assert len(rows) == 13 * 8 * 2
    assert {"method", "C1", "level", "size", "mean_dof", "n_exists"} <= set(rows[0])


def test_simulate_deterministic(tmp_path):
    args = ["simulate", "smoke", "--replications", "5", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_simulate_bad_config(tmp_path, capsys):
    p = write(tmp_path / "c.ini", "[study]\nmethods = STATA, NOPE\n")
    assert main(["simulate", p]) == 2
    err = capsys.readouterr().err
    assert "study.methods" in err and "line 2" in err


def _clustered_csv(tmp_path, C=51, seed=0):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(4, 30, size=C)
    lines = ["y,cluster,x"]
    for c, m in enumerate(sizes):
        u = rng.normal()
        for _ in range(m):
            lines.append(f"{float(rng.normal() + u)!r},s{c},{float(rng.normal())!r}")
    return write(tmp_path / "states.csv", "\n".join(lines) + "\n")


def test_resample_smoke(tmp_path, capsys):
    p = _clustered_csv(tmp_path, C=20)
    args = ["resample", p, "--scheme", "random:14", "--within-fraction", "1.0", "--treated", "13", "--replications", "1"]
    assert main(args) == 0
    rows = rows_of(capsys.readouterr().out)
    assert [r["method"] for r in rows] == list(
        ("STATA", "LZIK", "UV1(RV0)", "UV1(RV1)", "UV2(RV0)", "UV2(RV1)", "UV3(RV0)", "UV3(RV1)")
    )


def test_resample_by_size_outputs(tmp_path):
    p = _clustered_csv(tmp_path)
    out = tmp_path / "rs"
    args = ["resample", p, "--scheme", "bysize:3,11", "--within-fraction", "0.5", "--treated", "5",
            "--replications", "20", "--methods", "STATA,UV1", "--out", str(out)]
    assert main(args) == 0
    doc = json.loads((tmp_path / "rs.json").read_text())
    assert doc["manifest"]["subcommand"] == "resample"
    assert [r["method"] for r in doc["results"]] == ["STATA", "UV1(RV1)"]
    assert doc["results"][0]["mean_dof"] == 13.0  # 14 clusters, C - 1


def test_resample_bad_scheme(tmp_path):
    p = _clustered_csv(tmp_path, C=5)
    assert main(["resample", p, "--scheme", "bysize:9"]) == 2
    assert main(["resample", p, "--scheme", "bysize:4,4"]) == 2


def test_panel_command(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["unit,wave,y,x"]
    for i in range(6):
        for t in (3, 1, 2):
            lines.append(f"u{i},{t},{float(rng.normal())!r},{float(rng.normal())!r}")
    p = write(tmp_path / "panel.csv", "\n".join(lines) + "\n")
    assert main(["panel", p, "--out", str(tmp_path / "pan")]) == 0
    doc = json.loads((tmp_path / "pan.json").read_text())
    assert doc["N"] == 6 and doc["T"] == 3
    lam = np.array(doc["lambda_hat"]["unbiased"])
    np.testing.assert_allclose(lam, lam.T)
    bad = write(tmp_path / "unbal.csv", "unit,wave,y\na,1,1\na,2,2\nb,1,3\n")
    assert main(["panel", bad]) == 2


def test_psd_repair_flag(tmp_path, capsys):
    rng = np.random.default_rng(4)
    cl = np.repeat(np.arange(3), 3)
    x = rng.normal(size=9)
    y = rng.normal(size=9)
    y -= np.repeat(np.bincount(cl, y) / 3, 3)
    lines = ["y,cluster,x"] + [f"{float(y[i])!r},{cl[i]},{float(x[i])!r}" for i in range(9)]
    p = write(tmp_path / "neg.csv", "\n".join(lines) + "\n")
    assert main(["estimate", p, "--methods", "UV1", "--coefficients", "const"]) == 3
    (row,) = rows_of(capsys.readouterr().out)
    assert row["negative_variance"] == "1"
    assert main(["estimate", p, "--methods", "UV1", "--coefficients", "const", "--psd-repair", "truncate"]) in (0, 3)
    (row,) = rows_of(capsys.readouterr().out)
    assert float(row["variance"]) >= 0


def test_levels_flag(hand_csv, capsys):
    assert main(["estimate", hand_csv, "--levels", "0.05,0.5", "--methods", "STATA"]) == 0
    assert main(["estimate", hand_csv, "--levels", "2"]) == 2
