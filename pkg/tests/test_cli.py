import csv
import io
import json

import pytest

from artifact.cli import run

KOLMO = """
[operator]
Z0 = [0; 1]
B = [x2; 0]

[coefficients]
n = 2
N = 1

[simulation]
seed = 11
observable = bump
t = geom 0.01 0.05 3
words = 0
nodes = 41 41
paths = 1024
dt = 0.01
check_t = 0.05
check_points = 3
"""

OU = """
[lattice]
model = ou
radius = 2
coupling = 0.2
t = 0.5
paths = 256
configurations = 2
radii = 1 2 3

[bounds]
n = 2
epsilon = 0.5
t = 0.5 1.0
max_distance = 4

[simulation]
seed = 3
"""

SI1A = """
[lattice]
model = custom
radius = 2
Y = [0; 1] | [-1; 0]
J = 0
offsets = -1; 0; 1
q1 = x6
lam = 0
delta = 0.3

[simulation]
seed = 1
"""


def call(tmp_path, text, *args, name="cfg.ini", out="out"):
    cfg = tmp_path / name
    cfg.write_text(text)
    o, e = io.StringIO(), io.StringIO()
    rc = run([*args, "--config", str(cfg), "--out", str(tmp_path / out)], stdout=o, stderr=e)
    return rc, o.getvalue(), e.getvalue()


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_algebra_chain(tmp_path):
    rc, out, _ = call(tmp_path, KOLMO, "algebra", "chain")
    assert rc == 0 and "N = 1, CR.I pass" in out
    rec = {r["key"]: r["value"] for r in rows(tmp_path / "out" / "algebra.csv")}
    assert rec["N"] == "1" and rec["closed"] == "true" and rec["t_infinite"] == "true"


def test_missing_seed_names_key(tmp_path):
    rc, _, err = call(tmp_path, KOLMO.replace("seed = 11\n", ""), "algebra", "chain")
    assert rc == 2 and "simulation.seed" in err


def test_seed_flag_overrides(tmp_path):
    rc, _, _ = call(tmp_path, KOLMO.replace("seed = 11\n", ""), "algebra", "span", "--seed", "5")
    assert rc == 0
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["seed"] == 5


def test_invalid_value_names_key(tmp_path):
    rc, _, err = call(tmp_path, KOLMO.replace("Z0 = [0; 1]", "Z0 = [0; 1"), "algebra", "chain")
    assert rc == 2 and "operator.Z0" in err


def test_numerical_failure_exit(tmp_path):
    text = KOLMO.replace("Z0 = [0; 1]\nB = [x2; 0]", "Z0 = [1; 0; 0]\nB = [0; x1; x2]\nmax_depth = 1")
    rc, _, err = call(tmp_path, text, "algebra", "chain")
    assert rc == 3 and "does not close" in err


def test_coeffs_synth(tmp_path):
    rc, out, _ = call(tmp_path, KOLMO, "coeffs", "synth")
    assert rc == 0 and "verify pass" in out
    d = tmp_path / "out"
    assert (d / "table.txt").read_text().startswith("n=2,N=1,eps=")
    assert [r["level"] for r in rows(d / "verify.csv")] == ["1", "2"]
    # the written table round-trips through coeffs verify
    text = KOLMO + f"table = {d / 'table.txt'}\n"
    text = text.replace("[coefficients]\n", f"[coefficients]\ntable = {d / 'table.txt'}\n", 1).rsplit("table =", 1)[0]
    assert call(tmp_path, text, "coeffs", "verify", out="o2")[0] == 0


def test_manifest_hash_on_every_row(tmp_path):
    rc, _, _ = call(tmp_path, KOLMO, "sde", "check")
    d = tmp_path / "out"
    man = json.loads((d / "manifest.json").read_text())
    assert set(man) >= {"config_sha256", "seed", "versions", "wall_time_s", "manifest_hash"}
    data = rows(d / "sde.csv")
    assert len(data) == 3 and all(r["manifest"] == man["manifest_hash"] for r in data)
    assert rc == 0


def test_bit_identical_reruns(tmp_path):
    for out in ("a", "b"):
        assert call(tmp_path, KOLMO, "sde", "check", "--threads", "2", out=out)[0] == 0
        assert call(tmp_path, OU, "lattice", "fsp", out=out)[0] in (0, 1)
    for name in ("sde.csv", "propagation.csv", "fsp_fit.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_smooth_run_then_fit(tmp_path):
    assert call(tmp_path, KOLMO, "smooth", "run")[0] == 0
    d = tmp_path / "out"
    assert len(rows(d / "smoothing.csv")) == 3
    first = rows(d / "fits.csv")
    assert call(tmp_path, KOLMO, "smooth", "fit")[0] == 0
    again = rows(d / "fits.csv")
    assert float(first[0]["fitted_slope"]) == pytest.approx(float(again[0]["fitted_slope"]))


def test_smooth_fit_needs_run(tmp_path):
    rc, _, err = call(tmp_path, KOLMO, "smooth", "fit")
    assert rc == 2 and "smoothing.csv" in err


def test_lattice_commands(tmp_path):
    assert call(tmp_path, OU, "lattice", "converge")[0] == 0
    assert rows(tmp_path / "out" / "convergence.csv")[0]["k"] == "1"
    assert call(tmp_path, OU, "lattice", "check-conditions")[0] == 0


def test_condition_violation_exit(tmp_path):
    rc, _, _ = call(tmp_path, SI1A, "lattice", "check-conditions")
    assert rc == 1
    res = {r["condition"]: r for r in rows(tmp_path / "out" / "conditions.csv")}
    assert res["si1a"]["pass"] == "false" and "q_1,(0,)" in res["si1a"]["detail"]
    assert res["si3a"]["pass"] == "true"


def test_bounds_from_model(tmp_path):
    assert call(tmp_path, OU, "bounds", "constants")[0] == 0
    c = rows(tmp_path / "out" / "constants.csv")
    assert [r["n"] for r in c] == ["1", "2"]
    assert float(c[0]["A_n"]) == pytest.approx(2.0)  # |I| / eps
    assert call(tmp_path, OU, "bounds", "envelope")[0] == 0
    env = rows(tmp_path / "out" / "envelope.csv")
    assert len(env) == 2 * 2 * 5
    assert {r["level"] for r in env} == {"1", "2"}


def test_bounds_explicit(tmp_path):
    text = "[bounds]\nn = 1\ncardI = 1\nc = 1\nb = 1\nepsilon = 1\nC0 = 0\n[simulation]\nseed = 0\n"
    assert call(tmp_path, text, "bounds", "constants")[0] == 0
    r = rows(tmp_path / "out" / "constants.csv")[0]
    assert float(r["A_n"]) == 4.0 and float(r["v_n"]) == 4.0
    rc, _, err = call(tmp_path, text.replace("epsilon = 1", "epsilon = 2"), "bounds", "constants")
    assert rc == 3 and "epsilon" in err


def test_figures(tmp_path):
    pytest.importorskip("matplotlib")
    rc, _, _ = call(tmp_path, OU, "bounds", "envelope", "--figures")
    assert rc == 0
    d = tmp_path / "out"
    assert (d / "envelope.png").stat().st_size > 0
    assert "envelope.png" in json.loads((d / "manifest.json").read_text())["outputs"]
