import json

import numpy as np
import pytest

from fluidq import __version__
from fluidq.cli import compare_tables, main, read_csv
from fluidq.errors import ConfigError
from fluidq.scenario import load, parse

BASE = {
    "name": "tiny",
    "arrival": {"kind": "constant", "value": 2.0},
    "service": {"kind": "exponential", "rate": 1.0},
    "patience": {"kind": "exponential", "rate": 0.5},
    "numerics": {"dt": 0.01, "T": 3.0},
    "tasks": ["solve_elapsed", "whitt_check", "residual_check", "zhang_solve", "zhang_roundtrip",
              "des_validate"],
    "tolerances": {"zhang_vs_elapsed": 0.02, "des_sup": 0.15, "whitt": 0.02},
    "des": {"n": 100, "reps": 10, "T": 3.0, "grid_points": 31},
}


def write(tmp_path, body, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(body))
    return p


def test_run_writes_reports(tmp_path):
    p = write(tmp_path, BASE)
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rep = json.loads((tmp_path / "o" / "solve_elapsed.json").read_text())
    assert rep["version"] == __version__ and len(rep["scenario_sha256"]) == 64 and rep["passed"]
    head = (tmp_path / "o" / "elapsed.csv").read_text().splitlines()[0]
    assert head == "t,X,B,Q,K,D,R,chi,kappa"


def test_run_is_byte_identical(tmp_path):
    p = write(tmp_path, BASE)
    for d in ("a", "b"):
        assert main(["run", str(p), "--out", str(tmp_path / d), "--quiet", "--seed", "4"]) == 0
    files = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert files == sorted(f.name for f in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_failed_check_exits_2(tmp_path):
    body = dict(BASE, tolerances={"balance": -1.0}, tasks=["solve_elapsed"])
    assert main(["run", str(write(tmp_path, body)), "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_expected_infeasible_roundtrip_passes(tmp_path):
    body = dict(BASE, patience={"kind": "uniform", "lo": 0.0, "hi": 2.0}, arrival={"kind": "constant", "value": 1.5},
                service={"kind": "exponential", "rate": 1.0}, tasks=["solve_elapsed", "zhang_roundtrip"],
                initial={"kind": "layer", "a": 0.5, "scale": 1.5}, expect={"zhang_roundtrip": "infeasible"})
    out = tmp_path / "o"
    assert main(["run", str(write(tmp_path, body)), "--out", str(out), "--quiet"]) == 0
    rep = json.loads((out / "zhang_roundtrip.json").read_text())
    assert rep["outcome"] == "infeasible: expected" and rep["certificate"]["reason"] == "z depends on x"


@pytest.mark.parametrize("change", [
    {"bogus": 1},
    {"tasks": ["whitt_check"]},
    {"tasks": ["nope"]},
    {"numerics": {"dt": 0.01, "T": 3.0, "order": 2}},
    {"numerics": {"dt": 0.01, "da": 0.02}},
    {"service": {"kind": "exponential"}},
    {"initial": {"kind": "layer", "a": 0.5, "extra": 1}},
    {"expect": {"zhang_roundtrip": "maybe"}},
])
def test_config_errors_exit_1(tmp_path, change, capsys):
    body = dict(BASE, **change)
    assert main(["run", str(write(tmp_path, body)), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err


def test_atomic_law_whitt_is_unsupported(tmp_path, capsys):
    body = dict(BASE, service={"kind": "deterministic", "value": 1.0}, tasks=["solve_elapsed", "whitt_check"])
    assert main(["run", str(write(tmp_path, body)), "--out", str(tmp_path / "o"), "--quiet"]) == 1
    assert "unsupported-model" in capsys.readouterr().err


def test_missing_or_broken_file(tmp_path):
    assert main(["run", str(tmp_path / "none.json")]) == 1
    (tmp_path / "bad.json").write_text("{")
    assert main(["run", str(tmp_path / "bad.json")]) == 1


def test_dt_override(tmp_path):
    sc = load(write(tmp_path, BASE), dt=0.005)
    assert sc.params.dt == 0.005 and sc.params.da == 0.005


def test_parse_defaults():
    sc = parse({k: BASE[k] for k in ("arrival", "service", "patience")})
    assert sc.tasks == ("solve_elapsed",) and sc.params.dt == 1e-3


def _csv(path, t, **cols):
    names = ["t", *cols]
    rows = [",".join(names)] + [",".join(f"{v:.12g}" for v in r) for r in zip(t, *cols.values())]
    path.write_text("\n".join(rows) + "\n")
    return path


def test_compare(tmp_path, capsys):
    t = np.linspace(0, 1, 11)
    a = _csv(tmp_path / "a.csv", t, Q=t, B=0 * t)
    b = _csv(tmp_path / "b.csv", np.linspace(0, 2, 41), Q=np.linspace(0, 2, 41) + 1e-4, B=0 * np.linspace(0, 2, 41))
    assert main(["compare", str(a), str(b), "--cols", "Q,B", "--tol", "1e-3"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["columns"]["Q"]["sup"] == pytest.approx(1e-4)
    assert rep["columns"]["Q"]["l1"] == pytest.approx(1e-4)
    assert main(["compare", str(a), str(b), "--cols", "Q", "--tol", "1e-5"]) == 2


def test_compare_errors(tmp_path):
    a = _csv(tmp_path / "a.csv", np.linspace(0, 1, 5), Q=np.zeros(5))
    c = _csv(tmp_path / "c.csv", np.linspace(2, 3, 5), Q=np.zeros(5))
    assert main(["compare", str(a), str(c), "--cols", "Q"]) == 1
    assert main(["compare", str(a), str(a), "--cols", "X"]) == 1
    with pytest.raises(ConfigError):
        compare_tables(read_csv(a), read_csv(c), ["Q"], 1e-3)


def test_shipped_scenarios_parse():
    from pathlib import Path
    for p in sorted((Path(__file__).resolve().parents[1] / "scenarios").glob("*.json")):
        load(p)
