import json
import math
import subprocess
import sys

import numpy as np
import pytest

from exitlab.cli import run


def run_json(capsys, argv):
    assert run(argv) == 0
    return json.loads(capsys.readouterr().out)


def strip_times(doc):
    if isinstance(doc, dict):
        return {k: strip_times(v) for k, v in doc.items() if k != "wall_time"}
    if isinstance(doc, list):
        return [strip_times(v) for v in doc]
    return doc


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path / "linear-ou.json"
    path.write_text(json.dumps({"b": "x", "sigma": "1", "q_minus": -1.0, "q_plus": 1.0}))
    return str(path)


def test_theory_lambda(capsys, model_file):
    doc = run_json(capsys, ["theory", "--model", model_file, "--eps", "0.1", "--x", "0",
                            "--alpha", "1.3"])
    assert doc["schema"] == 1
    assert doc["result"]["Lambda"] == pytest.approx(1.1283792, abs=1e-7)
    assert doc["result"]["split"]["p_plus"] == pytest.approx(0.5)
    assert doc["result"]["schedule"]["N"] == 2
    m = doc["manifest"]
    assert m["command"] == "theory" and m["seed"] == 0 and len(m["model_hash"]) > 8
    assert m["parameters"]["eps"] == 0.1 and m["parameters"]["alpha"] == 1.3


def test_missing_model_file(capsys, tmp_path):
    missing = str(tmp_path / "nope.json")
    assert run(["theory", "--model", missing, "--eps", "0.1", "--alpha", "1.3"]) == 1
    assert missing in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["bogus"], ["theory", "--eps", "0.1"],
                                  ["theory", "--eps", "0.1", "--alpha", "1.3", "--frobnicate"],
                                  ["theory", "--eps", "2", "--alpha", "1.3"],
                                  ["tail", "--eps", "0.1", "--alpha", "0.9"]])
def test_usage_errors(capsys, argv):
    assert run(argv) == 1
    assert "error" in capsys.readouterr().err


def test_flow(capsys):
    doc = run_json(capsys, ["flow", "--x", "0.1", "--t", "1"])
    assert doc["result"]["S_t_x"] == pytest.approx(0.1 * math.e, rel=1e-8)
    assert doc["result"]["exit_time"] == pytest.approx(math.log(10), rel=1e-6)


def test_conjugation_csv(tmp_path, capsys):
    out = tmp_path / "f.csv"
    assert run(["conjugation", "--model", "cubic", "--grid", "64", "--out", str(out)]) == 0
    assert "f(q_plus)" in capsys.readouterr().out
    assert out.read_text().splitlines()[0] == "x,f_of_x"
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    np.testing.assert_allclose(data[:, 1], data[:, 0] / np.sqrt(1 + data[:, 0] ** 2), atol=1e-6)
    side = json.loads((tmp_path / "f.csv.manifest.json").read_text())
    assert side["schema"] == 1 and side["manifest"]["command"] == "conjugation"


def test_simulate_csv_and_dump(tmp_path):
    out = tmp_path / "sim.csv"
    argv = ["simulate", "--eps", "0.1", "--n", "50", "--seed", "4", "--dump-path", "3",
            "--out", str(out)]
    assert run(argv) == 0
    assert out.read_text().splitlines()[0] == "path_id,tau,side,censored"
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    assert data.shape == (50, 4)
    path = np.loadtxt(tmp_path / "sim.csv.path3.csv", delimiter=",", skiprows=1)
    assert path[0, 0] == 0.0 and abs(path[-1, 1]) >= 0.99
    assert path[-1, 0] == pytest.approx(data[3, 1], abs=1e-3)


def test_tail_json(tmp_path):
    out = tmp_path / "tail.json"
    argv = ["tail", "--eps", "0.1", "--alpha", "1.3", "--n", "4000", "--levels", "3",
            "--residual-paths", "20", "--seed", "42", "--out", str(out)]
    assert run(argv) == 0
    doc = json.loads(out.read_text())["result"]
    assert doc["query"]["alpha"] == 1.3 and doc["method"] == "splitting"
    assert doc["ci"][0] <= doc["p_hat"] <= doc["ci"][1]
    assert doc["theory"]["Lambda_eps_power"] == pytest.approx(1.1283792 * 0.1 ** 0.3, rel=1e-6)
    assert doc["residual"]["n"] == 20
    assert set(doc["per_side"]) == {"q_minus", "q_plus"}


def test_determinism(tmp_path):
    docs = []
    for k in range(2):
        out = tmp_path / f"t{k}.json"
        argv = ["tail", "--model", "cubic", "--eps", "0.1", "--alpha", "1.2", "--n", "3000",
                "--seed", "7", "--threads", "1", "--deterministic-reduce", "--out", str(out)]
        assert run(argv) == 0
        docs.append(strip_times(json.loads(out.read_text())))
    assert docs[0] == docs[1]
    csvs = []
    for k in range(2):
        out = tmp_path / f"d{k}.csv"
        assert run(["density", "--eps", "0.1", "--n", "5000", "--seed", "3", "--out", str(out)]) == 0
        csvs.append(out.read_bytes())
    assert csvs[0] == csvs[1]


def test_density_csv(tmp_path):
    out = tmp_path / "d.csv"
    assert run(["density", "--eps", "0.1", "--n", "20000", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == "z,p_emp,p_ref,weighted_gap"
    assert run(["density", "--eps", "0.1", "--policy", "2.5", "--out", str(out)]) == 1


def test_smallball_json(capsys):
    doc = run_json(capsys, ["smallball", "--eps", "0.1", "--theta", "0.5", "--n", "20000"])
    assert doc["result"]["theoretical"] == pytest.approx(math.sqrt(0.1 / math.pi), rel=1e-12)
    assert doc["manifest"]["units"]["T_eps"] == "time"


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "exitlab.cli", "theory", "--eps", "0.1",
                           "--alpha", "1.3"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["result"]["Lambda"] == pytest.approx(1.1283792, abs=1e-7)


def test_verify_report_is_deterministic():
    from exitlab.acceptance import criterion_1, criterion_3

    for crit in (criterion_1, lambda seed: criterion_3(seed, n=500)):
        a, b = crit(5), crit(5)
        assert a.passed and a.measured == b.measured


@pytest.mark.slow
def test_verify_quick(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert run(["verify", "--suite", "quick", "--out", str(out)]) == 0
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("[")]
    assert len(lines) == 6 and all(l.startswith("[PASS]") for l in lines)
    report = json.loads(out.read_text())["result"]
    assert report["suite"] == "quick" and report["passed"] == report["total"] == 6
    assert [c["id"] for c in report["criteria"]] == [1, 2, 3, 4, 9, 10]
