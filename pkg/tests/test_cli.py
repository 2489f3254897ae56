import json
import math

import numpy as np
import pytest

from flowfilt import cli
from flowfilt.checks import demo_config_path
from flowfilt.errors import FlowStalledError

SMALL = """\
scenario:
  name: small
  methods: [flow-recursive, reweight]
  measurements: {measurements}
system:
  model: random-walk
  dim: 1
  noise:
    kind: gaussian
    cov: [[0.1]]
likelihood:
  noise_cov: [[0.5]]
prior:
  mean: [0.0]
  cov: [[1.0]]
  count: 12
flow:
  steps: 8
"""


def write_config(tmp_path, measurements="[[0.5], [1.0]]", text=SMALL):
    path = tmp_path / "c.yaml"
    path.write_text(text.format(measurements=measurements), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert cli.main(["run", str(demo_config_path()), "--out", str(out)]) == 0
    return out


def test_demo_outputs(demo_run):
    rows = cli.read_estimates(demo_run / "estimates.csv")
    report = json.loads((demo_run / "report.json").read_text(encoding="utf-8"))
    assert len(rows) == len(report["records"]) == 3 * 5
    assert {r["method"] for r in rows} == {"flow-recursive", "reweight", "sir"}
    assert len(report["config_hash"]) == 64
    for row, rec in zip(rows, report["records"]):
        assert row["step"] == rec["step"]
        assert np.array_equal(row["mean"], rec["mean"])
        assert np.array_equal(row["cov"], rec["cov"])


def test_demo_flow_tracks_kalman(demo_run):
    # documented tolerance for the shipped demo: 0.1 Kalman standard deviations
    for row in cli.read_estimates(demo_run / "estimates.csv"):
        if row["method"] == "flow-recursive":
            assert row["ess"] == 100
            std = math.sqrt(row["kalman_cov"][0, 0])
            assert abs(row["mean"][0] - row["kalman_mean"][0]) <= 0.1 * std


def test_zero_measurements_writes_prior_record(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", str(write_config(tmp_path, "[]")), "--out", str(out)]) == 0
    rows = cli.read_estimates(out / "estimates.csv")
    assert [(r["step"], r["method"]) for r in rows] == [(0, "flow-recursive"), (0, "reweight")]
    np.testing.assert_array_equal(rows[0]["kalman_mean"], [0.0])


def test_dimension_mismatch_is_config_error(tmp_path, capsys):
    code = cli.main(["run", str(write_config(tmp_path, "[[0.5], [1.0, 2.0]]")), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "scenario.measurements[1]" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unknown_method_flag(tmp_path):
    assert cli.main(["run", str(write_config(tmp_path)), "--methods", "ekf", "--out", str(tmp_path / "o")]) == 2


def test_flow_failure_reports_step(tmp_path, monkeypatch, capsys):
    def broken(scenario, method="flow-recursive", on_update=None):
        exc = FlowStalledError("no progress")
        exc.step = 2
        raise exc

    monkeypatch.setattr(cli, "run_scenario", broken)
    assert cli.main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "o")]) == 3
    assert "step 2" in capsys.readouterr().err


def test_trace_files(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", str(write_config(tmp_path)), "--out", str(out), "--trace", "--methods", "flow-recursive"]) == 0
    lines = (out / "trace.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "method,step,gamma,particle_index,x1"
    assert len(lines) == 1 + 2 * 9 * 12
    diag = json.loads((out / "trace_diagnostics.json").read_text(encoding="utf-8"))
    assert [d["step"] for d in diag] == [1, 2]


def test_seed_override_is_reproducible(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(cfg), "--out", str(a), "--seed", "1"]) == 0
    assert cli.main(["run", str(cfg), "--out", str(b), "--seed", "1"]) == 0
    assert (a / "estimates.csv").read_bytes() == (b / "estimates.csv").read_bytes()
    ra = json.loads((a / "report.json").read_text(encoding="utf-8"))
    assert ra["seed"] == 1


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "--trials", "20"]) == 0
    assert cli.main(["gradcheck", "--trials", "5", "--inject-fault"]) == 1
    assert "FAIL: instance 0" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--trials", "0"]) == 0
    assert cli.main(["gradcheck", "--trials", "-1"]) == 2


def test_selftest_list_and_forced_failure(capsys):
    assert cli.main(["selftest", "--list"]) == 0
    assert "kalman-oracle" in capsys.readouterr().out
    assert cli.main(["selftest", "--only", "kalman-oracle", "--flow-steps", "1"]) == 1
    assert "FAIL  kalman-oracle" in capsys.readouterr().out
    assert cli.main(["selftest", "--only", "nonsense"]) == 2


def test_worker_count(monkeypatch):
    monkeypatch.setenv("FLOWFILT_THREADS", "1")
    assert cli.worker_count(3) == 1
    monkeypatch.setenv("FLOWFILT_THREADS", "8")
    assert cli.worker_count(3) == 3
    monkeypatch.setenv("FLOWFILT_THREADS", "many")
    assert cli.worker_count(3) == 1
